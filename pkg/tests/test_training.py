import json
import math
from dataclasses import replace

import numpy as np
import pytest

from g2p_transformer.data import PAD_ID, make_batches
from g2p_transformer.model import ModelConfig, build_model, cast_params, forward, load_checkpoint
from g2p_transformer.tensor import NumericError
from g2p_transformer.training import (
    DegenerateBatchError,
    OptimizerState,
    ScheduleState,
    TrainOptions,
    adam_step,
    clip_global_norm,
    cross_entropy_loss,
    lr_schedule_update,
    train,
    train_step,
)


def test_cross_entropy_examples(rng):
    targets = rng.integers(0, 44, size=(2, 5))
    mask = np.ones((2, 5), dtype=bool)
    perfect = np.full((2, 5, 44), -30.0)
    np.put_along_axis(perfect, targets[..., None], 30.0, axis=-1)
    assert cross_entropy_loss(perfect, targets, mask)[0] < 1e-3
    loss, _ = cross_entropy_loss(np.zeros((2, 5, 44)), targets, mask)
    assert loss == pytest.approx(math.log(44)) and loss == pytest.approx(3.7842, abs=1e-4)


def test_cross_entropy_duplicate_row(rng):
    logits = rng.standard_normal((1, 4, 7))
    targets = rng.integers(0, 7, size=(1, 4))
    mask = np.ones((1, 4), dtype=bool)
    single, _ = cross_entropy_loss(logits, targets, mask)
    double, _ = cross_entropy_loss(np.concatenate([logits] * 2), np.concatenate([targets] * 2),
                                   np.concatenate([mask] * 2))
    assert double == pytest.approx(single)


def test_cross_entropy_masking(rng):
    logits = rng.standard_normal((2, 4, 6))
    targets = np.array([[3, 4, 2, PAD_ID], [5, 2, PAD_ID, PAD_ID]])
    mask = targets != PAD_ID
    loss, grad = cross_entropy_loss(logits, targets, mask)
    assert np.all(grad[~mask] == 0.0)
    logits2 = logits.copy()
    logits2[~mask] = 99.0
    assert cross_entropy_loss(logits2, targets, mask)[0] == loss
    np.testing.assert_allclose(grad.sum(axis=-1), 0.0, atol=1e-12)
    with pytest.raises(DegenerateBatchError):
        cross_entropy_loss(logits, targets, np.zeros_like(mask))


def _scalar(value):
    return {"p": np.array([value])}


def test_adam_zero_gradient_is_a_no_op():
    params = _scalar(1.5)
    state = OptimizerState.fresh(params, 2e-4)
    adam_step(params, {"p": np.zeros(1)}, state)
    assert params["p"][0] == 1.5 and state.t == 1


@pytest.mark.parametrize("g", [1e-6, -3.0, 250.0])
def test_adam_first_step_moves_by_lr(g):
    params = _scalar(0.0)
    state = OptimizerState.fresh(params, 2e-4)
    adam_step(params, {"p": np.array([g])}, state)
    assert params["p"][0] == pytest.approx(-np.sign(g) * 2e-4, rel=1e-2)


def test_adam_two_steps_against_hand_simulation():
    params = _scalar(1.0)
    state = OptimizerState.fresh(params, 0.1)
    p, m, v = 1.0, 0.0, 0.0
    for t in (1, 2):
        adam_step(params, {"p": np.array([1.0])}, state)
        m = 0.9 * m + 0.1
        v = 0.998 * v + 0.002
        p -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.998 ** t)) + 1e-8)
        assert params["p"][0] == pytest.approx(p, abs=1e-6)
        assert params["p"][0] == pytest.approx(1.0 - 0.1 * t, abs=1e-6)


def test_adam_zero_lr_is_identity(rng):
    params = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(5)}
    before = {k: v.copy() for k, v in params.items()}
    state = OptimizerState.fresh(params, 0.0)
    for _ in range(3):
        adam_step(params, {k: rng.standard_normal(v.shape) for k, v in params.items()}, state)
    for k in params:
        np.testing.assert_array_equal(params[k], before[k])


def test_adam_rejects_non_finite_before_mutating():
    params = {"a": np.ones(2), "b": np.ones(2)}
    state = OptimizerState.fresh(params, 0.1)
    with pytest.raises(NumericError, match="b"):
        adam_step(params, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, state)
    np.testing.assert_array_equal(params["a"], 1.0)
    assert state.t == 0 and np.all(state.m["a"] == 0)


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(grads, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose([grads["a"][0], grads["b"][0]], [0.6, 0.8])
    grads = {"a": np.array([0.3])}
    clip_global_norm(grads, 1.0)
    assert grads["a"][0] == 0.3


def test_schedule_monotone_improvement():
    state, lr = ScheduleState(), 2e-4
    for value in (10, 9, 8):
        state, lr = lr_schedule_update(state, value, lr)
    assert lr == 2e-4 and state.best_per == 8 and state.epochs_since_improvement == 0


def test_schedule_decays_after_patience():
    state, lr = lr_schedule_update(ScheduleState(), 5.0, 2e-4)
    for i in range(49):
        state, lr = lr_schedule_update(state, 5.0 + (i % 3), lr)
        assert lr == 2e-4
    state, lr = lr_schedule_update(state, 5.0, lr)
    assert lr == pytest.approx(4e-5) and state.epochs_since_improvement == 0
    state, lr = lr_schedule_update(state, 6.0, lr)
    assert state.epochs_since_improvement == 1
    state, lr = lr_schedule_update(state, 4.9, lr)
    assert state.epochs_since_improvement == 0 and state.best_per == 4.9 and lr == pytest.approx(4e-5)


def test_schedule_floor():
    state = ScheduleState(best_per=1.0, patience=1)
    lr = 2e-7
    state, lr = lr_schedule_update(state, 2.0, lr)
    assert lr == 1e-7
    state, lr = lr_schedule_update(state, 2.0, lr)
    assert lr == 1e-7
    with pytest.raises(ValueError):
        lr_schedule_update(state, -1.0, lr)


def _transformer_3x3(vocab_g, vocab_p, **kw):
    return ModelConfig(n_enc_blocks=3, n_dec_blocks=3, grapheme_vocab_size=len(vocab_g),
                       phoneme_vocab_size=len(vocab_p), **kw)


def _first_batch(entries, vocab_g, vocab_p, size=32):
    return make_batches(entries, vocab_g, vocab_p, size, np.random.default_rng(0))[0]


def test_initial_loss_near_uniform(cmu_entries, cmu_vocabs):
    vocab_g, vocab_p = cmu_vocabs
    config = _transformer_3x3(vocab_g, vocab_p)
    batch = _first_batch(cmu_entries, vocab_g, vocab_p).trimmed()
    for seed in range(3):
        logits, _ = forward(build_model(config, seed), config, batch.src_ids, batch.dec_in_ids)
        loss, _ = cross_entropy_loss(logits, batch.dec_target_ids, batch.target_mask)
        assert abs(loss - math.log(len(vocab_p))) <= 0.1 * math.log(len(vocab_p))


def _losses(config, batch, steps, seed=0, eval_mode=False):
    params = build_model(config, seed)
    opt = OptimizerState.fresh(params, 2e-4)
    rng = np.random.default_rng(seed + 1)
    t = batch.trimmed()

    def current():
        logits, _ = forward(params, config, t.src_ids, t.dec_in_ids)
        return cross_entropy_loss(logits, t.dec_target_ids, t.target_mask)[0]

    out = [current()] if eval_mode else []
    for _ in range(steps):
        loss, _ = train_step(params, config, batch, opt, rng, TrainOptions())
        out.append(current() if eval_mode else loss)
    return out


def test_loss_strictly_decreases_without_dropout(cmu_entries, cmu_vocabs):
    vocab_g, vocab_p = cmu_vocabs
    config = _transformer_3x3(vocab_g, vocab_p, dropout=0.0)
    losses = _losses(config, _first_batch(cmu_entries, vocab_g, vocab_p), 21)
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_eval_loss_strictly_decreases_with_dropout(cmu_entries, cmu_vocabs):
    vocab_g, vocab_p = cmu_vocabs
    config = _transformer_3x3(vocab_g, vocab_p)
    losses = _losses(config, _first_batch(cmu_entries, vocab_g, vocab_p), 20, eval_mode=True)
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_train_step_invariant_to_batch_order(cmu_entries, cmu_vocabs):
    vocab_g, vocab_p = cmu_vocabs
    config = ModelConfig(n_enc_blocks=1, n_dec_blocks=1, d_m=16, d_ff=32, heads=4, dropout=0.0,
                         grapheme_vocab_size=len(vocab_g), phoneme_vocab_size=len(vocab_p))
    batch = _first_batch(cmu_entries, vocab_g, vocab_p, size=16)
    perm = np.random.default_rng(5).permutation(len(batch))
    shuffled = replace(
        batch, src_ids=batch.src_ids[perm], dec_in_ids=batch.dec_in_ids[perm],
        dec_target_ids=batch.dec_target_ids[perm], target_mask=batch.target_mask[perm],
        words=[batch.words[i] for i in perm],
    )
    results = []
    for b in (batch, shuffled):
        params = cast_params(build_model(config, 3), np.float64)
        opt = OptimizerState.fresh(params, 2e-4)
        loss, _ = train_step(params, config, b, opt, np.random.default_rng(0), TrainOptions())
        results.append((loss, params))
    assert results[0][0] == pytest.approx(results[1][0], rel=1e-12)
    for k in results[0][1]:
        np.testing.assert_allclose(results[0][1][k], results[1][1][k], rtol=1e-9, atol=1e-12)


def _small(vocab_g, vocab_p):
    return ModelConfig(n_enc_blocks=1, n_dec_blocks=1, d_m=16, d_ff=32, heads=2,
                       grapheme_vocab_size=len(vocab_g), phoneme_vocab_size=len(vocab_p))


def test_train_is_deterministic_and_logs(cmu_entries, cmu_vocabs, tmp_path):
    vocab_g, vocab_p = cmu_vocabs
    config = _small(vocab_g, vocab_p)
    runs = []
    for name in ("a", "b"):
        options = TrainOptions(batch_size=32, max_epochs=2, seed=7, out_dir=str(tmp_path / name))
        runs.append(train(config, cmu_entries[:40], cmu_entries[40:60], vocab_g, vocab_p, options))
    (a, b) = runs
    assert a.log[0]["train_loss"] == b.log[0]["train_loss"]
    assert a.log[1]["val_per"] == b.log[1]["val_per"]
    lines = (tmp_path / "a" / "train.log.jsonl").read_text().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert {"epoch", "train_loss", "val_per", "val_wer", "lr", "seconds"} <= rec.keys()
    best = load_checkpoint(tmp_path / "a" / "best.ckpt")
    assert best.best_val_per == min(r["val_per"] for r in a.log)
    assert best.phoneme_tokens == vocab_p.tokens


def test_best_checkpoint_prefers_earliest_on_ties(cmu_entries, cmu_vocabs):
    vocab_g, vocab_p = cmu_vocabs
    config = _small(vocab_g, vocab_p)
    # lr 0 freezes the model, so every epoch scores identically
    options = TrainOptions(lr=0.0, batch_size=64, max_epochs=3, lr_floor=0.0)
    result = train(config, cmu_entries[:20], cmu_entries[20:30], vocab_g, vocab_p, options)
    assert len({(r["val_per"], r["val_wer"]) for r in result.log}) == 1
    assert result.checkpoint.epoch == 1


def test_train_stops_at_lr_floor(cmu_entries, cmu_vocabs):
    vocab_g, vocab_p = cmu_vocabs
    options = TrainOptions(lr=1e-6, batch_size=64, max_epochs=50, patience=1, decay=0.1,
                           lr_floor=1e-7)
    result = train(_small(vocab_g, vocab_p), cmu_entries[:20], cmu_entries[:20], vocab_g,
                   vocab_p, options)
    assert len(result.log) < 50
    # the log holds the lr each epoch ran with; one more decay reaches the floor
    assert result.log[-1]["lr"] * 0.1 <= 1e-7 < result.log[-1]["lr"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_names_the_batch(cmu_entries, cmu_vocabs):
    vocab_g, vocab_p = cmu_vocabs
    config = _small(vocab_g, vocab_p)
    params = build_model(config, 0)
    params["out.w"][:] = np.inf
    with pytest.raises(NumericError, match="epoch 1 batch 0"):
        train(config, cmu_entries[:10], cmu_entries[:10], vocab_g, vocab_p,
              TrainOptions(batch_size=8, max_epochs=1), params=params)
