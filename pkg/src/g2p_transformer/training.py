"""Teacher-forced training: loss, Adam, plateau schedule and the epoch loop."""

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import MAX_LEN, make_batches
from .evaluation import evaluate
from .inference import batch_decode
from .model import Checkpoint, backward, build_model, forward, save_checkpoint
from .tensor import PRNG_ALGORITHM, NumericError, make_rng, split_rng

log = logging.getLogger(__name__)


class DegenerateBatchError(ValueError):
    pass


def cross_entropy_loss(logits, targets, target_mask):
    """Mean token cross-entropy over masked-in positions and its gradient."""
    if logits.shape[:2] != targets.shape or targets.shape != target_mask.shape:
        raise ValueError(f"shape mismatch: logits {logits.shape}, targets {targets.shape}, "
                         f"mask {target_mask.shape}")
    count = int(target_mask.sum())
    if count == 0:
        raise DegenerateBatchError("batch has no unmasked target positions")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    sum_exp = exp.sum(axis=-1, keepdims=True)
    log_probs = shifted - np.log(sum_exp)
    b, t = np.nonzero(target_mask)
    loss = -float(log_probs[b, t, targets[b, t]].astype(np.float64).sum()) / count
    grad = exp / sum_exp
    grad[b, t, targets[b, t]] -= 1
    grad *= (target_mask[..., None] / logits.dtype.type(count)).astype(logits.dtype)
    return loss, grad


@dataclass
class OptimizerState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 2e-4

    @classmethod
    def fresh(cls, params, lr):
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            lr=lr,
        )


def adam_step(params, grads, state, beta1=0.9, beta2=0.998, eps=1e-8):
    """In-place Adam update with bias correction; returns ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)
    return state


def clip_global_norm(grads, max_norm):
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= g.dtype.type(scale)
    return norm


@dataclass(frozen=True)
class ScheduleState:
    best_per: float = math.inf
    epochs_since_improvement: int = 0
    decay: float = 0.2
    patience: int = 50
    lr_floor: float = 1e-7


def lr_schedule_update(state, epoch_val_per, lr):
    """Plateau rule: returns ``(new_state, new_lr)``."""
    if epoch_val_per < 0:
        raise ValueError("validation PER must be non-negative")
    if epoch_val_per < state.best_per:
        return replace(state, best_per=epoch_val_per, epochs_since_improvement=0), lr
    waited = state.epochs_since_improvement + 1
    if waited >= state.patience:
        return replace(state, epochs_since_improvement=0), max(lr * state.decay, state.lr_floor)
    return replace(state, epochs_since_improvement=waited), lr


@dataclass
class TrainOptions:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.998
    adam_eps: float = 1e-8
    batch_size: int = 128
    max_epochs: int = 1000
    patience: int = 50
    decay: float = 0.2
    lr_floor: float = 1e-7
    clip_norm: float | None = 5.0
    seed: int = 0
    eval_every: int = 1
    max_len: int = MAX_LEN
    target_dev_wer: float | None = None  # stop early once dev WER is at or below this
    out_dir: str | None = None


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list = field(default_factory=list)


def train_step(params, config, batch, opt, rng, options):
    b = batch.trimmed()
    logits, cache = forward(params, config, b.src_ids, b.dec_in_ids, train=True, rng=rng)
    loss, dlogits = cross_entropy_loss(logits, b.dec_target_ids, b.target_mask)
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")
    grads = backward(dlogits, params, config, cache)
    norm = clip_global_norm(grads, options.clip_norm)
    adam_step(params, grads, opt, options.beta1, options.beta2, options.adam_eps)
    return loss, norm


def evaluate_entries(params, config, entries, vocab_g, vocab_p, max_len=MAX_LEN):
    words = [e.word for e in entries]
    results = batch_decode(params, config, words, vocab_g, vocab_p, max_len)
    preds = [r.phonemes for r in results]
    return evaluate(words, preds, [e.pronunciations for e in entries])


def _snapshot(params):
    return {k: v.copy() for k, v in params.items()}


def train(config, train_entries, dev_entries, vocab_g, vocab_p, options=None,
          params=None, on_epoch=None):
    """Train and return the best checkpoint (lowest dev PER, then WER, then
    earliest epoch) together with the per-epoch log records."""
    options = options or TrainOptions()
    config.validate()
    root = make_rng(options.seed)
    init_rng, shuffle_rng, dropout_rng = split_rng(root, 3)
    if params is None:
        params = build_model(config, int(init_rng.integers(2**63)))
    opt = OptimizerState.fresh(params, options.lr)
    sched = ScheduleState(decay=options.decay, patience=options.patience,
                          lr_floor=options.lr_floor)
    best = None
    best_key = None
    records = []
    if options.out_dir:
        os.makedirs(options.out_dir, exist_ok=True)
        log_fh = open(os.path.join(options.out_dir, "train.log.jsonl"), "w")
    else:
        log_fh = None
    try:
        for epoch in range(1, options.max_epochs + 1):
            started = time.perf_counter()
            batches = make_batches(train_entries, vocab_g, vocab_p, options.batch_size,
                                   shuffle_rng, options.max_len)
            losses, weights, clipped = [], [], 0
            for bi, batch in enumerate(batches):
                try:
                    loss, norm = train_step(params, config, batch, opt, dropout_rng, options)
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch} batch {bi}: {exc}") from exc
                losses.append(loss)
                weights.append(int(batch.target_mask.sum()))
                clipped += options.clip_norm is not None and norm > options.clip_norm
            train_loss = float(np.average(losses, weights=weights))
            rec = {"epoch": epoch, "train_loss": train_loss, "lr": opt.lr,
                   "clipped_batches": int(clipped)}
            if epoch % options.eval_every == 0 or epoch == options.max_epochs:
                report = evaluate_entries(params, config, dev_entries, vocab_g, vocab_p,
                                          options.max_len)
                rec["val_per"], rec["val_wer"] = report.per, report.wer
                sched, opt.lr = lr_schedule_update(sched, report.per, opt.lr)
                key = (report.per, report.wer)
                if best_key is None or key < best_key:
                    best_key = key
                    best = Checkpoint(
                        config=config, params=_snapshot(params),
                        grapheme_tokens=vocab_g.tokens, phoneme_tokens=vocab_p.tokens,
                        seed=options.seed, prng=PRNG_ALGORITHM, epoch=epoch,
                        best_val_per=report.per, best_val_wer=report.wer,
                        optimizer={"t": opt.t, "lr": opt.lr, "m": _snapshot(opt.m),
                                   "v": _snapshot(opt.v)},
                        schedule=asdict(sched), extra={"options": asdict(options)},
                    )
                    if options.out_dir:
                        save_checkpoint(os.path.join(options.out_dir, "best.ckpt"), best)
            rec["seconds"] = time.perf_counter() - started
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            log.info("epoch %d loss %.4f per %s wer %s lr %.2e", epoch, train_loss,
                     rec.get("val_per"), rec.get("val_wer"), opt.lr)
            if on_epoch is not None:
                on_epoch(rec)
            if (options.target_dev_wer is not None and "val_wer" in rec
                    and rec["val_wer"] <= options.target_dev_wer):
                break
            if opt.lr <= options.lr_floor:
                break
    finally:
        if log_fh:
            log_fh.close()
    if best is None:
        raise ValueError("training finished without a validation pass")
    return TrainResult(checkpoint=best, log=records)
