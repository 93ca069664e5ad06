"""Greedy autoregressive decoding."""

from dataclasses import dataclass, field

import numpy as np

from .data import END_ID, MAX_LEN, PAD_ID, START_ID, OutOfVocabularyError, encode_sequence
from .model import decode, encode
from .tensor import softmax_rows


@dataclass
class DecodeResult:
    word: str
    phonemes: list = field(default_factory=list)
    terminated_by: str = "END"  # "END" or "max_length"
    probabilities: list = field(default_factory=list)
    error: str | None = None

    @property
    def ok(self):
        return self.error is None


def _decode_group(params, config, words, src, vocab_p, max_len):
    """Decode words whose encoded sources share one length, without padding."""
    enc_out, src_mask, _ = encode(params, config, src)
    n = len(words)
    dec = np.full((n, 1), START_ID, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    ended = np.zeros(n, dtype=bool)
    probs = [[] for _ in range(n)]
    while dec.shape[1] < max_len and not done.all():
        active = np.flatnonzero(~done)
        logits, _ = decode(params, config, enc_out[active], src_mask[active], dec[active])
        p = softmax_rows(logits[:, -1, :].astype(np.float64))
        choice_p = p.copy()
        # never emit padding or a second start token
        choice_p[:, [PAD_ID, START_ID]] = -1.0
        tok = choice_p.argmax(axis=-1)  # first max wins, i.e. lowest id
        step = np.full(n, PAD_ID, dtype=np.int64)
        step[active] = tok
        dec = np.concatenate([dec, step[:, None]], axis=1)
        for row, t, pr in zip(active, tok, p[np.arange(len(active)), tok]):
            probs[row].append(float(pr))
            if t == END_ID:
                done[row] = ended[row] = True
    results = []
    for i, word in enumerate(words):
        seq = dec[i, 1:].tolist()
        content = []
        for t in seq:
            if t in (END_ID, PAD_ID):
                break
            content.append(vocab_p.tokens[t])
        results.append(DecodeResult(
            word=word,
            phonemes=content,
            terminated_by="END" if ended[i] else "max_length",
            probabilities=probs[i],
        ))
    return results


def batch_decode(params, config, words, vocab_g, vocab_p, max_len=MAX_LEN, group_size=256):
    """Greedy-decode many words; results come back in input order.

    Words that cannot be encoded yield a result with ``error`` set instead of
    raising. Words are grouped by length so no source padding is needed.
    """
    results = [None] * len(words)
    groups = {}
    for i, word in enumerate(words):
        try:
            ids = encode_sequence(word, vocab_g)
        except OutOfVocabularyError as exc:
            results[i] = DecodeResult(word=word, error=str(exc))
            continue
        if len(ids) > config.max_len:
            results[i] = DecodeResult(word=word, error=f"word longer than {config.max_len - 2} graphemes")
            continue
        groups.setdefault(len(ids), []).append((i, ids))
    for length in sorted(groups):
        members = groups[length]
        for s in range(0, len(members), group_size):
            chunk = members[s:s + group_size]
            src = np.array([ids for _, ids in chunk], dtype=np.int64)
            decoded = _decode_group(params, config, [words[i] for i, _ in chunk], src,
                                    vocab_p, max_len)
            for (i, _), res in zip(chunk, decoded):
                results[i] = res
    return results


def greedy_decode(params, config, word, vocab_g, vocab_p, max_len=MAX_LEN):
    """Decode one word, raising ``OutOfVocabularyError`` for unknown graphemes."""
    bad = [ch for ch in word if ch not in vocab_g]
    if bad:
        raise OutOfVocabularyError(
            f"{word!r} contains graphemes outside the vocabulary: {''.join(dict.fromkeys(bad))}"
        )
    (result,) = batch_decode(params, config, [word], vocab_g, vocab_p, max_len)
    if result.error:
        raise OutOfVocabularyError(result.error)
    return result
