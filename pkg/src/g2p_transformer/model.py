"""Encoder-decoder assembly, parameter bookkeeping and checkpoint files."""

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .layers import (
    ATTENTION_KEYS,
    FFN_KEYS,
    LN_KEYS,
    causal_mask,
    decoder_block,
    decoder_block_backward,
    dropout,
    dropout_backward,
    encoder_block,
    encoder_block_backward,
    padding_mask,
    positional_encoding,
)
from .tensor import DEFAULT_DTYPE, PRNG_ALGORITHM, linear, linear_backward, make_rng

# Output head is drawn from the Glorot range scaled by this gain so that the
# untrained model starts close to a uniform distribution over phonemes.
HEAD_INIT_GAIN = 0.5


class VocabularyError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_enc_blocks: int = 4
    n_dec_blocks: int = 4
    d_m: int = 128
    d_ff: int = 512
    heads: int = 4
    dropout: float = 0.1
    max_len: int = 24
    grapheme_vocab_size: int = 30
    phoneme_vocab_size: int = 44
    scale_embeddings: bool = True

    def validate(self):
        for name in ("n_enc_blocks", "n_dec_blocks", "d_m", "d_ff", "heads", "max_len",
                     "grapheme_vocab_size", "phoneme_vocab_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_m % self.heads:
            raise ValueError(f"d_m={self.d_m} is not divisible by heads={self.heads}")
        if self.d_m % 2:
            raise ValueError("d_m must be even for the sinusoidal encoding")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def _attention_shapes(prefix, d):
    shapes = []
    for key in ATTENTION_KEYS:
        shapes.append((prefix + key, (d, d) if key.startswith("w") else (d,)))
    return shapes


def _ffn_shapes(prefix, d, d_ff):
    return [(prefix + "w1", (d, d_ff)), (prefix + "b1", (d_ff,)),
            (prefix + "w2", (d_ff, d)), (prefix + "b2", (d,))]


def _ln_shapes(prefix, d):
    return [(prefix + k, (d,)) for k in LN_KEYS]


def param_shapes(config):
    """Canonical ``[(name, shape), ...]`` ordering of every trainable array."""
    d, d_ff = config.d_m, config.d_ff
    shapes = [("src_embedding", (config.grapheme_vocab_size, d)),
              ("tgt_embedding", (config.phoneme_vocab_size, d))]
    for i in range(config.n_enc_blocks):
        pre = f"enc.{i}."
        shapes += _attention_shapes(pre + "self_attn.", d)
        shapes += _ln_shapes(pre + "ln1.", d)
        shapes += _ffn_shapes(pre + "ffn.", d, d_ff)
        shapes += _ln_shapes(pre + "ln2.", d)
    for i in range(config.n_dec_blocks):
        pre = f"dec.{i}."
        shapes += _attention_shapes(pre + "self_attn.", d)
        shapes += _ln_shapes(pre + "ln1.", d)
        shapes += _attention_shapes(pre + "cross_attn.", d)
        shapes += _ln_shapes(pre + "ln2.", d)
        shapes += _ffn_shapes(pre + "ffn.", d, d_ff)
        shapes += _ln_shapes(pre + "ln3.", d)
    shapes += [("out.w", (d, config.phoneme_vocab_size)), ("out.b", (config.phoneme_vocab_size,))]
    return shapes


def count_params(config):
    d, f = config.d_m, config.d_ff
    attention = 4 * (d * d + d)
    ffn = d * f + f + f * d + d
    norm = 2 * d
    enc_block = attention + ffn + 2 * norm
    dec_block = 2 * attention + ffn + 3 * norm
    embeddings = (config.grapheme_vocab_size + config.phoneme_vocab_size) * d
    head = d * config.phoneme_vocab_size + config.phoneme_vocab_size
    return (embeddings + config.n_enc_blocks * enc_block
            + config.n_dec_blocks * dec_block + head)


def component_counts(config):
    """Parameter totals grouped by top-level component, for reporting."""
    counts = {}
    for name, shape in param_shapes(config):
        parts = name.split(".")
        group = ".".join(parts[:2]) if parts[0] in ("enc", "dec") else parts[0]
        counts[group] = counts.get(group, 0) + math.prod(shape)
    return counts


def build_model(config, seed, dtype=DEFAULT_DTYPE):
    config.validate()
    rng = make_rng(seed)
    params = {}
    for name, shape in param_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            if name == "out.w":
                limit *= HEAD_INIT_GAIN
            arr = rng.uniform(-limit, limit, size=shape)
        params[name] = arr.astype(dtype)
    return params


def cast_params(params, dtype):
    return {k: v.astype(dtype) for k, v in params.items()}


@lru_cache(maxsize=16)
def _pe(max_len, d_m, dtype_name):
    pe = positional_encoding(max_len, d_m, np.dtype(dtype_name))
    pe.setflags(write=False)
    return pe


def _check_ids(ids, vocab_size, what):
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise VocabularyError(f"{what} ids must be a 2-d array, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise VocabularyError(f"{what} id outside vocabulary of size {vocab_size}")
    return ids


def _embed(table, ids, config, rate, train, rng):
    dtype = table.dtype
    scale = dtype.type(math.sqrt(config.d_m)) if config.scale_embeddings else dtype.type(1.0)
    t = ids.shape[1]
    if t > config.max_len:
        raise VocabularyError(f"sequence length {t} exceeds max_len {config.max_len}")
    x = table[ids] * scale + _pe(config.max_len, config.d_m, dtype.name)[:t]
    x, mask = dropout(x, rate, train, rng)
    return x, (ids, scale, mask)


def _embed_backward(dx, table_shape, cache):
    ids, scale, mask = cache
    dx = dropout_backward(dx, mask) * scale
    g = np.zeros(table_shape, dtype=dx.dtype)
    np.add.at(g, ids.reshape(-1), dx.reshape(-1, table_shape[1]))
    return g


def encode(params, config, src_ids, train=False, rng=None):
    """Run the encoder stack. Returns ``(enc_out, src_mask, cache)``."""
    src_ids = _check_ids(src_ids, config.grapheme_vocab_size, "grapheme")
    dtype = params["src_embedding"].dtype
    rate = config.dropout if train else 0.0
    mask = padding_mask(src_ids, dtype=dtype)
    x, emb = _embed(params["src_embedding"], src_ids, config, rate, train, rng)
    blocks = []
    for i in range(config.n_enc_blocks):
        x, c = encoder_block(x, params, f"enc.{i}.", mask, config.heads, rate, train, rng)
        blocks.append(c)
    return x, mask, {"emb": emb, "blocks": blocks}


def decode(params, config, enc_out, src_mask, dec_in_ids, train=False, rng=None):
    """Run the decoder stack and output head. Returns ``(logits, cache)``."""
    dec_in_ids = _check_ids(dec_in_ids, config.phoneme_vocab_size, "phoneme")
    dtype = params["tgt_embedding"].dtype
    rate = config.dropout if train else 0.0
    self_mask = causal_mask(dec_in_ids.shape[1], dtype=dtype)
    y, emb = _embed(params["tgt_embedding"], dec_in_ids, config, rate, train, rng)
    blocks = []
    for i in range(config.n_dec_blocks):
        y, c = decoder_block(y, enc_out, params, f"dec.{i}.", self_mask, src_mask,
                             config.heads, rate, train, rng)
        blocks.append(c)
    logits, _ = linear(y, params["out.w"], params["out.b"])
    return logits, {"emb": emb, "blocks": blocks, "top": y}


def forward(params, config, src_ids, dec_in_ids, train=False, rng=None):
    """Logits of shape (B, T_t, V_p) plus the cache needed by ``backward``."""
    if train and config.dropout > 0 and rng is None:
        raise ValueError("train-mode forward needs an rng")
    enc_out, src_mask, enc_cache = encode(params, config, src_ids, train, rng)
    logits, dec_cache = decode(params, config, enc_out, src_mask, dec_in_ids, train, rng)
    return logits, {"enc": enc_cache, "dec": dec_cache}


def backward(dlogits, params, config, cache):
    grads = {}
    dec, enc = cache["dec"], cache["enc"]
    dy, grads["out.w"], grads["out.b"] = linear_backward(dlogits, dec["top"], params["out.w"])
    denc = None
    for i in reversed(range(config.n_dec_blocks)):
        dy, de = decoder_block_backward(dy, params, f"dec.{i}.", dec["blocks"][i], grads)
        denc = de if denc is None else denc + de
    grads["tgt_embedding"] = _embed_backward(dy, params["tgt_embedding"].shape, dec["emb"])
    dx = denc
    for i in reversed(range(config.n_enc_blocks)):
        dx = encoder_block_backward(dx, params, f"enc.{i}.", enc["blocks"][i], grads)
    grads["src_embedding"] = _embed_backward(dx, params["src_embedding"].shape, enc["emb"])
    return {name: grads[name] for name in params}


# -- checkpoints -------------------------------------------------------------

MAGIC = b"G2PT"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    grapheme_tokens: list
    phoneme_tokens: list
    seed: int = 0
    prng: str = PRNG_ALGORITHM
    epoch: int = 0
    best_val_per: float | None = None
    best_val_wer: float | None = None
    optimizer: dict | None = None  # {"t", "lr", "m": {...}, "v": {...}}
    schedule: dict | None = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt):
    shapes = param_shapes(ckpt.config)
    arrays = [np.asarray(ckpt.params[name], dtype="<f4") for name, _ in shapes]
    meta = {
        "config": ckpt.config.to_dict(),
        "grapheme_tokens": list(ckpt.grapheme_tokens),
        "phoneme_tokens": list(ckpt.phoneme_tokens),
        "seed": ckpt.seed,
        "prng": ckpt.prng,
        "init": {"scheme": "glorot_uniform", "head_gain": HEAD_INIT_GAIN},
        "epoch": ckpt.epoch,
        "best_val_per": ckpt.best_val_per,
        "best_val_wer": ckpt.best_val_wer,
        "schedule": ckpt.schedule,
        "extra": ckpt.extra,
        "optimizer": None,
    }
    if ckpt.optimizer is not None:
        opt = ckpt.optimizer
        meta["optimizer"] = {"t": int(opt["t"]), "lr": float(opt["lr"])}
        arrays += [np.asarray(opt["m"][name], dtype="<f4") for name, _ in shapes]
        arrays += [np.asarray(opt["v"][name], dtype="<f4") for name, _ in shapes]
    blob = b"".join(a.tobytes() for a in arrays)
    meta["blob_nbytes"] = len(blob)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = struct.pack("<I", len(meta_bytes)) + meta_bytes + blob
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise CheckpointTruncatedError(f"{path}: file too short for a header")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {FORMAT_VERSION}"
        )
    (meta_len,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + meta_len + 4:
        raise CheckpointTruncatedError(f"{path}: metadata block is truncated")
    payload, crc_bytes = raw[8:-4], raw[-4:]
    if zlib.crc32(payload) & 0xFFFFFFFF != struct.unpack("<I", crc_bytes)[0]:
        # the CRC can also mismatch because bytes are missing at the end
        try:
            meta = json.loads(raw[12:12 + meta_len].decode("utf-8"))
            expected = 12 + meta_len + meta["blob_nbytes"] + 4
        except (ValueError, KeyError, UnicodeDecodeError):
            expected = None
        if expected is not None and len(raw) < expected:
            raise CheckpointTruncatedError(f"{path}: {len(raw)} bytes, expected {expected}")
        raise CheckpointChecksumError(f"{path}: checksum mismatch")
    meta = json.loads(payload[4:4 + meta_len].decode("utf-8"))
    blob = payload[4 + meta_len:]
    if len(blob) != meta["blob_nbytes"]:
        raise CheckpointTruncatedError(f"{path}: parameter blob has the wrong size")

    config = ModelConfig.from_dict(meta["config"])
    shapes = param_shapes(config)
    offset = 0

    def take():
        nonlocal offset
        out = {}
        for name, shape in shapes:
            n = math.prod(shape)
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
            out[name] = arr.reshape(shape).astype(np.float32)
            offset += 4 * n
        return out

    params = take()
    optimizer = None
    if meta.get("optimizer"):
        optimizer = dict(meta["optimizer"], m=take(), v=take())
    return Checkpoint(
        config=config,
        params=params,
        grapheme_tokens=meta["grapheme_tokens"],
        phoneme_tokens=meta["phoneme_tokens"],
        seed=meta["seed"],
        prng=meta["prng"],
        epoch=meta["epoch"],
        best_val_per=meta["best_val_per"],
        best_val_wer=meta["best_val_wer"],
        optimizer=optimizer,
        schedule=meta["schedule"],
        extra=meta.get("extra") or {},
    )
