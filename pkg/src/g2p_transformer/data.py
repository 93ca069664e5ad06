"""Lexicon parsing, vocabularies, sequence encoding and batching."""

import re
from dataclasses import dataclass, field

import numpy as np

PAD, START, END = "<PAD>", "<START>", "<END>"
SPECIALS = (PAD, START, END)
PAD_ID, START_ID, END_ID = 0, 1, 2
MAX_LEN = 24

CMU_GRAPHEMES = frozenset("ABCDEFGHIJKLMNOPQRSTUVWXYZ'")
CMU_PHONEMES = frozenset(
    "AA AE AH AO AW AY B CH D DH EH ER EY F G HH IH IY JH K L M N NG OW OY P R S "
    "SH T TH UH UW V W Y Z ZH".split()
)
NETTALK_GRAPHEMES = frozenset("abcdefghijklmnopqrstuvwxyz")
NETTALK_SILENT = "-"

_VARIANT = re.compile(r"^(.+?)\((\d+)\)$")


class DataError(ValueError):
    pass


class LengthError(DataError):
    pass


class OutOfVocabularyError(DataError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


@dataclass
class LexiconEntry:
    word: str
    pronunciations: list

    def __post_init__(self):
        if not self.word:
            raise DataError("empty word")
        if not self.pronunciations or any(len(p) == 0 for p in self.pronunciations):
            raise DataError(f"{self.word}: empty pronunciation")


@dataclass
class ParseReport:
    warnings: list = field(default_factory=list)
    rejected: list = field(default_factory=list)

    def warn(self, lineno, msg):
        self.warnings.append((lineno, msg))

    def reject(self, lineno, word, reason):
        self.rejected.append((lineno, word, reason))


def _merge(order, prons, word, pron):
    if word not in prons:
        order.append(word)
        prons[word] = []
    if pron not in prons[word]:
        prons[word].append(pron)


def parse_cmudict(text, report=None, phonemes=CMU_PHONEMES):
    """Parse CMUDict-format text into entries, merging ``WORD(n)`` variants.

    Stress digits are stripped. Words are upper-cased; words with characters
    outside ``A-Z`` and the apostrophe are rejected. Problems are recorded
    on ``report`` when one is given.
    """
    report = report if report is not None else ParseReport()
    order, prons = [], {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or raw.startswith(";;;"):
            continue
        parts = line.split()
        if len(parts) < 2:
            report.warn(lineno, f"malformed line: {raw!r}")
            continue
        word = parts[0].upper()
        m = _VARIANT.match(word)
        if m:
            word = m.group(1)
        bad = sorted(set(word) - CMU_GRAPHEMES)
        if bad:
            report.reject(lineno, word, f"unsupported graphemes {''.join(bad)!r}")
            continue
        pron = tuple(p.rstrip("012") for p in parts[1:])
        unknown = sorted(set(pron) - phonemes) if phonemes is not None else []
        if unknown:
            report.reject(lineno, word, f"unknown phonemes {' '.join(unknown)}")
            continue
        _merge(order, prons, word, pron)
    return [LexiconEntry(w, [list(p) for p in prons[w]]) for w in order]


def parse_nettalk(text, report=None):
    """Parse NetTalk-format text: ``word phonemes stress [...]`` per line.

    The phoneme string is letter-aligned with the word; ``-`` marks a silent
    letter and is dropped. Each remaining character is one phoneme token.
    """
    report = report if report is not None else ParseReport()
    order, prons = [], {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        parts = raw.split()
        if not parts or raw.startswith(("#", ";")):
            continue
        if len(parts) < 2:
            report.warn(lineno, f"malformed line: {raw!r}")
            continue
        word, aligned = parts[0], parts[1]
        if set(word) - NETTALK_GRAPHEMES:
            report.reject(lineno, word, "word is not lowercase a-z")
            continue
        if len(word) != len(aligned):
            report.reject(lineno, word, f"{len(word)} letters but {len(aligned)} phoneme slots")
            continue
        pron = tuple(ch for ch in aligned if ch != NETTALK_SILENT)
        if not pron:
            report.reject(lineno, word, "pronunciation is all silent")
            continue
        _merge(order, prons, word, pron)
    return [LexiconEntry(w, [list(p) for p in prons[w]]) for w in order]


class Vocabulary:
    """Token <-> id map with ``<PAD>``, ``<START>``, ``<END>`` at ids 0, 1, 2."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:3]) != SPECIALS:
            raise DataError("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, sequences):
        content = sorted({tok for seq in sequences for tok in seq} - set(SPECIALS))
        return cls(list(SPECIALS) + content)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __repr__(self):
        return f"Vocabulary({len(self)} tokens)"

    def id(self, token):
        try:
            return self.index[token]
        except KeyError:
            raise OutOfVocabularyError(f"token {token!r} not in vocabulary") from None

    def encode(self, tokens, pad_to=None):
        return encode_sequence(tokens, self, pad_to)

    def decode(self, ids):
        """Map ids back to content tokens, stopping at ``<END>``."""
        out = []
        for i in ids:
            i = int(i)
            if i == END_ID:
                break
            if i in (PAD_ID, START_ID):
                continue
            out.append(self.tokens[i])
        return out


def build_vocabularies(entries):
    graphemes = Vocabulary.build(list(e.word) for e in entries)
    phonemes = Vocabulary.build(p for e in entries for p in e.pronunciations)
    return graphemes, phonemes


def encode_sequence(tokens, vocab, pad_to=None):
    tokens = list(tokens)
    missing = [t for t in tokens if t not in vocab]
    if missing:
        raise OutOfVocabularyError(
            f"not in vocabulary: {' '.join(repr(t) for t in dict.fromkeys(missing))}"
        )
    ids = [START_ID] + [vocab.index[t] for t in tokens] + [END_ID]
    if pad_to is not None:
        if len(ids) > pad_to:
            raise LengthError(f"sequence of {len(tokens)} tokens does not fit in {pad_to}")
        ids += [PAD_ID] * (pad_to - len(ids))
    return ids


def filter_by_length(entries, max_len=MAX_LEN):
    """Split entries into those that fit ``max_len`` (with specials) and the rest."""
    kept, dropped = [], []
    for e in entries:
        fits = len(e.word) + 2 <= max_len and len(e.pronunciations[0]) + 2 <= max_len
        (kept if fits else dropped).append(e)
    return kept, dropped


@dataclass
class Batch:
    src_ids: np.ndarray
    dec_in_ids: np.ndarray
    dec_target_ids: np.ndarray
    target_mask: np.ndarray
    words: list

    def __len__(self):
        return len(self.words)

    def trimmed(self):
        """Drop trailing columns that are padding in every row."""
        ts = int((self.src_ids != PAD_ID).sum(axis=1).max())
        tt = int(self.target_mask.sum(axis=1).max())
        return Batch(self.src_ids[:, :ts], self.dec_in_ids[:, :tt],
                     self.dec_target_ids[:, :tt], self.target_mask[:, :tt], self.words)


def make_batch(entries, vocab_g, vocab_p, max_len=MAX_LEN):
    src = [encode_sequence(e.word, vocab_g, max_len) for e in entries]
    # first listed pronunciation is the training target
    tgt = [encode_sequence(e.pronunciations[0], vocab_p, max_len) + [PAD_ID] for e in entries]
    tgt = np.array(tgt, dtype=np.int64)
    dec_in = np.where(tgt[:, :-1] == END_ID, PAD_ID, tgt[:, :-1])
    dec_target = tgt[:, 1:]
    return Batch(
        src_ids=np.array(src, dtype=np.int64),
        dec_in_ids=np.ascontiguousarray(dec_in),
        dec_target_ids=np.ascontiguousarray(dec_target),
        target_mask=dec_target != PAD_ID,
        words=[e.word for e in entries],
    )


def make_batches(entries, vocab_g, vocab_p, batch_size, rng, max_len=MAX_LEN):
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(entries))
    return [
        make_batch([entries[i] for i in order[s:s + batch_size]], vocab_g, vocab_p, max_len)
        for s in range(0, len(entries), batch_size)
    ]


def split_dataset(train, test, dev=None, *, seed=0, dev_size=1000):
    """Return ``(train, dev, test)``.

    When ``dev`` is given (CMUDict canonical files) the splits are used as
    they are. Otherwise ``dev_size`` entries are drawn without replacement
    from ``train`` with a seeded generator (NetTalk). Any word shared between
    two splits is an error.
    """
    train = list(train)
    test = list(test)
    if dev is None:
        if dev_size > len(train):
            raise DataError(f"cannot carve {dev_size} dev entries from {len(train)}")
        rng = np.random.Generator(np.random.PCG64(seed))
        picked = set(rng.choice(len(train), size=dev_size, replace=False).tolist())
        dev = [e for i, e in enumerate(train) if i in picked]
        train = [e for i, e in enumerate(train) if i not in picked]
    else:
        dev = list(dev)
    names = {"train": train, "dev": dev, "test": test}
    words = {k: {e.word for e in v} for k, v in names.items()}
    for a, b in (("train", "dev"), ("train", "test"), ("dev", "test")):
        shared = words[a] & words[b]
        if shared:
            sample = ", ".join(sorted(shared)[:5])
            raise DataError(f"{len(shared)} words shared by {a} and {b}: {sample}")
    return train, dev, test


def write_lexicon_tsv(entries, fh):
    for e in entries:
        for pron in e.pronunciations:
            fh.write(f"{e.word}\t{' '.join(pron)}\n")


def read_lexicon(path, kind):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    report = ParseReport()
    if kind == "cmudict":
        entries = parse_cmudict(text, report)
    elif kind == "nettalk":
        entries = parse_nettalk(text, report)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    return entries, report


def read_word_list(path):
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]
