"""Phoneme and word error rates with multi-reference handling."""

import json
from dataclasses import asdict, dataclass, field


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EditOps:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0

    def __add__(self, other):
        return EditOps(self.substitutions + other.substitutions,
                       self.insertions + other.insertions,
                       self.deletions + other.deletions)


def levenshtein(ref, hyp):
    """Unit-cost edit distance from ``ref`` to ``hyp`` and the operations of one
    optimal alignment.

    Deletions are reference tokens missing from ``hyp``; insertions are extra
    tokens in ``hyp``. On traceback ties a substitution is preferred over a
    deletion, and a deletion over an insertion.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        row, prev = d[i], d[i - 1]
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            row[j] = min(prev[j - 1] + cost, prev[j] + 1, row[j - 1] + 1)

    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            if d[i][j] == d[i - 1][j - 1] + cost:
                subs += cost
                i, j = i - 1, j - 1
                continue
        if i > 0 and d[i][j] == d[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return d[n][m], EditOps(subs, ins, dels)


@dataclass
class WordRecord:
    word: str
    prediction: list
    reference: list
    distance: int
    ops: EditOps
    exact: bool


def score_word(word, prediction, references):
    """Pick the reference closest to ``prediction`` (first one on ties)."""
    if not references:
        raise EvaluationError(f"{word!r} has no reference pronunciation")
    best = None
    for ref in references:
        dist, ops = levenshtein(ref, prediction)
        if best is None or dist < best[0]:
            best = (dist, ops, ref)
    exact = any(list(r) == list(prediction) for r in references)
    return WordRecord(word, list(prediction), list(best[2]), best[0], best[1], exact)


def per(predictions, references):
    """Phoneme error rate in percent: summed closest-reference distances over
    the summed lengths of those references."""
    if len(predictions) != len(references):
        raise EvaluationError("predictions and references differ in length")
    errors = length = 0
    for i, (pred, refs) in enumerate(zip(predictions, references)):
        rec = score_word(str(i), pred, refs)
        errors += rec.distance
        length += len(rec.reference)
    return 100.0 * errors / length if length else 0.0


def wer(predictions, references, words=None):
    """Word error rate in percent over unique words.

    With ``words`` given, repeated words count once (their first occurrence).
    """
    if len(predictions) != len(references):
        raise EvaluationError("predictions and references differ in length")
    keys = words if words is not None else range(len(predictions))
    seen = {}
    for key, pred, refs in zip(keys, predictions, references):
        if key not in seen:
            seen[key] = any(list(r) == list(pred) for r in refs)
    if not seen:
        return 0.0
    return 100.0 * sum(not ok for ok in seen.values()) / len(seen)


def error_breakdown(records):
    """Histogram of erroneous words by phoneme-error count plus edit op totals."""
    hist = {"1": 0, "2": 0, "3+": 0}
    ops = EditOps()
    for rec in records:
        ops = ops + rec.ops
        if rec.distance == 1:
            hist["1"] += 1
        elif rec.distance == 2:
            hist["2"] += 1
        elif rec.distance >= 3:
            hist["3+"] += 1
    return hist, ops


@dataclass
class EvalReport:
    per: float
    wer: float
    word_count: int
    phoneme_count: int
    records: list = field(repr=False)
    histogram: dict
    ops: EditOps

    def to_dict(self, include_records=True):
        d = {
            "per": self.per,
            "wer": self.wer,
            "word_count": self.word_count,
            "phoneme_count": self.phoneme_count,
            "histogram": dict(self.histogram),
            "ops": asdict(self.ops),
        }
        if include_records:
            d["records"] = [
                {"word": r.word, "prediction": r.prediction, "reference": r.reference,
                 "distance": r.distance}
                for r in self.records
            ]
        return d

    def to_json(self, **kw):
        return json.dumps(self.to_dict(**kw), indent=2)

    def format_table(self):
        rows = [
            ("PER (%)", f"{self.per:.2f}"),
            ("WER (%)", f"{self.wer:.2f}"),
            ("words", str(self.word_count)),
            ("reference phonemes", str(self.phoneme_count)),
            ("words with 1 error", str(self.histogram["1"])),
            ("words with 2 errors", str(self.histogram["2"])),
            ("words with 3+ errors", str(self.histogram["3+"])),
            ("substitutions", str(self.ops.substitutions)),
            ("insertions", str(self.ops.insertions)),
            ("deletions", str(self.ops.deletions)),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v:>8}" for k, v in rows)

    def write_tsv(self, fh):
        fh.write("word\tprediction\treference\tdistance\n")
        for r in self.records:
            fh.write(f"{r.word}\t{' '.join(r.prediction)}\t{' '.join(r.reference)}\t{r.distance}\n")


def evaluate(words, predictions, references):
    """Full report. Duplicate words are scored once, at first occurrence."""
    if not (len(words) == len(predictions) == len(references)):
        raise EvaluationError("words, predictions and references differ in length")
    records = {}
    for word, pred, refs in zip(words, predictions, references):
        if word not in records:
            records[word] = score_word(word, pred, refs)
    records = list(records.values())
    errors = sum(r.distance for r in records)
    length = sum(len(r.reference) for r in records)
    hist, ops = error_breakdown(records)
    n = len(records)
    return EvalReport(
        per=100.0 * errors / length if length else 0.0,
        wer=100.0 * sum(not r.exact for r in records) / n if n else 0.0,
        word_count=n,
        phoneme_count=length,
        records=records,
        histogram=hist,
        ops=ops,
    )
