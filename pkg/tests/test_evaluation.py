import io
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from g2p_transformer.evaluation import (
    EditOps,
    EvaluationError,
    error_breakdown,
    evaluate,
    levenshtein,
    per,
    score_word,
    wer,
)
from g2p_transformer.selfcheck import brute_force_distance, edit_distance_oracle

GRANDFATHERS_REF = "G R AE N D F AA DH ER Z".split()
GRANDFATHERS_PRED = "G R AE N F AA DH ER Z".split()

seqs = st.lists(st.sampled_from("abcd"), max_size=8)


def test_levenshtein_examples():
    assert levenshtein("abc", "abc") == (0, EditOps())
    assert levenshtein("abc", "") == (3, EditOps(deletions=3))
    assert levenshtein("", "ab") == (2, EditOps(insertions=2))
    assert levenshtein("kitten", "sitting")[0] == 3
    assert levenshtein(GRANDFATHERS_REF, GRANDFATHERS_PRED) == (1, EditOps(deletions=1))


def test_levenshtein_traceback_prefers_substitution():
    # "ab" -> "ba" costs 2: two substitutions beat a deletion plus an insertion
    assert levenshtein("ab", "ba") == (2, EditOps(substitutions=2))


@settings(max_examples=300)
@given(seqs, seqs)
def test_levenshtein_matches_brute_force(a, b):
    dist, ops = levenshtein(a, b)
    oracle = brute_force_distance(a, b, max_depth=4)
    if oracle is not None:
        assert dist == oracle
    else:
        assert dist > 4
    assert ops.substitutions + ops.insertions + ops.deletions == dist
    assert ops.deletions - ops.insertions == len(a) - len(b)


@given(seqs, seqs, seqs)
def test_levenshtein_metric_axioms(a, b, c):
    dab = levenshtein(a, b)[0]
    assert levenshtein(a, a)[0] == 0
    assert dab == levenshtein(b, a)[0]
    assert levenshtein(a, c)[0] <= dab + levenshtein(b, c)[0]
    assert abs(len(a) - len(b)) <= dab <= max(len(a), len(b))
    assert (dab == 0) == (a == b)


def test_edit_distance_oracle_agrees():
    assert edit_distance_oracle(200) == 0


def test_per_examples():
    assert per([GRANDFATHERS_REF], [[GRANDFATHERS_REF]]) == 0.0
    assert per([GRANDFATHERS_PRED], [[GRANDFATHERS_REF]]) == pytest.approx(10.0)
    # R1 at distance 3, R2 (length 4) at distance 1
    r1, r2 = list("axyz"), list("abce")
    assert levenshtein(r1, list("abcd"))[0] == 3
    assert per([list("abcd")], [[r1, r2]]) == pytest.approx(100 * 1 / 4)


def test_per_denominator_uses_chosen_reference():
    pred = list("abc")
    short, long = list("ab"), list("xbcdefgh")
    assert score_word("w", pred, [long, short]).reference == short
    assert per([pred], [[long, short]]) == pytest.approx(100 * 1 / 2)


def test_per_global_sums():
    preds = [list("ab"), list("abcd")]
    refs = [[list("ax")], [list("abcd")]]
    assert per(preds, refs) == pytest.approx(100 * 1 / 6)


def test_per_errors():
    with pytest.raises(EvaluationError):
        per([["a"]], [[]])
    with pytest.raises(EvaluationError):
        per([["a"]], [])


def test_wer_examples():
    refs = [[["a"]], [["b"]], [["c"]], [["d"]]]
    assert wer([["a"], ["b"], ["c"], ["d"]], refs) == 0.0
    assert wer([["a"], ["b"], ["c"], ["x"]], refs) == 25.0
    assert wer([["EY"]], [[["AH"], ["EY"]]]) == 0.0


def test_wer_unique_words():
    preds = [["x"], ["x"], ["b"]]
    refs = [[["a"]], [["a"]], [["b"]]]
    assert wer(preds, refs, words=["A", "A", "B"]) == 50.0
    assert wer(preds, refs) == pytest.approx(200 / 3)


@given(st.lists(st.tuples(seqs, seqs), min_size=1, max_size=10), st.randoms())
def test_metrics_permutation_invariant(pairs, random):
    preds = [p for p, _ in pairs]
    refs = [[r] for _, r in pairs]
    order = list(range(len(pairs)))
    random.shuffle(order)
    assert per([preds[i] for i in order], [refs[i] for i in order]) == pytest.approx(per(preds, refs))
    assert wer([preds[i] for i in order], [refs[i] for i in order]) == pytest.approx(wer(preds, refs))
    exact_failures = sum(p != r[0] for p, r in zip(preds, refs))
    assert wer(preds, refs) == pytest.approx(100 * exact_failures / len(pairs))


def test_breakdown_examples():
    rec = score_word("GRANDFATHERS", GRANDFATHERS_PRED, [GRANDFATHERS_REF])
    hist, ops = error_breakdown([rec])
    assert hist == {"1": 1, "2": 0, "3+": 0}
    assert ops == EditOps(deletions=1)
    ok = score_word("A", ["AH"], [["AH"]])
    assert error_breakdown([ok]) == ({"1": 0, "2": 0, "3+": 0}, EditOps())


def test_breakdown_partition():
    records = [score_word(str(i), list("abcdefg"[:i]), [list("abc")]) for i in range(8)]
    hist, _ = error_breakdown(records)
    assert sum(hist.values()) == sum(r.distance > 0 for r in records)
    assert hist == {"1": 2, "2": 2, "3+": 3}


def test_evaluate_report():
    words = ["GRANDFATHERS", "A", "A", "B"]
    preds = [GRANDFATHERS_PRED, ["EY"], ["EY"], []]
    refs = [[GRANDFATHERS_REF], [["AH"], ["EY"]], [["AH"], ["EY"]], [["B", "IY"]]]
    report = evaluate(words, preds, refs)
    assert report.word_count == 3
    assert report.phoneme_count == 10 + 1 + 2
    assert report.per == pytest.approx(100 * 3 / 13)
    assert report.wer == pytest.approx(200 / 3)
    data = json.loads(report.to_json())
    assert {"per", "wer", "histogram", "ops", "records"} <= data.keys()
    assert data["histogram"] == {"1": 1, "2": 1, "3+": 0}
    buf = io.StringIO()
    report.write_tsv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "word\tprediction\treference\tdistance"
    assert lines[2] == "A\tEY\tEY\t0"
    assert "PER (%)" in report.format_table()
