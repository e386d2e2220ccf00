import csv
import io
import math

import pytest
from hypothesis import given, settings, strategies as st

from panelcap.eval_protocol import (METRIC_FNS, EvalPair, FigureEvalRecord, aggregate, align_occurrences,
                                    bertscore_proxy, bleu4, evaluate_captions, meteor_lite, rouge_l,
                                    score_figure, tokenize)
from panelcap.structured_io import StructuredOutput

# sentence BLEU of the pair below from nltk 3.9 (method1 smoothing, epsilon 1e-9), computed once
BLEU_CAT_MAT = 0.2540663740773074


def so(*pairs):
    return StructuredOutput.from_pairs(pairs)


def test_tokenize_rules():
    assert tokenize("Well-known, T-cells! (n=3)") == ["well-known", "t-cells", "n", "3"]
    assert tokenize("- dash -- x") == ["dash", "x"]
    assert tokenize("") == []


def test_alignment_hand_walk():
    pairs = align_occurrences([("A", "a1"), ("A", "a2"), ("B", "b1")], so(("A", "p1"), ("B", "q1"), ("B", "q2")))
    assert [(p.label, p.occurrence_index, p.role) for p in pairs] == [
        ("A", 1, "full"), ("A", 2, "ref-only"), ("B", 1, "full"), ("B", 2, "extra")]
    assert pairs[0].reference == "a1" and pairs[0].prediction == "p1"
    assert pairs[3].reference is None and pairs[3].prediction == "q2"


def test_alignment_simple_cases():
    full = align_occurrences([("A", "x"), ("B", "y")], so(("A", "x"), ("B", "y")))
    assert [p.role for p in full] == ["full", "full"]
    extra = align_occurrences([], so(("C", "z")))
    assert [(p.label, p.role) for p in extra] == [("C", "extra")]


def test_eval_pair_validation():
    with pytest.raises(ValueError):
        EvalPair("A", 1)
    with pytest.raises(ValueError):
        EvalPair("A", 0, "x", "y")


labels = st.sampled_from("ABCD")
lines = st.lists(st.tuples(labels, st.sampled_from(["one two three four", "five six"])), max_size=7)


@settings(max_examples=200, deadline=None)
@given(lines, lines)
def test_union_cardinality(gt, pred):
    pairs = align_occurrences(gt, so(*pred))
    n = {l: sum(1 for x, _ in gt if x == l) for l in "ABCD"}
    m = {l: sum(1 for x, _ in pred if x == l) for l in "ABCD"}
    assert len(pairs) == sum(max(n[l], m[l]) for l in "ABCD")


@settings(max_examples=100, deadline=None)
@given(lines, lines, st.tuples(labels, st.sampled_from(["one two three four", "seven"])))
def test_extra_line_never_helps(gt, pred, extra):
    # only lines that land past the label's reference count are extras
    if not gt and not pred or sum(x == extra[0] for x, _ in pred) < sum(x == extra[0] for x, _ in gt):
        return
    base = FigureEvalRecord("f", align_occurrences(gt, so(*pred)))
    more = FigureEvalRecord("f", align_occurrences(gt, so(*pred, extra)))
    for name, fn in METRIC_FNS.items():
        assert score_figure(more, fn) <= score_figure(base, fn) + 1e-12


def test_missing_pair_scores_zero():
    rec = FigureEvalRecord("f", align_occurrences([("A", "a b c d e"), ("B", "f g h i")], so(("A", "a b c d e"))))
    assert score_figure(rec, "bleu4") == pytest.approx(50.0, abs=1e-12)
    assert score_figure(FigureEvalRecord("e", []), bleu4) is None


def test_three_pair_mixed_case():
    gt = [("A", "a b c d"), ("B", "a b c d"), ("C", "w x y z")]
    pred = so(("A", "a b c d"), ("B", "a b e f"), ("D", "w x y z"))
    rec = FigureEvalRecord("f", align_occurrences(gt, pred))
    # pairs: A full (100), B full (50), C ref-only (0), D extra (0)
    assert len(rec.pairs) == 4
    assert score_figure(rec, "bertscore") == pytest.approx((100 + 50 + 0 + 0) / 4, abs=1e-12)


def test_aggregate_is_unweighted():
    assert aggregate([100.0, 0.0]) == 50.0
    assert aggregate([42.0]) == 42.0
    big = FigureEvalRecord("big", [EvalPair("A", k + 1, "a b c d", "a b c d") for k in range(10)])
    small = FigureEvalRecord("small", [EvalPair("A", 1, "a b c d", None)])
    s1, s2 = score_figure(big, "bleu4"), score_figure(small, "bleu4")
    assert aggregate([s1, s2]) == pytest.approx((s1 + s2) / 2, abs=1e-12)
    assert aggregate([s1, s2]) == pytest.approx(50.0, abs=1e-12)  # pair-weighted would give 90.9
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ValueError):
        aggregate([None])
    assert aggregate([None, 10.0]) == 10.0


@pytest.mark.parametrize("name", sorted(METRIC_FNS))
def test_metric_identity_and_empty(name):
    fn = METRIC_FNS[name]
    for s in ("a b c d", "bar chart of gene expression across six samples"):
        assert fn(s, s) == pytest.approx(100.0, abs=1e-9)
    assert fn("", "a b c d") == 0.0
    assert fn("!!", "a b c d") == 0.0


@pytest.mark.parametrize("name", sorted(METRIC_FNS))
@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from("abcdef"), max_size=8), st.lists(st.sampled_from("abcdef"), min_size=1, max_size=8))
def test_metric_range(name, c, r):
    v = METRIC_FNS[name](" ".join(c), " ".join(r))
    assert 0.0 <= v <= 100.0 + 1e-9


def test_bleu_golden_and_brevity():
    assert bleu4("the cat sat on the mat", "the cat is on the mat") == pytest.approx(BLEU_CAT_MAT, abs=1e-6)
    # clipped unigram counts and brevity penalty by hand: 2 tokens vs 6
    short = bleu4("cat sat", "the cat sat on the mat")
    bp = math.exp(1 - 6 / 2)
    expected = 100 * bp * math.exp((math.log(2 / 2) + math.log(1 / 1) + 2 * math.log(1e-9 / 1)) / 4)
    assert short == pytest.approx(expected, rel=1e-9)


def test_rouge_l_hand_value():
    c, r = "a b c d e", "a x b y c z"  # LCS = a b c
    p, rec = 3 / 5, 3 / 6
    expected = 100 * (1 + 1.44) * p * rec / (rec + 1.44 * p)
    assert rouge_l(c, r) == pytest.approx(expected, abs=1e-12)
    assert rouge_l("a b", "c d") == 0.0


def test_meteor_hand_values():
    assert meteor_lite("a b c d", "d c b a") == pytest.approx(50.0, abs=1e-12)  # 4 chunks of 1
    p = r = 3 / 4
    expected = 100 * (10 * p * r / (r + 9 * p)) * (1 - 0.5 * (2 / 3) ** 3)
    assert meteor_lite("a b x d", "a b c d") == pytest.approx(expected, abs=1e-12)
    assert meteor_lite("x y", "a b") == 0.0


def test_bertscore_proxy_half_overlap_and_plugin():
    assert bertscore_proxy("a b c d", "a b e f") == pytest.approx(50.0, abs=1e-12)

    class Const:
        def score(self, c, r):
            return 0.25

    assert bertscore_proxy("a b", "c d", scorer=Const()) == 25.0


def test_evaluate_captions_report():
    gt = {"f1": [("A", "a b c d"), ("B", "e f g h")], "f2": [("A", "a b c d")], "f3": []}
    preds = {"f1": "A: a b c d\nB: e f g h\n[DET]"}
    rep = evaluate_captions(gt, preds)
    assert rep.skipped == 1
    assert [r["figure_id"] for r in rep.per_figure] == ["f1", "f2"]
    assert rep.dataset["bleu4"] == pytest.approx(50.0, abs=1e-9)
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0] == ["figure_id", "n_pairs", "bleu4", "rougeL", "meteor", "bertscore"]
    assert rows[-1][0] == "__dataset__" and float(rows[-1][2]) == pytest.approx(50.0)
    assert set(rep.to_json()["dataset"]) == {"bleu4", "rougeL", "meteor", "bertscore"}


def test_figure_order_does_not_matter():
    gt = {"a": [("A", "a b c d")], "b": [("A", "e f g h"), ("B", "x y z w")]}
    preds = {"a": "A: a b c x", "b": "B: x y z w"}
    r1 = evaluate_captions(gt, preds).dataset
    r2 = evaluate_captions(dict(reversed(list(gt.items()))), preds).dataset
    assert r1 == pytest.approx(r2, abs=1e-12)
