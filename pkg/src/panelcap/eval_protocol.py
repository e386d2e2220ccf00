"""Occurrence-level caption evaluation and sentence-level caption metrics.

Ground-truth and predicted lines are paired per label by occurrence index
(k-th with k-th). Unmatched lines on either side become one-sided pairs that
score 0 under every metric. A figure's score is the mean over its pairs and
the dataset score is the unweighted mean over figures.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .structured_io import StructuredOutput, normalize_label, parse_structured

log = logging.getLogger(__name__)

BLEU_EPS = 1e-9
ROUGE_BETA = 1.2
METRICS = ("bleu4", "rougeL", "meteor", "bertscore")

_TOKEN_RE = re.compile(r"[^\W_]+(?:-[^\W_]+)*")


def tokenize(text: str) -> list[str]:
    """Lowercase and keep alphanumeric runs; hyphens survive only inside words."""
    return _TOKEN_RE.findall(text.lower())


# -- metrics ----------------------------------------------------------------

def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate: str, reference: str) -> float:
    c, r = tokenize(candidate), tokenize(reference)
    if not c or not r:
        return 0.0
    log_p = 0.0
    for n in range(1, 5):
        cand = _ngrams(c, n)
        hits = sum((cand & _ngrams(r, n)).values())
        total = max(1, sum(cand.values()))
        log_p += math.log((hits if hits else BLEU_EPS) / total)
    bp = 1.0 if len(c) > len(r) else math.exp(1.0 - len(r) / len(c))
    return 100.0 * bp * math.exp(log_p / 4)


def _lcs(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str, beta: float = ROUGE_BETA) -> float:
    c, r = tokenize(candidate), tokenize(reference)
    if not c or not r:
        return 0.0
    lcs = _lcs(c, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return 100.0 * (1 + beta**2) * p * rec / (rec + beta**2 * p)


def meteor_lite(candidate: str, reference: str) -> float:
    """Exact-match METEOR: greedy alignment, 9:1 recall-weighted mean, chunk penalty.

    A single contiguous chunk carries no fragmentation penalty, so identical
    strings score exactly 100.
    """
    c, r = tokenize(candidate), tokenize(reference)
    if not c or not r:
        return 0.0
    used = [False] * len(r)
    align = []  # (cand_pos, ref_pos)
    for i, tok in enumerate(c):
        for j, ref_tok in enumerate(r):
            if not used[j] and ref_tok == tok:
                used[j] = True
                align.append((i, j))
                break
    m = len(align)
    if m == 0:
        return 0.0
    chunks = 1
    for (i0, j0), (i1, j1) in zip(align, align[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    p, rec = m / len(c), m / len(r)
    fmean = 10 * p * rec / (rec + 9 * p)
    penalty = 0.5 * (chunks / m) ** 3 if chunks > 1 else 0.0
    return 100.0 * fmean * (1 - penalty)


def unigram_f1(candidate: str, reference: str) -> float:
    """F1 of the one-to-one exact token matching, in [0, 1]."""
    c, r = tokenize(candidate), tokenize(reference)
    if not c or not r:
        return 0.0
    m = sum((Counter(c) & Counter(r)).values())
    if m == 0:
        return 0.0
    p, rec = m / len(c), m / len(r)
    return 2 * p * rec / (p + rec)


def bertscore_proxy(candidate: str, reference: str, scorer=None) -> float:
    """100 x F1 from ``scorer`` (any object with ``score(cand, ref)``); unigram F1 by default."""
    if not tokenize(candidate):
        return 0.0
    f1 = unigram_f1(candidate, reference) if scorer is None else scorer.score(candidate, reference)
    return 100.0 * f1


METRIC_FNS: dict[str, Callable[[str, str], float]] = {
    "bleu4": bleu4,
    "rougeL": rouge_l,
    "meteor": meteor_lite,
    "bertscore": bertscore_proxy,
}


# -- occurrence alignment -----------------------------------------------------

@dataclass(frozen=True)
class EvalPair:
    label: str
    occurrence_index: int
    reference: str | None = None
    prediction: str | None = None

    def __post_init__(self):
        if self.reference is None and self.prediction is None:
            raise ValueError("an EvalPair needs a reference or a prediction")
        if self.occurrence_index < 1:
            raise ValueError(f"occurrence_index starts at 1, got {self.occurrence_index}")

    @property
    def role(self) -> str:
        if self.reference is not None and self.prediction is not None:
            return "full"
        return "ref-only" if self.prediction is None else "extra"


@dataclass
class FigureEvalRecord:
    figure_id: str
    pairs: list[EvalPair]
    scores: dict[str, float] = field(default_factory=dict)


def align_occurrences(gt: Sequence[tuple[str, str]], pred: StructuredOutput) -> list[EvalPair]:
    """Pair the k-th ground-truth and k-th predicted caption of every label.

    Labels are listed in order of first appearance (ground truth first, then
    labels only the prediction uses); occurrences ascend within a label.
    """
    refs: dict[str, list[str]] = {}
    for label, caption in gt:
        refs.setdefault(normalize_label(label), []).append(caption)
    preds: dict[str, list[str]] = {}
    for line in pred.lines:
        preds.setdefault(line.label, []).append(line.text)
    order = list(refs) + [l for l in preds if l not in refs]
    pairs = []
    for label in order:
        rs, ps = refs.get(label, []), preds.get(label, [])
        for k in range(max(len(rs), len(ps))):
            pairs.append(EvalPair(label, k + 1,
                                  rs[k] if k < len(rs) else None,
                                  ps[k] if k < len(ps) else None))
    return pairs


def pair_score(pair: EvalPair, metric: Callable[[str, str], float]) -> float:
    if pair.role != "full":
        return 0.0
    return metric(pair.prediction, pair.reference)


def score_figure(record: FigureEvalRecord, metric: Callable[[str, str], float] | str) -> float | None:
    """Mean pair score, or None for a figure with no pairs (skipped downstream)."""
    fn = METRIC_FNS[metric] if isinstance(metric, str) else metric
    if not record.pairs:
        return None
    return sum(pair_score(p, fn) for p in record.pairs) / len(record.pairs)


def aggregate(scores: Iterable[float | None]) -> float:
    """Unweighted mean over figures; ``None`` entries are skipped and counted."""
    vals, skipped = [], 0
    for s in scores:
        if s is None:
            skipped += 1
        else:
            vals.append(s)
    if skipped:
        log.warning("aggregate: skipped %d figure(s) with no pairs", skipped)
    if not vals:
        raise ValueError("aggregate needs at least one scored figure")
    return math.fsum(vals) / len(vals)


# -- reports ------------------------------------------------------------------

@dataclass
class CaptionReport:
    per_figure: list[dict]
    dataset: dict[str, float]
    skipped: int = 0

    def to_json(self) -> dict:
        return {"per_figure": self.per_figure, "dataset": self.dataset, "skipped": self.skipped}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["figure_id", "n_pairs", *METRICS])
        for row in self.per_figure:
            w.writerow([row["figure_id"], row["n_pairs"], *(f"{row[m]:.6f}" for m in METRICS)])
        w.writerow(["__dataset__", sum(r["n_pairs"] for r in self.per_figure),
                    *(f"{self.dataset[m]:.6f}" for m in METRICS)])
        return buf.getvalue()


def evaluate_captions(gt: Mapping[str, Sequence[tuple[str, str]]], predictions: Mapping[str, str],
                      metrics: Mapping[str, Callable[[str, str], float]] | None = None) -> CaptionReport:
    """Score every ground-truth figure; a figure with no prediction counts as an empty output.

    ``gt`` maps figure_id to (label, caption) pairs in reading order and
    ``predictions`` maps figure_id to the raw generated text.
    """
    metrics = dict(METRIC_FNS if metrics is None else metrics)
    rows, skipped = [], 0
    per_metric: dict[str, list[float]] = {m: [] for m in metrics}
    for fid, panels in gt.items():
        if not panels:
            skipped += 1
            continue
        rec = FigureEvalRecord(fid, align_occurrences(panels, parse_structured(predictions.get(fid, ""))))
        for name, fn in metrics.items():
            rec.scores[name] = score_figure(rec, fn)
            per_metric[name].append(rec.scores[name])
        rows.append({"figure_id": fid, "n_pairs": len(rec.pairs), **rec.scores})
    if skipped:
        log.warning("evaluate_captions: %d figure(s) without labelled panels excluded", skipped)
    dataset = {name: aggregate(vals) for name, vals in per_metric.items()}
    return CaptionReport(rows, dataset, skipped)
