"""Sequence-level rewards for reward-augmented training.

``R = alpha * R_text + beta * R_align`` where both terms average over the
ground-truth labels of a figure. The text term scores each label's first
predicted caption against the reference; the alignment term compares the
ground-truth crop with the predicted caption in a shared embedding space.
Crops always come from ground-truth boxes, so predicted boxes never enter.
"""
from __future__ import annotations

import importlib
import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .datagen import GLYPH_KEYWORDS, GLYPH_LEVEL, GLYPHS
from .detection import BoxN, PanelAnnotation
from .eval_protocol import tokenize, unigram_f1
from .structured_io import StructuredOutput, parse_structured


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = 1.0
    beta: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError(f"reward weights must be >= 0 with a positive sum, got {self}")


class TextScorer(Protocol):
    def score(self, candidate: str, reference: str) -> float: ...


class CropTextAligner(Protocol):
    def embed_image(self, image: np.ndarray) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


class UnigramF1Scorer:
    """F1 of a one-to-one exact unigram matching (multiset overlap)."""

    def score(self, candidate: str, reference: str) -> float:
        return unigram_f1(candidate, reference)


class GlyphAligner:
    """Deterministic stand-in for a CLIP-style crop/text embedding.

    Images map to the one-hot of the glyph class whose gray level is most
    frequent in the crop; text maps to normalised glyph-keyword counts. Either
    side falls back to its own "unknown" axis, orthogonal to every class.
    """

    def __init__(self):
        self.dim = len(GLYPHS) + 2
        self._levels = np.array([GLYPH_LEVEL[g] for g in GLYPHS])
        self._kw = {w: GLYPHS.index(g) for g, words in GLYPH_KEYWORDS.items() for w in words}

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        v = np.zeros(self.dim)
        counts = np.array([(image == lvl).sum() for lvl in self._levels])
        if counts.max() > 0:
            v[int(counts.argmax())] = 1.0
        else:
            v[len(GLYPHS)] = 1.0
        return v

    def embed_text(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        for tok in tokenize(text):
            if tok in self._kw:
                v[self._kw[tok]] += 1.0
        if not v.any():
            v[len(GLYPHS) + 1] = 1.0
        return v / np.linalg.norm(v)


TEXT_SCORERS = {"unigram_f1": UnigramF1Scorer}
ALIGNERS = {"glyph": GlyphAligner}


def _resolve(name: str, registry: dict):
    if name in registry:
        return registry[name]()
    if ":" in name:  # "package.module:factory" plug-in
        mod, attr = name.split(":", 1)
        return getattr(importlib.import_module(mod), attr)()
    raise KeyError(f"unknown plug-in {name!r}; choose from {sorted(registry)} or give module:attr")


def get_text_scorer(name: str = "unigram_f1") -> TextScorer:
    return _resolve(name, TEXT_SCORERS)


def get_aligner(name: str = "glyph") -> CropTextAligner:
    return _resolve(name, ALIGNERS)


def crop(image: np.ndarray, box: BoxN) -> np.ndarray:
    """Pixel sub-rectangle of a normalised box (corners rounded half-up, clamped)."""
    h, w = image.shape[:2]
    x0, y0, x1, y1 = box.xyxy()
    px0, px1 = (min(max(int(math.floor(v * w + 0.5)), 0), w) for v in (x0, x1))
    py0, py1 = (min(max(int(math.floor(v * h + 0.5)), 0), h) for v in (y0, y1))
    if px1 - px0 <= 1 or py1 - py0 <= 1:
        px0, py0 = min(px0, w - 1), min(py0, h - 1)
        return image[py0:py0 + 1, px0:px0 + 1]
    return image[py0:py1, px0:px1]


def _predicted(pred: StructuredOutput) -> dict[str, str]:
    return pred.first_by_label()


def reward_bert(pred: StructuredOutput, gts: Sequence[PanelAnnotation], scorer: TextScorer | None = None) -> float:
    if not gts:
        raise ValueError("reward needs at least one ground-truth panel")
    scorer = scorer or UnigramF1Scorer()
    got = _predicted(pred)
    labels = _gt_labels(gts)
    total = sum(scorer.score(got[l], labels[l].caption) if l in got else 0.0 for l in labels)
    return total / len(labels)


def reward_clip(image: np.ndarray, pred: StructuredOutput, gts: Sequence[PanelAnnotation],
                aligner: CropTextAligner | None = None) -> float:
    if not gts:
        raise ValueError("reward needs at least one ground-truth panel")
    aligner = aligner or GlyphAligner()
    got = _predicted(pred)
    labels = _gt_labels(gts)
    total = 0.0
    for l, ann in labels.items():
        if l not in got:
            continue
        a = aligner.embed_image(crop(image, ann.box))
        b = aligner.embed_text(got[l])
        cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
        total += max(cos, 0.0)
    return total / len(labels)


def combined_reward(image: np.ndarray, pred: StructuredOutput, gts: Sequence[PanelAnnotation],
                    w: RewardWeights = RewardWeights(), scorer: TextScorer | None = None,
                    aligner: CropTextAligner | None = None) -> float:
    r = 0.0
    if w.alpha:
        r += w.alpha * reward_bert(pred, gts, scorer)
    if w.beta:
        r += w.beta * reward_clip(image, pred, gts, aligner)
    return r


def _gt_labels(gts: Sequence[PanelAnnotation]) -> dict[str, PanelAnnotation]:
    """The label set L; a repeated ground-truth label keeps its first panel."""
    out: dict[str, PanelAnnotation] = {}
    for g in gts:
        out.setdefault(g.label, g)
    return out


def reward_for_prediction(image: np.ndarray, prediction: dict, gts: Sequence[PanelAnnotation],
                          w: RewardWeights = RewardWeights(), scorer: TextScorer | None = None,
                          aligner: CropTextAligner | None = None) -> float:
    """Reward of one inference record ``{"raw_output", "detections", ...}``.

    Only the generated text is scored; the predicted detections are accepted
    for convenience and deliberately ignored.
    """
    return combined_reward(image, parse_structured(prediction.get("raw_output", "")), gts, w, scorer, aligner)
