"""Deterministic synthetic compound figures with exact panel boxes and captions.

Each panel shows one glyph class (bars, scatter, heatgrid, curve) in one of
two variants, rendered with a class-specific gray level; the panel caption is
a template keyed by (class, variant), so every caption word is recoverable
from the pixels. The "hard" flavour adds speckle distractors and swaps in
near-synonym templates.

JSONL record (one per line)::

    {"v": 1, "figure_id": str, "image": "images/<id>.png",
     "panels": [{"label": "A", "bbox_xyxy": [x0, y0, x1, y1], "caption": str}, ...]}
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
GENERATOR_VERSION = 1
IMAGE_SIZE = 128
GRID_CHOICES = (2, 3)
MAX_PANELS = 8
PANEL_INSET = 3
BACKGROUND = 0
PANEL_FILL = 40
LABEL_LEVEL = 255
DISTRACTOR_LEVELS = tuple(range(55, 96, 4))

GLYPH_LEVEL = {"bars": 230, "scatter": 190, "heatgrid": 150, "curve": 110}
GLYPHS = tuple(GLYPH_LEVEL)

TEMPLATES = {
    ("bars", 0): "bar chart of gene expression across three samples",
    ("bars", 1): "bar chart of gene expression across six samples",
    ("scatter", 0): "sparse scatter plot of cell clusters in umap",
    ("scatter", 1): "dense scatter plot of cell clusters in umap",
    ("heatgrid", 0): "heatmap of marker gene correlation on coarse grid",
    ("heatgrid", 1): "heatmap of marker gene correlation on fine grid",
    ("curve", 0): "line plot of tumor growth with one curve",
    ("curve", 1): "line plot of tumor growth with two curves",
}

HARD_TEMPLATES = {
    ("bars", 0): "bar graph of gene expression over three samples",
    ("bars", 1): "bar graph of gene expression over six samples",
    ("scatter", 0): "sparse scatter diagram of cell clusters in umap",
    ("scatter", 1): "dense scatter diagram of cell clusters in umap",
    ("heatgrid", 0): "heat map of marker gene correlation on coarse grid",
    ("heatgrid", 1): "heat map of marker gene correlation on fine grid",
    ("curve", 0): "line graph of tumor growth with one curve",
    ("curve", 1): "line graph of tumor growth with two curves",
}

# words that identify a glyph class, used by the desk crop/text aligner
GLYPH_KEYWORDS = {
    "bars": ("bar", "chart", "samples"),
    "scatter": ("scatter", "umap", "clusters"),
    "heatgrid": ("heatmap", "heat", "grid", "correlation"),
    "curve": ("line", "curve", "curves", "growth"),
}


def caption_vocabulary() -> list[str]:
    words = set()
    for t in list(TEMPLATES.values()) + list(HARD_TEMPLATES.values()):
        words.update(t.split())
    return sorted(words)


@dataclass(frozen=True)
class SyntheticFigureSpec:
    rows: int
    cols: int
    glyphs: tuple[tuple[str, int], ...]  # (class, variant) per panel, reading order
    seed: int = 0
    hard: bool = False

    def __post_init__(self):
        object.__setattr__(self, "glyphs", tuple((str(g), int(v)) for g, v in self.glyphs))
        if not (1 <= self.rows <= 3 and 1 <= self.cols <= 3):
            raise ValueError(f"grid {self.rows}x{self.cols} outside 1x1..3x3")
        n = len(self.glyphs)
        if not (1 <= n <= min(MAX_PANELS, self.rows * self.cols)):
            raise ValueError(f"{n} panels do not fit a {self.rows}x{self.cols} grid (max {MAX_PANELS})")
        for g, v in self.glyphs:
            if g not in GLYPH_LEVEL or v not in (0, 1):
                raise ValueError(f"unknown glyph {(g, v)}")

    @property
    def labels(self) -> list[str]:
        return list(string.ascii_uppercase[: len(self.glyphs)])


@dataclass
class DatasetRecord:
    figure_id: str
    image: np.ndarray  # uint8 [H, W]
    panels: list[dict] = field(default_factory=list)
    image_path: str | None = None

    def to_json(self) -> dict:
        return {"v": SCHEMA_VERSION, "figure_id": self.figure_id, "image": self.image_path,
                "panels": self.panels}


def random_spec(rng: np.random.Generator, hard: bool = False) -> SyntheticFigureSpec:
    rows, cols = (int(x) for x in rng.choice(GRID_CHOICES, size=2))
    n = int(rng.integers(1, min(MAX_PANELS, rows * cols) + 1))
    glyphs = tuple((GLYPHS[int(rng.integers(len(GLYPHS)))], int(rng.integers(2))) for _ in range(n))
    return SyntheticFigureSpec(rows, cols, glyphs, seed=int(rng.integers(2**31)), hard=hard)


def cell_edges(n: int, size: int = IMAGE_SIZE) -> list[int]:
    return [int(round(size * i / n)) for i in range(n + 1)]


def panel_rects(spec: SyntheticFigureSpec) -> list[tuple[int, int, int, int]]:
    """Pixel rectangles ``(x0, y0, x1, y1)`` (exclusive ends) in reading order."""
    xs, ys = cell_edges(spec.cols), cell_edges(spec.rows)
    rects = []
    for k in range(len(spec.glyphs)):
        r, c = divmod(k, spec.cols)
        rects.append((xs[c] + PANEL_INSET, ys[r] + PANEL_INSET, xs[c + 1] - PANEL_INSET, ys[r + 1] - PANEL_INSET))
    return rects


def _draw_glyph(area: np.ndarray, glyph: str, variant: int, rng: np.random.Generator) -> None:
    h, w = area.shape
    lvl = GLYPH_LEVEL[glyph]
    if glyph == "bars":
        n = 3 if variant == 0 else 6
        slot = w / n
        for i in range(n):
            bh = int(rng.uniform(0.3, 0.95) * h)
            x0 = int(i * slot + slot * 0.2)
            x1 = max(int((i + 1) * slot - slot * 0.2), x0 + 1)
            area[h - bh:, x0:x1] = lvl
    elif glyph == "scatter":
        n = 8 if variant == 0 else 30
        for _ in range(n):
            y, x = int(rng.integers(0, h - 1)), int(rng.integers(0, w - 1))
            area[y:y + 2, x:x + 2] = lvl
    elif glyph == "heatgrid":
        k = 3 if variant == 0 else 6
        ys, xs = np.linspace(0, h, k + 1).astype(int), np.linspace(0, w, k + 1).astype(int)
        offset = int(rng.integers(2))
        for i in range(k):
            for j in range(k):
                if (i + j + offset) % 2 == 0:
                    area[ys[i]:ys[i + 1], xs[j]:xs[j + 1]] = lvl
    elif glyph == "curve":
        n = 1 if variant == 0 else 2
        x = np.arange(w)
        for _ in range(n):
            freq = rng.uniform(0.5, 1.5) * 2 * np.pi / w
            phase = rng.uniform(0, 2 * np.pi)
            y = (h / 2 + 0.35 * h * np.sin(freq * x + phase)).astype(int)
            for dy in (0, 1):
                area[np.clip(y + dy, 0, h - 1), x] = lvl


def _label_mask(letter: str) -> np.ndarray:
    font = ImageFont.load_default_imagefont()
    im = Image.new("1", (12, 14), 0)
    ImageDraw.Draw(im).text((1, 0), letter, fill=1, font=font)
    return np.array(im, dtype=bool)


_LABEL_CACHE: dict[str, np.ndarray] = {}


def label_mask(letter: str) -> np.ndarray:
    if letter not in _LABEL_CACHE:
        _LABEL_CACHE[letter] = _label_mask(letter)
    return _LABEL_CACHE[letter]


LABEL_OFFSET = (1, 1)  # (dx, dy) from the panel's top-left pixel


def generate_figure(spec: SyntheticFigureSpec, rng: np.random.Generator | None = None,
                    figure_id: str = "fig") -> DatasetRecord:
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    img = np.full((IMAGE_SIZE, IMAGE_SIZE), BACKGROUND, dtype=np.uint8)
    templates = HARD_TEMPLATES if spec.hard else TEMPLATES
    panels = []
    rects = panel_rects(spec)
    if spec.hard:
        speckle = rng.random(img.shape) < 0.04
        img[speckle] = rng.choice(DISTRACTOR_LEVELS, size=int(speckle.sum()))
    for (glyph, variant), label, (x0, y0, x1, y1) in zip(spec.glyphs, spec.labels, rects):
        panel = img[y0:y1, x0:x1]
        if spec.hard:
            keep = np.isin(panel, DISTRACTOR_LEVELS)
            panel[~keep] = PANEL_FILL
        else:
            panel[:] = PANEL_FILL
        _draw_glyph(panel[2:-2, 2:-2], glyph, variant, rng)
        m = label_mask(label)
        dx, dy = LABEL_OFFSET
        sub = panel[dy:dy + m.shape[0], dx:dx + m.shape[1]]
        sub[m[: sub.shape[0], : sub.shape[1]]] = LABEL_LEVEL
        s = float(IMAGE_SIZE)
        panels.append({"label": label, "bbox_xyxy": [x0 / s, y0 / s, x1 / s, y1 / s],
                       "caption": templates[(glyph, variant)]})
    return DatasetRecord(figure_id, img, panels)


# -- dataset files -----------------------------------------------------------

SPLITS = ("train", "val", "test")


def _split_records(split: str, n: int, seed_seq: np.random.SeedSequence, hard: bool, prefix: str):
    for i, child in enumerate(seed_seq.spawn(n)):
        rng = np.random.default_rng(child)
        spec = random_spec(rng, hard)
        yield generate_figure(spec, rng, figure_id=f"{prefix}{split}-{i:05d}")


def make_dataset(out_dir: str | Path, n_train: int, n_val: int, n_test: int, seed: int = 42,
                 hard: bool = False) -> dict:
    """Write ``{train,val,test}.jsonl`` + ``images/`` + ``stats.json`` under ``out_dir``.

    Returns the stats dict ``{split: {"figures": n, "pairs": p}}``.
    """
    sizes = {"train": n_train, "val": n_val, "test": n_test}
    if any(v < 0 for v in sizes.values()):
        raise ValueError(f"split sizes must be >= 0, got {sizes}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    prefix = "hard-" if hard else ""
    stats = {}
    for split, seq in zip(SPLITS, np.random.SeedSequence(seed).spawn(len(SPLITS))):
        pairs = 0
        with open(out / f"{split}.jsonl", "w") as fh:
            for rec in _split_records(split, sizes[split], seq, hard, prefix):
                rel = f"images/{rec.figure_id}.png"
                Image.fromarray(rec.image, mode="L").save(out / rel, optimize=False)
                rec.image_path = rel
                fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
                pairs += len(rec.panels)
        stats[split] = {"figures": sizes[split], "pairs": pairs}
    (out / "stats.json").write_text(json.dumps(
        {"seed": seed, "hard": hard, "generator_version": GENERATOR_VERSION, "splits": stats},
        indent=2, sort_keys=True) + "\n")
    return stats


def format_stats(stats: dict, name: str = "synthetic") -> str:
    lines = [f"{'Dataset':<16}{'Split':<8}{'Figures':>9}{'Pairs':>9}"]
    for split in SPLITS:
        if split in stats:
            s = stats[split]
            lines.append(f"{name:<16}{split.capitalize():<8}{s['figures']:>9}{s['pairs']:>9}")
    return "\n".join(lines)


def read_jsonl(path: str | Path) -> tuple[list[dict], int]:
    """Parse a JSONL file; malformed lines are skipped and counted."""
    rows, bad = [], 0
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError:
                bad += 1
    if bad:
        log.warning("%s: skipped %d malformed lines", path, bad)
    return rows, bad


def load_split(path: str | Path, with_images: bool = True) -> list[DatasetRecord]:
    path = Path(path)
    rows, _ = read_jsonl(path)
    images = _cached_images(path, rows) if with_images else None
    out = []
    for i, r in enumerate(rows):
        img = images[i] if images is not None else np.zeros((0, 0), np.uint8)
        out.append(DatasetRecord(r["figure_id"], img, r["panels"], r.get("image")))
    return out


def _cached_images(path: Path, rows: list[dict]) -> np.ndarray:
    cache_dir = os.environ.get("PANELCAP_CACHE")
    key = hashlib.sha256(path.read_bytes()).hexdigest()[:16]
    cache = Path(cache_dir) / f"{path.stem}-{key}.npy" if cache_dir else None
    if cache is not None and cache.exists():
        return np.load(cache)
    arr = np.stack([np.array(Image.open(path.parent / r["image"]).convert("L")) for r in rows]) if rows \
        else np.zeros((0, IMAGE_SIZE, IMAGE_SIZE), np.uint8)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        np.save(cache, arr)
    return arr


def in_memory_split(n: int, seed: int, hard: bool = False, split: str = "train") -> list[DatasetRecord]:
    """Generate records without touching disk (same content as ``make_dataset``'s split)."""
    idx = SPLITS.index(split)
    seq = np.random.SeedSequence(seed).spawn(len(SPLITS))[idx]
    return list(_split_records(split, n, seq, hard, "hard-" if hard else ""))
