"""
Synthetic compound figures and occurrence-level caption scoring
===============================================================

Generate one figure, read its structured caption, then score a few
imperfect generations the way the evaluator does.
"""
import numpy as np

from panelcap.datagen import SyntheticFigureSpec, generate_figure
from panelcap.eval_protocol import FigureEvalRecord, align_occurrences, score_figure
from panelcap.structured_io import parse_structured

# a 2x2 grid with three panels: bars, a curve and a heat grid
spec = SyntheticFigureSpec(2, 2, (("bars", 0), ("curve", 1), ("heatgrid", 0)), seed=3)
fig = generate_figure(spec)
print(fig.image.shape, fig.image.dtype, np.unique(fig.image)[:8])
for p in fig.panels:
    print(p["label"], [round(v, 3) for v in p["bbox_xyxy"]], p["caption"])

gt = [(p["label"], p["caption"]) for p in fig.panels]

# a perfect generation, one with a dropped panel, one with a duplicated label
outputs = {
    "exact": "\n".join(f"{l}: {c}" for l, c in gt) + "\n[DET]",
    "dropped": f"A: {gt[0][1]}\nB: {gt[1][1]}\n[DET]",
    "duplicated": f"A: {gt[0][1]}\nA: {gt[0][1]}\nB: {gt[1][1]}\nC: {gt[2][1]}\n[DET]",
}
for name, raw in outputs.items():
    pred = parse_structured(raw)
    pairs = align_occurrences(gt, pred)
    rec = FigureEvalRecord(name, pairs)
    roles = [(p.label, p.occurrence_index, p.role) for p in pairs]
    print(f"{name:<11} bleu4 {score_figure(rec, 'bleu4'):6.2f}  {roles}")
# a missing panel costs a whole pair (score 0), and so does an extra line
