"""
Matching, gated fusion and mAP
==============================

The detector side in three small pieces: bipartite matching of queries
to panels, the gate that starts as the identity, and COCO-style AP.
"""
import numpy as np
import torch

from panelcap.detection import BoxN, PanelAnnotation, ScoredBox, compute_map, giou, hungarian_match
from panelcap.fusion import FusionInputs, GatedFusion

# matching: 4 queries, 2 panels
cost = np.array([[0.9, 0.2], [0.1, 0.8], [0.5, 0.5], [0.7, 0.6]])
print("matches", hungarian_match(cost))

a, b = BoxN.from_xyxy([0, 0, 0.5, 1]), BoxN.from_xyxy([0.5, 0, 1, 1])
print("giou touching", giou(a, b), " giou self", giou(a, a))

# fusion: with W_bg = 0 and c_bg = 0 the modulation is exactly Q'' -> Q''
torch.manual_seed(0)
fusion = GatedFusion(16, n_heads=2).double()
inp = FusionInputs(torch.randn(5, 16, dtype=torch.float64), torch.randn(1, 16, dtype=torch.float64),
                   torch.randn(7, 16, dtype=torch.float64))
with torch.no_grad():
    gated = fusion(inp)
    fusion.gate_enabled = False
    plain = fusion(inp)
print("identity at init:", torch.equal(gated, plain))

# mAP: one exact box, one box shifted by 20% of its height
gts = [[PanelAnnotation("A", a), PanelAnnotation("B", b)]]
shifted = BoxN.from_xyxy([0.5, 0.2, 1, 1])
preds = [[ScoredBox("A", a, 0.9), ScoredBox("B", shifted, 0.8)]]
m, m50 = compute_map(preds, gts)
print(f"mAP {m:.3f}  mAP@0.5 {m50:.3f}")
