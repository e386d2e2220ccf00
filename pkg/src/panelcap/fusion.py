"""Gated fusion of caption features into detector queries.

Pipeline for object queries ``Q [N_d, d]``, the ``[DET]`` hidden state
``h_det [1, d]`` and caption-token states ``H_cap [N_t, d]``::

    F_txt = H_cap @ W_txt
    Q'    = LN(Q  + Attn(Q,  h_det))
    Q''   = LN(Q' + Attn(Q', F_txt))
    [b, g_raw] = Q'' @ W_bg + c_bg,   g = tanh(g_raw)
    Q'''  = Q'' * (1 + g) + b

``W_bg`` and ``c_bg`` start at zero so the modulation is the identity until
training moves it. Everything accepts an optional leading batch dimension.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from . import tensor_core as tc
from .layers import AttentionBlock


@dataclass
class FusionInputs:
    queries: torch.Tensor       # [N_d, d] or [B, N_d, d]
    h_det: torch.Tensor         # [1, d] or [B, 1, d]
    caption_tokens: torch.Tensor  # [N_t, d] or [B, N_t, d]
    caption_mask: torch.Tensor | None = None  # [B, N_t] bool, True = real token

    def __post_init__(self):
        if self.queries.shape[-2] < 1:
            raise ValueError("need at least one query")
        d = self.queries.shape[-1]
        for name in ("h_det", "caption_tokens"):
            t = getattr(self, name)
            if t.shape[-1] != d:
                raise tc.ShapeError(f"{name} width {t.shape[-1]} != query width {d}")


def project_text(h_cap, w_txt):
    """``F_txt = H_cap W_txt``; zero caption rows give zero output rows."""
    if h_cap.shape[-1] != w_txt.shape[0]:
        raise tc.ShapeError(f"project_text: H_cap {tuple(h_cap.shape)} vs W_txt {tuple(w_txt.shape)}")
    return tc.matmul(h_cap, w_txt)


def gated_modulate(q2, w_bg, c_bg):
    d = q2.shape[-1]
    if w_bg.shape != (d, 2 * d) or c_bg.shape != (2 * d,):
        raise tc.ShapeError(
            f"gated_modulate: Q'' {tuple(q2.shape)}, W_bg {tuple(w_bg.shape)}, c_bg {tuple(c_bg.shape)}"
        )
    bg = tc.add(tc.matmul(q2, w_bg), c_bg)
    b, g_raw = bg[..., :d], bg[..., d:]
    g = tc.tanh(g_raw)
    return tc.add(tc.mul(q2, g + 1.0), b)


class GatedFusion(nn.Module):
    def __init__(self, d: int = 64, n_heads: int = 4):
        super().__init__()
        self.d = d
        self.w_txt = nn.Parameter(torch.empty(d, d))
        nn.init.xavier_uniform_(self.w_txt)
        self.det_attn = AttentionBlock(d, n_heads)
        self.txt_attn = AttentionBlock(d, n_heads)
        self.w_bg = nn.Parameter(torch.zeros(d, 2 * d))
        self.c_bg = nn.Parameter(torch.zeros(2 * d))
        # False reproduces the "no gate" ablation without touching the weights.
        self.gate_enabled = True

    def cross_attend(self, block: AttentionBlock, q, f, mask=None):
        return block(q, f, mask)

    def forward(self, inputs: FusionInputs):
        q, h_det, h_cap, mask = inputs.queries, inputs.h_det, inputs.caption_tokens, inputs.caption_mask
        unbatched = q.dim() == 2
        if unbatched:
            q, h_det, h_cap = q[None], h_det[None], h_cap[None]
            mask = None if mask is None else mask[None]
        f_txt = project_text(h_cap, self.w_txt)
        q1 = self.cross_attend(self.det_attn, q, h_det)
        q2 = self.cross_attend(self.txt_attn, q1, f_txt, mask)
        out = gated_modulate(q2, self.w_bg, self.c_bg) if self.gate_enabled else q2
        return out[0] if unbatched else out


def fuse(inputs: FusionInputs, params: GatedFusion):
    return params(inputs)
