"""Building blocks shared by the captioner, the fusion module and the detector."""
from __future__ import annotations

import math

import torch
from torch import nn

from . import tensor_core as tc

NEG_INF = -1e9


class Linear(nn.Module):
    """``y = x W + b`` with ``W`` stored as [in, out]."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_in, d_out))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        nn.init.xavier_uniform_(self.weight.T)

    def forward(self, x):
        y = tc.matmul(x, self.weight)
        return tc.add(y, self.bias) if self.bias is not None else y


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return tc.layernorm(x, self.weight, self.bias)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate q/k/v/o projections.

    ``key_mask`` marks valid keys (True = attend). A query row with no valid
    key gets an all-zero output, which also covers an empty key set.
    """

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        if d % n_heads:
            raise ValueError(f"head count {n_heads} must divide model width {d}")
        self.d, self.n_heads = d, n_heads
        self.q_proj = Linear(d, d)
        self.k_proj = Linear(d, d)
        self.v_proj = Linear(d, d)
        self.o_proj = Linear(d, d)

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.n_heads, self.d // self.n_heads).transpose(1, 2)

    def forward(self, query, keys, key_mask=None, causal: bool = False):
        b, n, _ = query.shape
        m = keys.shape[1]
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(keys))
        v = self._split(self.v_proj(keys))
        scores = tc.mul(tc.matmul(q, k.transpose(-1, -2)), 1.0 / math.sqrt(self.d // self.n_heads))
        valid = None
        if key_mask is not None:
            valid = key_mask[:, None, None, :].expand(b, 1, n, m)
        if causal:
            tri = torch.ones(n, m, dtype=torch.bool).tril()[None, None]
            valid = tri if valid is None else valid & tri
        if valid is not None:
            scores = scores.masked_fill(~valid, NEG_INF)
        weights = tc.softmax(scores, dim=-1)
        ctx = tc.matmul(weights, v).transpose(1, 2).reshape(b, n, self.d)
        out = self.o_proj(ctx)
        if m == 0:
            return out * 0.0
        if valid is not None:
            has_key = valid.any(dim=-1).squeeze(1)  # [b, n]
            if not bool(has_key.all()):
                out = out * has_key[..., None].to(out.dtype)
        return out


class AttentionBlock(nn.Module):
    """Post-norm residual attention: ``LN(x + Attn(x, keys))``."""

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.attn = MultiHeadAttention(d, n_heads)
        self.norm = LayerNorm(d)

    def forward(self, x, keys, key_mask=None, causal: bool = False):
        return self.norm(tc.add(x, self.attn(x, keys, key_mask, causal)))


class FeedForward(nn.Module):
    """Post-norm residual two-layer MLP."""

    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.fc1 = Linear(d, hidden)
        self.fc2 = Linear(hidden, d)
        self.norm = LayerNorm(d)

    def forward(self, x):
        return self.norm(tc.add(x, self.fc2(tc.relu(self.fc1(x)))))


class EncoderBlock(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.attn = AttentionBlock(d, n_heads)
        self.ffn = FeedForward(d, 2 * d)

    def forward(self, x):
        return self.ffn(self.attn(x, x))


class VisionEncoder(nn.Module):
    """Grayscale image -> patch tokens: two-layer patch MLP, 2-D positions, then
    ``n_layers`` self-attention blocks over the patch grid.

    Input ``[B, H, W]`` in [0, 1]; output ``[B, (H/p)*(W/p), d]``.
    """

    def __init__(self, d: int, image_size: int = 128, patch: int = 16, n_layers: int = 0, n_heads: int = 4):
        super().__init__()
        if image_size % patch:
            raise ValueError("image size must be a multiple of the patch size")
        self.patch, self.grid = patch, image_size // patch
        self.embed_hidden = Linear(patch * patch, 2 * d)
        self.embed = Linear(2 * d, d)
        self.row_pos = nn.Parameter(torch.randn(self.grid, d) * 0.02)
        self.col_pos = nn.Parameter(torch.randn(self.grid, d) * 0.02)
        self.norm = LayerNorm(d)
        self.blocks = nn.ModuleList(EncoderBlock(d, n_heads) for _ in range(n_layers))

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    def forward(self, images):
        b, h, w = images.shape
        p, g = self.patch, self.grid
        if h != g * p or w != g * p:
            raise tc.ShapeError(f"vision encoder expects {g * p}x{g * p} images, got {h}x{w}")
        patches = images.reshape(b, g, p, g, p).permute(0, 1, 3, 2, 4).reshape(b, g * g, p * p)
        pos = (self.row_pos[:, None, :] + self.col_pos[None, :, :]).reshape(g * g, -1)
        x = self.embed(tc.relu(self.embed_hidden(patches)))
        x = self.norm(tc.add(x, pos.expand_as(x)))
        for blk in self.blocks:
            x = blk(x)
        return x
