"""Toy vision-conditioned caption decoder and its `[DET]` interface.

Token ids: 0 BOS, 1 EOS, 2 PAD, 3 ``[DET]``, 4 newline, 5 colon, 6..31 labels
A..Z, 32.. words. A structured output ``A: w1 w2\\n[DET]`` is the token string
``A : w1 w2 \\n [DET]`` followed by EOS.
"""
from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
from torch import nn

from . import tensor_core as tc
from .layers import AttentionBlock, FeedForward, Linear, VisionEncoder
from .structured_io import DET_TOKEN, LabeledCaption, StructuredOutput

BOS, EOS, PAD, DET, NEWLINE, COLON = range(6)
SPECIALS = ("<bos>", "<eos>", "<pad>", DET_TOKEN, "\n", ":")
FIRST_LABEL = 6
FIRST_WORD = FIRST_LABEL + 26


class Vocab:
    def __init__(self, words: Iterable[str]):
        words = sorted(set(words))
        for w in words:
            if not w or any(c.isspace() for c in w) or w in SPECIALS:
                raise ValueError(f"invalid vocabulary word {w!r}")
        self.itos: list[str] = list(SPECIALS) + list(string.ascii_uppercase) + words
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary words collide with reserved tokens")

    def __len__(self) -> int:
        return len(self.itos)

    def to_json(self) -> str:
        return json.dumps(self.itos)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        itos = json.loads(text)
        if tuple(itos[:6]) != SPECIALS or "".join(itos[6:32]) != string.ascii_uppercase:
            raise ValueError("vocabulary file has an unexpected reserved-id layout")
        return cls(itos[32:])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.from_json(Path(path).read_text())

    def label_id(self, label: str) -> int:
        return FIRST_LABEL + ord(label) - ord("A")

    def encode(self, s: StructuredOutput) -> list[int]:
        """Structured output -> token ids (no BOS/EOS)."""
        ids: list[int] = []
        for ln in s.lines:
            ids += [self.label_id(ln.label), COLON]
            for w in ln.text.split():
                if w not in self.stoi or self.stoi[w] < FIRST_WORD:
                    raise KeyError(f"word {w!r} not in vocabulary")
                ids.append(self.stoi[w])
            ids.append(NEWLINE)
        if s.det_terminated:
            ids.append(DET)
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        """Token ids -> raw text; stops at EOS, drops BOS/PAD."""
        lines: list[str] = []
        cur: list[str] = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (BOS, PAD):
                continue
            if i == NEWLINE:
                lines.append(" ".join(cur))
                cur = []
            elif i == COLON and cur:
                cur[-1] += ":"
            else:
                cur.append(self.itos[i])
        if cur:
            lines.append(" ".join(cur))
        return "\n".join(lines)


class DecoderBlock(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.self_attn = AttentionBlock(d, n_heads)
        self.cross_attn = AttentionBlock(d, n_heads)
        self.ffn = FeedForward(d, 4 * d)

    def forward(self, x, image_feats, key_mask=None):
        x = self.self_attn(x, x, key_mask, causal=True)
        x = self.cross_attn(x, image_feats)
        return self.ffn(x)


class CaptionModel(nn.Module):
    """Causal decoder over caption tokens with cross-attention to image patches."""

    def __init__(self, vocab_size: int, d: int = 64, n_heads: int = 4, n_layers: int = 2, max_len: int = 96):
        super().__init__()
        self.max_len = max_len
        self.tok_emb = nn.Parameter(torch.randn(vocab_size, d) * 0.1)
        self.pos_emb = nn.Parameter(torch.randn(max_len, d) * 0.02)
        self.blocks = nn.ModuleList(DecoderBlock(d, n_heads) for _ in range(n_layers))
        self.out_proj = Linear(d, vocab_size)

    def forward(self, tokens, image_feats, key_mask=None):
        """``tokens [B, T]`` -> ``(logits [B, T, V], hidden [B, T, d])``."""
        t = tokens.shape[1]
        if t > self.max_len:
            raise tc.ShapeError(f"sequence length {t} exceeds max_len {self.max_len}")
        x = self.tok_emb[tokens]
        x = tc.add(x, self.pos_emb[:t].expand_as(x))
        for blk in self.blocks:
            x = blk(x, image_feats, key_mask)
        return self.out_proj(x), x


def caption_ce_loss(logits, targets, pad_id: int = PAD):
    """Per-sequence mean token CE (PAD masked); batch input returns the mean over sequences."""
    if logits.shape[:-1] != targets.shape:
        raise tc.ShapeError(f"caption_ce_loss: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    if logits.dim() == 2:
        return tc.cross_entropy(logits, targets, ignore_index=pad_id)
    logp = tc.log_softmax(logits, -1)
    picked = logp.gather(-1, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    keep = (targets != pad_id).to(logp.dtype)
    per_seq = -(picked * keep).sum(-1) / keep.sum(-1).clamp(min=1.0)
    return per_seq.mean()


# -- decoding ----------------------------------------------------------------

@dataclass
class Generation:
    tokens: list[int]           # generated ids, EOS included when emitted
    hidden: torch.Tensor        # [len(tokens), d] final-block states
    logprobs: list[float] | None = None


def nucleus_mask(probs, top_p: float):
    """Boolean mask of the smallest descending-probability prefix with mass >= top_p."""
    sorted_p, order = torch.sort(probs, dim=-1, descending=True, stable=True)
    before = torch.cumsum(sorted_p, dim=-1) - sorted_p
    keep_sorted = before < top_p
    keep_sorted[..., 0] = True
    mask = torch.zeros_like(keep_sorted)
    return mask.scatter(-1, order, keep_sorted)


def _prefix_tensor(n: int, prefix: Sequence[int]):
    row = [BOS] + list(prefix)
    return torch.tensor([row] * n, dtype=torch.long)


def _finish(model, image_feats, seqs, n_prefix: int, done_len) -> list[Generation]:
    """Teacher-forced pass over the final sequences to collect hidden states."""
    with torch.no_grad():
        _, hidden = model(seqs, image_feats)
    gens = []
    for b in range(seqs.shape[0]):
        n = int(done_len[b])
        toks = seqs[b, 1 + n_prefix: 1 + n_prefix + n].tolist()
        gens.append(Generation(toks, hidden[b, 1 + n_prefix: 1 + n_prefix + n]))
    return gens


def greedy_decode(model: CaptionModel, image_feats, max_new_tokens: int, prefix: Sequence[int] = ()) -> list[Generation]:
    """Batched argmax decoding. ``prefix`` tokens are forced after BOS (exemplar lines)."""
    b = image_feats.shape[0]
    max_new_tokens = min(max_new_tokens, model.max_len - 1 - len(prefix))
    seqs = _prefix_tensor(b, prefix)
    lengths = torch.full((b,), max(max_new_tokens, 0), dtype=torch.long)
    finished = torch.zeros(b, dtype=torch.bool)
    with torch.no_grad():
        for step in range(max(max_new_tokens, 0)):
            logits, _ = model(seqs, image_feats)
            nxt = logits[:, -1].argmax(-1)
            nxt = torch.where(finished, torch.full_like(nxt, PAD), nxt)
            seqs = torch.cat([seqs, nxt[:, None]], dim=1)
            just = (~finished) & (nxt == EOS)
            lengths[just] = step + 1
            finished |= just
            if bool(finished.all()):
                break
    if max_new_tokens <= 0:
        return [Generation([], image_feats.new_zeros(0, model.out_proj.weight.shape[0])) for _ in range(b)]
    return _finish(model, image_feats, seqs, len(prefix), lengths)


def sample_decode(model: CaptionModel, image_feats, top_p: float = 0.8, temperature: float = 0.7,
                  seed: int | torch.Generator = 0, max_new_tokens: int = 95,
                  prefix: Sequence[int] = ()) -> list[Generation]:
    """Batched nucleus sampling; records log p of each sampled token under the
    tempered, renormalised nucleus distribution."""
    if not (0.0 < top_p <= 1.0):
        raise ValueError(f"top_p must be in (0, 1], got {top_p}")
    if not temperature > 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    b = image_feats.shape[0]
    max_new_tokens = max(min(max_new_tokens, model.max_len - 1 - len(prefix)), 0)
    seqs = _prefix_tensor(b, prefix)
    lengths = torch.full((b,), max_new_tokens, dtype=torch.long)
    finished = torch.zeros(b, dtype=torch.bool)
    logps = [[] for _ in range(b)]
    with torch.no_grad():
        for step in range(max_new_tokens):
            logits, _ = model(seqs, image_feats)
            probs = torch.softmax(logits[:, -1].double() / temperature, -1)
            keep = nucleus_mask(probs, top_p)
            probs = torch.where(keep, probs, torch.zeros_like(probs))
            probs = probs / probs.sum(-1, keepdim=True)
            nxt = torch.multinomial(probs, 1, generator=gen).squeeze(1)
            for i in range(b):
                if not finished[i]:
                    logps[i].append(float(torch.log(probs[i, nxt[i]])))
            nxt = torch.where(finished, torch.full_like(nxt, PAD), nxt)
            seqs = torch.cat([seqs, nxt[:, None]], dim=1)
            just = (~finished) & (nxt == EOS)
            lengths[just] = step + 1
            finished |= just
            if bool(finished.all()):
                break
    if max_new_tokens == 0:
        return [Generation([], image_feats.new_zeros(0, model.out_proj.weight.shape[0]), []) for _ in range(b)]
    gens = _finish(model, image_feats, seqs, len(prefix), lengths)
    for g, lp in zip(gens, logps):
        g.logprobs = lp
    return gens


def sequence_logprob(model: CaptionModel, image_feats, tokens, top_p: float, temperature: float, prefix=()):
    """Differentiable sum of per-token log-probs of ``tokens`` (list of id lists)
    under the same tempered nucleus distribution ``sample_decode`` draws from."""
    b = len(tokens)
    n_pre = len(prefix)
    t = max((len(x) for x in tokens), default=0)
    if t == 0:
        return image_feats.new_zeros(b)
    seqs = torch.full((b, 1 + n_pre + t), PAD, dtype=torch.long)
    tgt_mask = torch.zeros(b, t, dtype=torch.bool)
    for i, x in enumerate(tokens):
        seqs[i, 0] = BOS
        seqs[i, 1:1 + n_pre] = torch.tensor(list(prefix), dtype=torch.long)
        seqs[i, 1 + n_pre:1 + n_pre + len(x)] = torch.tensor(x, dtype=torch.long)
        tgt_mask[i, :len(x)] = True
    logits, _ = model(seqs[:, :-1], image_feats)
    z = logits[:, n_pre:] / temperature
    with torch.no_grad():
        keep = nucleus_mask(torch.softmax(logits[:, n_pre:].double() / temperature, -1), top_p)
    z = z.masked_fill(~keep, -1e9)
    logp = tc.log_softmax(z, -1)
    tgt = seqs[:, 1 + n_pre:]
    picked = logp.gather(-1, tgt.unsqueeze(-1)).squeeze(-1)
    return (picked * tgt_mask.to(picked.dtype)).sum(-1)


# -- interface to the detector ------------------------------------------------

@dataclass
class Interface:
    h_det: torch.Tensor      # [1, d]
    h_cap: torch.Tensor      # [N_t, d]
    det_found: bool


def extract_interface(tokens: Sequence[int], hidden) -> Interface:
    """``h_det`` = state at the first ``[DET]``; ``H_cap`` = label/word states before it."""
    tokens = [int(t) for t in tokens]
    d = hidden.shape[-1]
    if DET in tokens:
        k = tokens.index(DET)
        h_det, found = hidden[k:k + 1], True
    else:
        k = tokens.index(EOS) if EOS in tokens else len(tokens)
        h_det, found = hidden.new_zeros(1, d), False
    keep = [i for i in range(k) if tokens[i] >= FIRST_LABEL]
    h_cap = hidden[keep] if keep else hidden.new_zeros(0, d)
    return Interface(h_det, h_cap, found)


def batch_interface(interfaces: Sequence[Interface]):
    """Stack per-figure interfaces into ``h_det [B,1,d]``, ``H_cap [B,N,d]``, ``mask [B,N]``."""
    d = interfaces[0].h_det.shape[-1]
    n = max((it.h_cap.shape[0] for it in interfaces), default=0)
    h_det = torch.stack([it.h_det for it in interfaces])
    rows, mask = [], torch.zeros(len(interfaces), n, dtype=torch.bool)
    for i, it in enumerate(interfaces):
        m = it.h_cap.shape[0]
        mask[i, :m] = True
        pad = it.h_cap.new_zeros(n - m, d)
        rows.append(torch.cat([it.h_cap, pad], 0))
    h_cap = torch.stack(rows) if rows else h_det.new_zeros(0, n, d)
    return h_det, h_cap, mask


def targets_for(vocab: Vocab, outputs: Sequence[StructuredOutput], max_len: int):
    """Teacher-forcing batch: inputs ``[BOS, y...]`` and targets ``[y..., EOS]`` padded with PAD."""
    seqs = [vocab.encode(s) + [EOS] for s in outputs]
    t = max(len(s) for s in seqs)
    if t > max_len:
        raise ValueError(f"caption sequence of {t} tokens exceeds max_len {max_len}")
    inp = torch.full((len(seqs), t), PAD, dtype=torch.long)
    tgt = torch.full((len(seqs), t), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        inp[i, 0] = BOS
        inp[i, 1:len(s)] = torch.tensor(s[:-1], dtype=torch.long)
        tgt[i, :len(s)] = torch.tensor(s, dtype=torch.long)
    return inp, tgt


__all__ = [
    "BOS", "EOS", "PAD", "DET", "NEWLINE", "COLON", "Vocab", "CaptionModel", "VisionEncoder",
    "caption_ce_loss", "greedy_decode", "sample_decode", "sequence_logprob", "extract_interface",
    "batch_interface", "targets_for", "nucleus_mask", "Generation", "Interface", "LabeledCaption",
]
