"""Strict dense-tensor primitives on top of torch autograd.

Every primitive checks operand shapes, refuses implicit broadcasting (the only
exception is adding a 1-D bias row), and raises as soon as a forward value is
not finite. Gradients come from torch's reverse-mode tape; ``backward`` only
adds the scalar-loss contract and a name -> grad view.

Checkpoint byte layout (little endian)::

    magic    8 bytes   b"PCAPCKPT"
    version  uint32    1
    count    uint32    number of entries
    entry    uint32 name_len | name (utf-8) | uint32 ndim | uint32 dims[ndim]
             | float32 values[prod(dims)]   (row-major)
"""
from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

Tensor = torch.Tensor

CKPT_MAGIC = b"PCAPCKPT"
CKPT_VERSION = 1
LAYERNORM_EPS = 1e-5


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_CHECK_FINITE = True


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Temporarily switch the non-finite guard (e.g. off inside finite-difference loops)."""
    global _CHECK_FINITE
    prev, _CHECK_FINITE = _CHECK_FINITE, enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


def _finite(out: Tensor, op: str) -> Tensor:
    if not _CHECK_FINITE:
        return out
    # NaN/Inf propagate through a sum; the full scan only confirms (a sum can overflow)
    if out.numel() and not bool(torch.isfinite(out.detach().sum())):
        if not bool(torch.isfinite(out).all()):
            raise NonFiniteError(f"{op}: result contains NaN or Inf")
    return out


def _shape(t) -> tuple:
    return tuple(t.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a[..., n, k]`` and ``b[k, m]`` or ``b[..., k, m]`` with equal leading dims."""
    if a.dim() < 2 or b.dim() < 2:
        raise ShapeError(f"matmul needs matrices, got {_shape(a)} and {_shape(b)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {_shape(a)} @ {_shape(b)}")
    if b.dim() > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {_shape(a)} @ {_shape(b)}")
    return _finite(torch.matmul(a, b), "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a 1-D row added to every row of ``a``."""
    if a.shape != b.shape and not (b.dim() == 1 and a.shape[-1:] == b.shape):
        raise ShapeError(f"add shapes incompatible: {_shape(a)} + {_shape(b)}")
    return _finite(a + b, "add")


def mul(a: Tensor, b: Tensor | float) -> Tensor:
    if isinstance(b, Tensor) and a.shape != b.shape:
        raise ShapeError(f"mul shapes incompatible: {_shape(a)} * {_shape(b)}")
    return _finite(a * b, "mul")


def tanh(a: Tensor) -> Tensor:
    return _finite(torch.tanh(a), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    return _finite(torch.sigmoid(a), "sigmoid")


def relu(a: Tensor) -> Tensor:
    return _finite(torch.relu(a), "relu")


def softmax(a: Tensor, dim: int = -1) -> Tensor:
    return _finite(torch.softmax(a, dim=dim), "softmax")


def log_softmax(a: Tensor, dim: int = -1) -> Tensor:
    return _finite(torch.log_softmax(a, dim=dim), "log_softmax")


def layernorm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalise over the last dim, then scale and shift (biased variance)."""
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm params {_shape(weight)}/{_shape(bias)} do not match {_shape(x)}")
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return _finite((x - mu) / torch.sqrt(var + eps) * weight + bias, "layernorm")


def cross_entropy(logits: Tensor, targets: Tensor, ignore_index: int | None = None) -> Tensor:
    """Mean token cross entropy of ``logits[..., V]`` against integer ``targets[...]``.

    Positions equal to ``ignore_index`` are dropped from both sum and count.
    """
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {_shape(logits)} vs targets {_shape(targets)}")
    logp = log_softmax(logits, dim=-1)
    safe = targets.masked_fill(targets == ignore_index, 0) if ignore_index is not None else targets
    picked = logp.gather(-1, safe.unsqueeze(-1)).squeeze(-1)
    if ignore_index is None:
        return _finite(-picked.mean(), "cross_entropy")
    keep = (targets != ignore_index).to(logp.dtype)
    count = keep.sum()
    if float(count) == 0:
        return logits.sum() * 0.0
    return _finite(-(picked * keep).sum() / count, "cross_entropy")


def backward(loss: Tensor, named_params: Mapping[str, Tensor] | None = None) -> dict[str, Tensor]:
    """Accumulate d(loss)/d(param) into every reachable parameter's ``.grad``.

    Returns the gradients of ``named_params`` (params not reached map to zeros).
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {_shape(loss)}")
    loss.reshape(()).backward()
    if named_params is None:
        return {}
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in named_params.items()
    }


# -- checkpoint format -------------------------------------------------------

def save_checkpoint(path: str | Path, tensors: Mapping[str, Tensor | np.ndarray]) -> None:
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<II", CKPT_VERSION, len(tensors))
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, Tensor) else np.asarray(value)
        arr = np.asarray(arr, dtype="<f4", order="C")  # ascontiguousarray would turn 0-d into 1-d
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a panelcap checkpoint")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(dims)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims).copy()
        off += 4 * size
    return out


def module_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_module_tensors(module: torch.nn.Module, tensors: Mapping[str, np.ndarray], prefix: str = "") -> None:
    state = module.state_dict()
    missing = [k for k in state if prefix + k not in tensors]
    if missing:
        raise KeyError(f"checkpoint lacks {len(missing)} tensors, e.g. {prefix + missing[0]}")
    new_state = {}
    for k, v in state.items():
        arr = tensors[prefix + k]
        if tuple(arr.shape) != tuple(v.shape):
            raise ShapeError(f"{prefix + k}: checkpoint shape {arr.shape} vs model {tuple(v.shape)}")
        new_state[k] = torch.from_numpy(np.array(arr)).to(v.dtype)
    module.load_state_dict(new_state)
