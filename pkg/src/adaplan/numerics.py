"""Numeric substrate: kernels, precision control, gradients and a portable RNG.

Tensors are ``torch.Tensor`` on CPU. Training and evaluation run in float32;
float64 is switched on (``precision(torch.float64)``) only for gradient checks.
All randomness used by the library comes from :class:`Rng`, a thin wrapper over
numpy's PCG64 so streams are identical across platforms.
"""
from __future__ import annotations

import contextlib
import math
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor

_DTYPE = torch.float32

# tanh-approximate GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
GELU_COEF = 0.044715
GELU_SCALE = math.sqrt(2.0 / math.pi)

# fill value for masked logits; exp(MASK_VALUE - max) underflows to exactly 0
MASK_VALUE = -1e9


def default_dtype() -> torch.dtype:
    return _DTYPE


@contextlib.contextmanager
def precision(dtype: torch.dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors."""
    global _DTYPE
    prev, prev_torch = _DTYPE, torch.get_default_dtype()
    _DTYPE = dtype
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        _DTYPE = prev
        torch.set_default_dtype(prev_torch)


def tensor(data, dtype: torch.dtype | None = None) -> Tensor:
    return torch.as_tensor(np.asarray(data), dtype=dtype or _DTYPE)


def check_finite(x: Tensor, what: str = "input") -> None:
    if not bool(torch.isfinite(x).all()):
        raise FloatingPointError(f"non-finite {what}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    check_finite(x)
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def _shape_error(op: str, a: Tensor, b: Tensor) -> ValueError:
    return ValueError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise _shape_error("matmul", a, b)
    return torch.matmul(a, b)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    if x.shape[-1] != weight.shape[-1]:
        raise _shape_error("linear", x, weight)
    return F.linear(x, weight, bias)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if x.shape[-1] != gain.shape[-1]:
        raise _shape_error("layer_norm", x, gain)
    return F.layer_norm(x, (x.shape[-1],), gain, bias, eps)


def gelu(x: Tensor) -> Tensor:
    return F.gelu(x, approximate="tanh")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    return F.embedding(ids, table)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean negative log softmax probability of ``target`` over the last axis."""
    target = torch.as_tensor(target, dtype=torch.long)
    if logits.shape[:-1] != target.shape:
        raise _shape_error("cross_entropy", logits, target)
    check_finite(logits, "logits")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1))


def gradients(loss: Tensor, params: Sequence[Tensor]) -> list[Tensor]:
    """dloss/dparam for each parameter; parameters off the graph get zeros."""
    params = list(params)
    wanted = [p for p in params if p.requires_grad]
    grads = torch.autograd.grad(loss, wanted, allow_unused=True) if wanted else ()
    by_id = {id(p): g for p, g in zip(wanted, grads)}
    out = []
    for p in params:
        g = by_id.get(id(p))
        out.append(torch.zeros_like(p) if g is None else g)
    return out


class Rng:
    """Seeded random stream (PCG64). One instance per worker; never shared."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, stream: int) -> "Rng":
        """Independent stream derived from this seed and ``stream``."""
        ss = np.random.SeedSequence([self.seed, int(stream)])
        return Rng(int(ss.generate_state(1, np.uint64)[0]))

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self._gen.uniform(low, high, size)

    def open_uniform(self, size=None):
        """Uniforms in (0, 1]."""
        return 1.0 - self._gen.random(size)

    def normal(self, size=None, scale: float = 1.0):
        return self._gen.normal(0.0, scale, size)

    def gumbel(self, size=None):
        return self._gen.gumbel(0.0, 1.0, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int):
        return self._gen.permutation(n)
