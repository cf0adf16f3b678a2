"""Latency encoder, scheduler head and budget-respecting plan selection.

Every selector here runs the same affordability loop over the switches:

1. the affordable set is every unselected switch whose cost fits the remaining
   budget; stop when it is empty;
2. if the whole affordable set fits at once, select all of it (the outcome no
   longer depends on the draw order, so no randomness is consumed and no
   relaxation is attached);
3. otherwise pick one affordable switch, select it, deduct its cost, repeat.

Step 3 is a categorical draw with probabilities renormalised over the
affordable set (``sample_plan``), a Gumbel-perturbed argmax with a softmax
relaxation for straight-through gradients (``sample_plan_differentiable``),
or the highest logit with ties to the lowest id (``argmax_plan``). With
uniform costs this activates exactly ``affordable_count(l)`` switches, and no
plan ever exceeds the budget.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import numerics as nx
from .cost_model import CostModel
from .model import ExecutionPlan
from .numerics import Tensor

LATENCY_CODE_DIM = 256
SINUSOID_BASE = 1.0e4
# l in [0, 1] is stretched to "positions" 0..1000 before hitting the frequency ladder
SINUSOID_SCALE = 1000.0


def sinusoidal_code(l, dim: int = LATENCY_CODE_DIM) -> Tensor:
    """[sin(p w_0) .. sin(p w_{n-1}), cos(p w_0) .. cos(p w_{n-1})], p = 1000 l, w_i = 10^4^(-i/n)."""
    half = dim // 2
    l = torch.as_tensor(l, dtype=nx.default_dtype())
    freqs = SINUSOID_BASE ** (-torch.arange(half, dtype=nx.default_dtype()) / half)
    angle = (l * SINUSOID_SCALE)[..., None] * freqs
    return torch.cat([torch.sin(angle), torch.cos(angle)], dim=-1)


class LatencyEncoder(nn.Module):
    """Scalar budget -> latency token: sinusoid(256) -> Linear -> GELU -> Linear -> LayerNorm."""

    def __init__(self, d_model: int, seed: int = 1, code_dim: int = LATENCY_CODE_DIM):
        super().__init__()
        rng = nx.Rng(seed)
        self.code_dim = code_dim
        self.w1 = nn.Parameter(nx.tensor(rng.normal((d_model, code_dim), 1 / math.sqrt(code_dim))))
        self.b1 = nn.Parameter(torch.zeros(d_model, dtype=nx.default_dtype()))
        self.w2 = nn.Parameter(nx.tensor(rng.normal((d_model, d_model), 1 / math.sqrt(d_model))))
        self.b2 = nn.Parameter(torch.zeros(d_model, dtype=nx.default_dtype()))
        self.ln_g = nn.Parameter(torch.ones(d_model, dtype=nx.default_dtype()))
        self.ln_b = nn.Parameter(torch.zeros(d_model, dtype=nx.default_dtype()))

    def forward(self, l) -> Tensor:
        code = sinusoidal_code(l, self.code_dim)
        h = nx.gelu(nx.linear(code, self.w1, self.b1))
        return nx.layer_norm(nx.linear(h, self.w2, self.b2), self.ln_g, self.ln_b)


class SchedulerHead(nn.Module):
    """Linear map from the processed latency token to K switch logits (zero-initialised)."""

    def __init__(self, d_model: int, K: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(K, d_model, dtype=nx.default_dtype()))
        self.bias = nn.Parameter(torch.zeros(K, dtype=nx.default_dtype()))

    def forward(self, hidden: Tensor) -> Tensor:
        return nx.linear(hidden, self.weight, self.bias)


def encode_latency(l, encoder: LatencyEncoder, cost_model: CostModel) -> Tensor:
    for v in np.atleast_1d(np.asarray(l, dtype=float)):
        cost_model.check_budget(v)
    return encoder(l)


def scheduler_logits(hidden_latency_token: Tensor, head: SchedulerHead) -> Tensor:
    if hidden_latency_token.shape[-1] != head.weight.shape[1]:
        raise ValueError(
            f"scheduler input dim {hidden_latency_token.shape[-1]} != {head.weight.shape[1]}"
        )
    out = head(hidden_latency_token)
    nx.check_finite(out, "scheduler logits")
    return out


def affordable_count(l: float, cost_model: CostModel) -> int:
    return cost_model.affordable_count(l)


# -- shared selection loop (numpy, vectorised over rows) -------------------------------


def _as_rows(logits) -> np.ndarray:
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().double().numpy()
    arr = np.asarray(logits, dtype=np.float64)
    return arr[None] if arr.ndim == 1 else arr


def _check_rows(rows: np.ndarray) -> None:
    if not np.isfinite(rows).all():
        raise FloatingPointError("non-finite logits")


def _allowances(budgets, n: int, cost_model: CostModel) -> np.ndarray:
    budgets = np.broadcast_to(np.asarray(budgets, dtype=np.float64), (n,))
    uniq, inverse = np.unique(budgets, return_inverse=True)
    table = np.array([cost_model.switchable_allowance(b) for b in uniq], dtype=np.int64)
    return table[inverse.reshape(-1)]


def _select(logits: np.ndarray, remaining: np.ndarray, costs: np.ndarray, choose) -> np.ndarray:
    """Run the affordability loop; ``choose(round, rows, masked_logits)`` picks one index per row."""
    n, K = logits.shape
    selected = np.zeros((n, K), dtype=bool)
    remaining = remaining.copy()
    for r in range(K):
        afford = ~selected & (costs[None, :] <= remaining[:, None])
        active = afford.any(axis=1)
        if not active.any():
            break
        forced = active & ((afford * costs[None, :]).sum(axis=1) <= remaining)
        if forced.any():
            selected[forced] |= afford[forced]
            remaining[forced] -= (afford[forced] * costs[None, :]).sum(axis=1)
        rows = np.nonzero(active & ~forced)[0]
        if rows.size == 0:
            continue
        masked = np.where(afford[rows], logits[rows], -np.inf)
        idx = choose(r, rows, masked)
        selected[rows, idx] = True
        remaining[rows] -= costs[idx]
    return selected


def sample_plans(logits, budgets, cost_model: CostModel, rng: nx.Rng, n: int | None = None) -> np.ndarray:
    """Vectorised ``sample_plan``: returns an (n, K) 0/1 array, one plan per row.

    ``logits`` is (K,) (shared by all rows, then ``n`` is required) or (n, K).
    """
    rows = _as_rows(logits)
    if n is None:
        n = rows.shape[0]
    rows = np.broadcast_to(rows, (n, rows.shape[1]))
    _check_rows(rows)
    K = rows.shape[1]
    # one uniform per potential round, drawn up front so stream use is fixed per call
    u = rng.open_uniform((n, K))

    def draw(r, idx_rows, masked):
        p = np.exp(masked - masked.max(axis=1, keepdims=True))
        c = np.cumsum(p, axis=1)
        thr = u[idx_rows, r] * c[:, -1]
        return (c < thr[:, None]).sum(axis=1)

    sel = _select(rows, _allowances(budgets, n, cost_model), cost_model.costs_array, draw)
    return sel.astype(np.int8)


def sample_plan(logits, l: float, cost_model: CostModel, rng: nx.Rng) -> ExecutionPlan:
    return ExecutionPlan(tuple(sample_plans(logits, l, cost_model, rng, n=1)[0]))


def argmax_plans(logits, budgets, cost_model: CostModel) -> np.ndarray:
    rows = _as_rows(logits)
    _check_rows(rows)
    sel = _select(
        rows,
        _allowances(budgets, rows.shape[0], cost_model),
        cost_model.costs_array,
        lambda r, idx_rows, masked: np.argmax(masked, axis=1),
    )
    return sel.astype(np.int8)


def argmax_plan(logits, l: float, cost_model: CostModel) -> ExecutionPlan:
    """Greedy most-probable plan: highest affordable logit first, ties to lowest id."""
    return ExecutionPlan(tuple(argmax_plans(logits, l, cost_model)[0]))


# -- Gumbel-softmax straight-through sampling ----------------------------------------


@dataclass
class RelaxedPlan:
    hard: Tensor  # (B, K) exact 0/1; (K,) for unbatched logits
    gates: Tensor  # equals hard in the forward pass; soft-weight gradients in the backward pass
    soft: list[Tensor]  # per draw, detached (B, K) relaxed one-hots; zero rows where the draw was skipped
    draws: list[Tensor]  # per draw, (B,) chosen switch id or -1

    def plans(self) -> list[ExecutionPlan]:
        rows = self.hard.detach().reshape(-1, self.hard.shape[-1]).tolist()
        return [ExecutionPlan(tuple(int(b) for b in row)) for row in rows]


def sample_plan_differentiable(
    logits: Tensor,
    budgets,
    cost_model: CostModel,
    tau: float = 1.0,
    rng: nx.Rng | None = None,
    gumbel=None,
    frozen: RelaxedPlan | None = None,
) -> RelaxedPlan:
    """Sequential Gumbel-softmax draws over the affordable set, straight-through.

    Draw r uses noise ``gumbel[:, r, :]``; pass ``gumbel`` (B, K, K) to freeze
    the noise, otherwise it is drawn from ``rng``. Passing ``frozen`` reuses
    its hard choices and detached soft weights, giving the surrogate whose
    gradient the straight-through estimator computes (used by gradient checks).
    """
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    squeeze = logits.dim() == 1
    pi = logits[None] if squeeze else logits
    nx.check_finite(pi, "logits")
    B, K = pi.shape
    if gumbel is None:
        if rng is None:
            raise ValueError("need rng or gumbel noise")
        gumbel = rng.gumbel((B, K, K))
    g = torch.as_tensor(np.asarray(gumbel), dtype=pi.dtype)
    costs = torch.as_tensor(cost_model.costs_array)
    remaining = torch.as_tensor(_allowances(budgets, B, cost_model))
    selected = torch.zeros(B, K, dtype=torch.bool)
    soft_terms: list[Tensor] = []
    draws: list[Tensor] = []
    for r in range(K):
        afford = ~selected & (costs[None, :] <= remaining[:, None])
        active = afford.any(dim=1)
        if not bool(active.any()):
            break
        forced = active & ((afford * costs).sum(dim=1) <= remaining)
        if bool(forced.any()):
            take = afford & forced[:, None]
            selected |= take
            remaining = remaining - (take * costs).sum(dim=1)
        live = active & ~forced
        if not bool(live.any()):
            continue
        mask = afford & live[:, None]
        masked_pi = pi.masked_fill(~mask, nx.MASK_VALUE)
        log_eta = torch.log_softmax(masked_pi, dim=-1)
        scores = ((g[:, r, :] + log_eta) / tau).masked_fill(~mask, nx.MASK_VALUE)
        soft = nx.softmax(scores, axis=-1) * live[:, None]
        if frozen is not None:
            choice = frozen.draws[len(draws)]
        else:
            choice = torch.where(live, torch.argmax(scores.detach(), dim=-1), torch.full_like(remaining, -1))
        onehot = torch.zeros(B, K, dtype=torch.bool)
        rows = torch.nonzero(live).flatten()
        onehot[rows, choice[rows]] = True
        selected |= onehot
        remaining = remaining - (onehot * costs).sum(dim=1)
        soft_terms.append(soft)
        draws.append(choice)
    hard = selected.to(pi.dtype)
    refs = frozen.soft if frozen is not None else [t.detach() for t in soft_terms]
    gates = hard
    for s, s_ref in zip(soft_terms, refs):
        gates = gates + (s - s_ref)
    if squeeze:
        hard, gates = hard[0], gates[0]
    return RelaxedPlan(hard, gates, list(refs), draws)
