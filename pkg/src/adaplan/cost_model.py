"""Prefill FLOPs accounting.

Single source of truth for every FLOPs number in the package. A multiply-add
counts as 2 FLOPs. For one transformer layer over ``s`` prompt positions:

    attention projections (q, k, v, o)   4 * 2 * s * d_model * d_model
    scores (q k^T) and weighted values   2 * 2 * s * s * d_model
    MLP (up + down, plus gate if gated)  2 * s * d_model * d_mlp * (3 if gated else 2)

Both attention terms split evenly across heads and the MLP term splits evenly
across channel groups, which gives the per-switch costs of the head-level
design. Embedding lookups, norms, softmax, the visual projector, the latency
encoder / scheduler head and the LM head are not counted, so a layer-level
switch costs exactly ``1 / n_layers`` of the base model.

All counts are Python ints. A budget ``l`` maps to the integer allowance
``floor(l * base)`` using the exact binary value of ``l``; plans are compared
against that, so feasibility never depends on float rounding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .model import ExecutionPlan, ModelConfig, SwitchTopology


def attention_head_flops(seq_len: int, d_model: int, d_head: int) -> int:
    proj = 4 * 2 * seq_len * d_model * d_head
    mix = 2 * 2 * seq_len * seq_len * d_head
    return proj + mix


def mlp_group_flops(seq_len: int, d_model: int, width: int, gated: bool = False) -> int:
    return 2 * seq_len * d_model * width * (3 if gated else 2)


def layer_flops(config: "ModelConfig", seq_len: int) -> int:
    h = config.n_heads
    return h * attention_head_flops(seq_len, config.d_model, config.d_model // h) + h * mlp_group_flops(
        seq_len, config.d_model, config.d_mlp // h, config.gated_mlp
    )


def base_prefill_flops(config: "ModelConfig", seq_len: int) -> int:
    if seq_len > config.max_seq_len:
        raise ValueError(f"seq_len {seq_len} exceeds max_seq_len {config.max_seq_len}")
    return config.n_layers * layer_flops(config, seq_len)


def switch_cost(config: "ModelConfig", descriptor, seq_len: int) -> int:
    from .model import SwitchKind

    h = config.n_heads
    if descriptor.kind is SwitchKind.BLOCK:
        return layer_flops(config, seq_len)
    if descriptor.kind is SwitchKind.ATTN_HEAD:
        return attention_head_flops(seq_len, config.d_model, config.d_model // h)
    return mlp_group_flops(seq_len, config.d_model, config.d_mlp // h, config.gated_mlp)


@dataclass(frozen=True)
class CostModel:
    base_prefill_flops: int
    fixed_flops: int
    switch_costs: tuple[int, ...]
    seq_len: int

    def __post_init__(self):
        if any(c <= 0 for c in self.switch_costs) or self.fixed_flops <= 0:
            raise ValueError("all costs must be positive")
        if self.fixed_flops + sum(self.switch_costs) != self.base_prefill_flops:
            raise ValueError("fixed + switch costs must equal base prefill FLOPs")

    @classmethod
    def build(cls, config: "ModelConfig", topology: "SwitchTopology", seq_len: int) -> "CostModel":
        base = base_prefill_flops(config, seq_len)
        costs = tuple(switch_cost(config, d, seq_len) for d in topology.descriptors)
        return cls(base, base - sum(costs), costs, seq_len)

    @classmethod
    def uniform(cls, n_units: int, n_switchable: int, unit_cost: int = 1, seq_len: int = 0) -> "CostModel":
        """``n_units`` equal-cost units of which the last ``n_switchable`` are switches."""
        return cls(n_units * unit_cost, (n_units - n_switchable) * unit_cost, (unit_cost,) * n_switchable, seq_len)

    @property
    def K(self) -> int:
        return len(self.switch_costs)

    @property
    def l_min(self) -> float:
        """Smallest float budget whose allowance covers the always-on FLOPs."""
        l = self.fixed_flops / self.base_prefill_flops
        if Fraction(l) * self.base_prefill_flops < self.fixed_flops:
            l = math.nextafter(l, 2.0)
        return l

    @property
    def is_uniform(self) -> bool:
        return len(set(self.switch_costs)) <= 1

    @property
    def costs_array(self) -> np.ndarray:
        return np.asarray(self.switch_costs, dtype=np.int64)

    def check_budget(self, l: float) -> float:
        l = float(l)
        if not (math.isfinite(l) and Fraction(l) * self.base_prefill_flops >= self.fixed_flops and l <= 1.0):
            raise ValueError(f"budget out of range [l_min, 1]: l={l} (l_min={self.l_min:.6g})")
        return l

    def allowance(self, l: float) -> int:
        """Largest integer FLOPs count a plan may spend under budget ``l``."""
        return math.floor(Fraction(float(l)) * self.base_prefill_flops)

    def switchable_allowance(self, l: float) -> int:
        return self.allowance(l) - self.fixed_flops

    def plan_flops(self, plan: "ExecutionPlan | Sequence[int]") -> int:
        bits = _bits(plan, self.K)
        return self.fixed_flops + sum(c for c, b in zip(self.switch_costs, bits) if b)

    def utilization(self, plan, l: float) -> float:
        return self.plan_flops(plan) / (float(l) * self.base_prefill_flops)

    def is_feasible(self, plan, l: float) -> bool:
        return self.plan_flops(plan) <= self.allowance(l)

    def affordable_count(self, l: float) -> int:
        """Max number of (uniform-cost) switches that fit under ``l``, clamped to [0, K]."""
        if not self.is_uniform:
            raise ValueError("affordable_count requires uniform switch costs")
        if self.K == 0:
            return 0
        k = self.switchable_allowance(l) // self.switch_costs[0]
        return int(min(max(k, 0), self.K))

    def table(self, config: "ModelConfig | None" = None, topology: "SwitchTopology | None" = None) -> dict:
        """JSON-ready accounting table."""
        out = {
            "seq_len": self.seq_len,
            "base_prefill_flops": self.base_prefill_flops,
            "fixed_flops": self.fixed_flops,
            "switchable_flops": sum(self.switch_costs),
            "l_min": self.l_min,
            "switches": [],
        }
        for i, c in enumerate(self.switch_costs):
            row = {"switch_id": i, "flops": c, "fraction_of_base": c / self.base_prefill_flops}
            if topology is not None:
                d = topology.descriptors[i]
                row.update(kind=d.kind.value, layer_index=d.layer_index, group_index=d.group_index)
            out["switches"].append(row)
        if config is not None:
            per_layer = layer_flops(config, self.seq_len)
            out["per_layer"] = [
                {
                    "layer_index": i,
                    "flops": per_layer,
                    "switchable": i >= config.split_layer,
                }
                for i in range(config.n_layers)
            ]
        return out


def _bits(plan, K: int) -> Sequence[int]:
    bits = getattr(plan, "bits", plan)
    if len(bits) != K:
        raise ValueError(f"plan length {len(bits)} != K={K}")
    return bits
