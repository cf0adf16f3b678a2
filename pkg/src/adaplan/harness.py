"""Budget sweeps, inspection dumps and arm-comparison reports.

Sweep CSV columns (one row per budget)::

    arm, seed, budget, n, accuracy, mean_flops, success_rate, utilization_mean

``accuracy``, ``success_rate`` and ``utilization_mean`` are percentages.
``arm`` is a run label: the arm name, with ``-lam<λ>`` appended for hinge-penalty
runs. Record JSONL: one :class:`EvalRecord` per (sample, budget).
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import numerics as nx
from . import scheduler as sch
from .adaptive import AdaptiveModel
from .data import EOA, TrainingSample, collate
from .model import ExecutionPlan, SwitchKind

DEFAULT_BUDGETS = (0.5, 0.6, 0.65, 0.75, 0.85, 0.95, 1.0)
SWEEP_COLUMNS = ("arm", "seed", "budget", "n", "accuracy", "mean_flops", "success_rate", "utilization_mean")
ARM_ORDER = ("probabilistic", "deterministic", "random", "base")


@dataclass
class EvalRecord:
    sample_id: int
    budget: float
    plan: str
    plan_flops: int
    feasible: bool
    utilization: float
    correct: bool
    answer_ids: list[int]


@dataclass
class BudgetRow:
    budget: float
    n: int
    accuracy: float
    mean_flops: float
    success_rate: float
    utilization_mean: float


@dataclass
class SweepReport:
    arm: str
    seed: int
    budgets: list[float]
    rows: list[BudgetRow]
    config: dict = field(default_factory=dict)

    def row(self, budget: float) -> BudgetRow:
        for r in self.rows:
            if r.budget == budget:
                return r
        raise KeyError(budget)

    def accuracies(self) -> list[float]:
        return [r.accuracy for r in self.rows]

    def to_rows(self) -> list[dict]:
        return [{"arm": self.arm, "seed": self.seed, **asdict(r)} for r in self.rows]

    def to_json(self) -> dict:
        return {"arm": self.arm, "seed": self.seed, "budgets": self.budgets, "rows": [asdict(r) for r in self.rows], "config": self.config}


def select_plans(model: AdaptiveModel, logits: torch.Tensor, budget: float, arm: str, seq_len: int, rng: nx.Rng) -> np.ndarray:
    """(B, K) plans the given arm executes at inference time."""
    cm = model.cost_model(seq_len)
    B = logits.shape[0]
    if arm == "probabilistic":
        return sch.argmax_plans(logits, budget, cm)
    if arm == "random":
        return sch.sample_plans(np.zeros(model.K), budget, cm, rng, n=B)
    if arm == "deterministic":
        # sigmoid > 0.5; nothing enforces the budget
        return (logits > 0).numpy().astype(np.int8)
    if arm == "base":
        return np.ones((B, model.K), dtype=np.int8)
    raise ValueError(f"unknown arm {arm!r}")


@torch.no_grad()
def greedy_answers(model: AdaptiveModel, sequence: torch.Tensor, plans: np.ndarray, max_len: int) -> list[list[int]]:
    """Batched greedy decoding with one fixed plan per row; EOA ends a row and is not emitted."""
    dec = model.decoder
    gates = torch.as_tensor(plans, dtype=sequence.dtype)
    pre = dec.forward_prefill(sequence, gates)
    logits, state = pre.logits[:, -1], pre.kv_state
    B = sequence.shape[0]
    out: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    for step in range(max_len):
        tok = logits.argmax(-1)
        for i, t in enumerate(tok.tolist()):
            if done[i]:
                continue
            if t == EOA:
                done[i] = True
            else:
                out[i].append(t)
        if done.all() or step + 1 == max_len:
            break
        logits, state = dec.decode_step(state, tok, gates)
    return out


@torch.no_grad()
def evaluate(
    model: AdaptiveModel,
    samples: Sequence[TrainingSample],
    budgets: Iterable[float] = DEFAULT_BUDGETS,
    seed: int = 0,
    arm: str = "probabilistic",
    batch_size: int = 250,
    config: dict | None = None,
) -> tuple[SweepReport, list[EvalRecord]]:
    budgets = sorted(float(b) for b in budgets)
    seq_len = model.config.n_visual_tokens + len(samples[0].query) + 1
    cm = model.cost_model(seq_len)
    for b in budgets:
        cm.check_budget(b)
    records: list[EvalRecord] = []
    rows: list[BudgetRow] = []
    for bi, l in enumerate(budgets):
        rng = nx.Rng(seed).child(bi)
        recs: list[EvalRecord] = []
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            batch = collate(chunk)
            seq = model.prompt(batch.features, batch.query, l)
            logits = model.split(seq).logits
            plans = select_plans(model, logits, l, arm, seq_len, rng)
            answers = greedy_answers(model, seq, plans, max_len=len(chunk[0].answer))
            flops = cm.fixed_flops + plans.astype(np.int64) @ cm.costs_array
            allowance = cm.allowance(l)
            for j, s in enumerate(chunk):
                recs.append(
                    EvalRecord(
                        sample_id=start + j,
                        budget=l,
                        plan=str(ExecutionPlan(tuple(int(v) for v in plans[j]))),
                        plan_flops=int(flops[j]),
                        feasible=bool(flops[j] <= allowance),
                        utilization=float(flops[j] / (l * cm.base_prefill_flops)),
                        correct=answers[j] == list(s.answer),
                        answer_ids=answers[j],
                    )
                )
        rows.append(
            BudgetRow(
                budget=l,
                n=len(recs),
                accuracy=100.0 * float(np.mean([r.correct for r in recs])),
                mean_flops=float(np.mean([r.plan_flops for r in recs])),
                success_rate=100.0 * float(np.mean([r.feasible for r in recs])),
                utilization_mean=100.0 * float(np.mean([r.utilization for r in recs])),
            )
        )
        records.extend(recs)
    return SweepReport(arm, seed, budgets, rows, config or {}), records


# -- inspection -------------------------------------------------------------------------


@torch.no_grad()
def inspect(model: AdaptiveModel, sample: TrainingSample, budget: float) -> dict:
    """Plan, scheduler logits and latency-token attention for one sample."""
    seq = model.prompt(sample.features, sample.query, budget)
    state = model.split(seq)
    logits = state.logits[0]
    cm = model.cost_model(seq.shape[1])
    plan = sch.argmax_plan(logits, budget, cm)
    answer = greedy_answers(model, seq, np.array([plan.bits], dtype=np.int8), max_len=len(sample.answer))[0]
    cfg = model.config
    n_vis = cfg.n_visual_tokens
    layer = cfg.split_layer - 1  # last always-on layer, whose output feeds the scheduler
    attn = state.attention[layer][0]  # (H, T)
    per_layer: dict[str, object] = {}
    for d in model.topology.descriptors:
        bit = plan.bits[d.switch_id]
        key = str(d.layer_index)
        if d.kind == SwitchKind.BLOCK:
            per_layer[key] = bit
        else:
            slot = per_layer.setdefault(key, {"heads": [], "mlp_groups": []})
            slot["heads" if d.kind == SwitchKind.ATTN_HEAD else "mlp_groups"].append(bit)
    return {
        "budget": float(budget),
        "plan": list(plan.bits),
        "plan_by_layer": per_layer,
        "scheduler_logits": logits.tolist(),
        "plan_flops": cm.plan_flops(plan),
        "base_prefill_flops": cm.base_prefill_flops,
        "utilization": cm.utilization(plan, budget),
        "answer_ids": answer,
        "gold_ids": list(sample.answer),
        "attention_layer": layer,
        "latency_attention": attn.tolist(),  # per head, over every prompt position
        "latency_attention_visual": attn[:, :n_vis].tolist(),
        "grid": list(sample.grid),
    }


# -- reports -----------------------------------------------------------------------------


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def write_sweep_csv(path, rows: Iterable[dict]) -> None:
    Path(path).write_text(sweep_csv(rows))


def sweep_csv(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r[k]) for k in SWEEP_COLUMNS})
    return buf.getvalue()


def write_records(path, records: Iterable[EvalRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SWEEP_COLUMNS:
            raise ValueError(f"{path}: schema mismatch, expected columns {SWEEP_COLUMNS}")
        rows = []
        for r in reader:
            rows.append(
                {
                    "arm": r["arm"],
                    "seed": int(r["seed"]),
                    "budget": float(r["budget"]),
                    "n": int(r["n"]),
                    **{k: float(r[k]) for k in SWEEP_COLUMNS[4:]},
                }
            )
        return rows


def _arm_key(arm: str):
    family = arm.split("-")[0]  # "deterministic-lam0.1" sorts with "deterministic"
    return (ARM_ORDER.index(family) if family in ARM_ORDER else len(ARM_ORDER), arm)


def merge_rows(tables: Iterable[list[dict]]) -> list[dict]:
    """Union of rows keyed by (arm, seed, budget); a key seen twice must carry identical values."""
    merged: dict[tuple, dict] = {}
    for rows in tables:
        for r in rows:
            key = (r["arm"], r["seed"], r["budget"])
            if key in merged and merged[key] != r:
                raise ValueError(f"conflicting rows for arm={key[0]} seed={key[1]} budget={key[2]}")
            merged[key] = r
    return [merged[k] for k in sorted(merged, key=lambda k: (_arm_key(k[0]), k[1], k[2]))]


def markdown_table(rows: list[dict]) -> str:
    """Per-row table plus an arm x budget accuracy table averaged over seeds."""
    head = "| " + " | ".join(SWEEP_COLUMNS) + " |"
    sep = "|" + "|".join("---" for _ in SWEEP_COLUMNS) + "|"
    lines = ["## Runs", "", head, sep]
    for r in rows:
        lines.append("| " + " | ".join(f"{r[k]:.2f}" if isinstance(r[k], float) else str(r[k]) for k in SWEEP_COLUMNS) + " |")
    budgets = sorted({r["budget"] for r in rows})
    arms = sorted({r["arm"] for r in rows}, key=_arm_key)
    lines += ["", "## Accuracy (%) by budget, mean over seeds", ""]
    lines.append("| arm | " + " | ".join(f"{b:.2f}" for b in budgets) + " |")
    lines.append("|---|" + "|".join("---" for _ in budgets) + "|")
    for a in arms:
        cells = []
        for b in budgets:
            vals = [r["accuracy"] for r in rows if r["arm"] == a and r["budget"] == b]
            cells.append(f"{np.mean(vals):.2f}" if vals else "-")
        lines.append(f"| {a} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def report(paths: Sequence, out_dir=None) -> tuple[str, str]:
    """Merge sweep CSVs. Returns (csv text, markdown text) and writes report.csv / report.md if asked."""
    rows = merge_rows(read_sweep_csv(p) for p in paths)
    text_csv, text_md = sweep_csv(rows), markdown_table(rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(text_csv)
        (out / "report.md").write_text(text_md)
    return text_csv, text_md
