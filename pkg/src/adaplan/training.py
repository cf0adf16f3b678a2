"""Joint training of the decoder and the scheduler, plus the baseline arms.

Arms:

``probabilistic``  per-sample budget ~ U(budget_range); plan drawn by sequential
                   Gumbel-softmax sampling over the affordable switches; the
                   hard plan runs forward, gradients reach the scheduler through
                   the soft weights (straight-through).
``deterministic``  sigmoid gates binarised at 0.5 (straight-through); loss adds
                   ``lambda * max(0, plan_flops / base - l)``. Nothing stops the
                   plan from overspending.
``random``         same sampler as ``probabilistic`` with uniform logits; the
                   scheduler is not used.
``base``           every switch on, budget pinned to 1.0.

The loss is the mean next-token NLL over answer positions only (gold answer
token then EOA).
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import numerics as nx
from . import scheduler as sch
from .adaptive import AdaptiveModel, teacher_forced_inputs
from .checkpoint import save_checkpoint
from .data import Batch, TaskSpec, collate, make_synthetic_dataset
from .model import ModelConfig

log = logging.getLogger(__name__)

ARMS = ("probabilistic", "deterministic", "random", "base")
# default toy model: one always-on layer, then 3 heads + 3 MLP groups as the K=6 switches
TOY_MODEL = dict(n_layers=2, d_model=48, n_heads=3, d_mlp=96, switch_design="head", switchable_start_layer=1)
LOG_COLUMNS = ("step", "loss", "budget_mean", "utilization_mean", "success_rate", "accuracy")


@dataclass
class TrainConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    model: dict = field(default_factory=lambda: dict(TOY_MODEL))  # ModelConfig fields on top of the task's
    arm: str = "probabilistic"
    hinge_lambda: float = 1.0
    budget_range: tuple[float, float] = (0.5, 1.0)
    full_budget_fraction: float = 0.2  # share of samples pinned to the top of budget_range
    learning_rate: float = 2e-3
    betas: tuple[float, float] = (0.9, 0.999)
    lr_schedule: str = "cosine"
    warmup_steps: int = 100
    grad_clip: float = 1.0
    batch_size: int = 32
    steps: int = 10000
    tau: float = 1.0
    seed: int = 0
    n_train: int = 20000
    log_every: int = 50

    def __post_init__(self):
        if isinstance(self.task, dict):
            self.task = TaskSpec(**self.task)
        self.budget_range = tuple(float(b) for b in self.budget_range)
        self.betas = tuple(self.betas)
        if self.arm not in ARMS:
            raise ValueError(f"arm must be one of {ARMS}")
        if not 0.0 <= self.full_budget_fraction <= 1.0:
            raise ValueError("full_budget_fraction must lie in [0, 1]")
        if self.hinge_lambda < 0:
            raise ValueError("hinge lambda must be >= 0")
        lo, hi = self.budget_range
        if not lo <= hi <= 1.0:
            raise ValueError("budget_range must satisfy lo <= hi <= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{**self.task.model_kwargs(), **self.model})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"] = self.task.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class StepResult:
    loss: torch.Tensor
    grads: list[torch.Tensor] | None
    budgets: np.ndarray
    plans: np.ndarray  # (B, K) hard bits
    utilization: np.ndarray
    feasible: np.ndarray
    correct: np.ndarray


def _answer_loss(logits: torch.Tensor, batch: Batch, P: int) -> tuple[torch.Tensor, np.ndarray]:
    A = batch.answer.shape[1]
    pred = logits[:, P - 1 : P - 1 + A]
    loss = nx.cross_entropy(pred, batch.answer)
    correct = (pred[:, 0].argmax(-1) == batch.answer[:, 0]).numpy()
    return loss, correct


def _plan_stats(model: AdaptiveModel, P: int, plans: np.ndarray, budgets: np.ndarray):
    cm = model.cost_model(P)
    flops = cm.fixed_flops + plans.astype(np.int64) @ cm.costs_array
    util = flops / (budgets * cm.base_prefill_flops)
    feasible = np.array([f <= cm.allowance(b) for f, b in zip(flops, budgets)])
    return util, feasible


def _finish(model, loss, batch_plans, budgets, P, correct, want_grads) -> StepResult:
    grads = nx.gradients(loss, list(model.parameters())) if want_grads else None
    util, feasible = _plan_stats(model, P, batch_plans, budgets)
    return StepResult(loss, grads, budgets, batch_plans, util, feasible, correct)


def sample_budgets(cfg: TrainConfig, rng: nx.Rng, n: int) -> np.ndarray:
    lo, hi = cfg.budget_range
    out = rng.uniform(n, lo, hi) if hi > lo else np.full(n, lo)
    if cfg.full_budget_fraction > 0:
        # a continuous draw never lands exactly on l=1, the only budget where every switch fits
        out = np.where(rng.uniform(n) < cfg.full_budget_fraction, hi, out)
    return out


def probabilistic_loss(model: AdaptiveModel, batch: Batch, budgets, tau: float = 1.0, rng=None, gumbel=None, frozen=None):
    """Answer NLL under a straight-through plan sample. Returns (loss, RelaxedPlan, P, correct)."""
    seq, P = teacher_forced_inputs(model, batch, budgets)
    state = model.split(seq, latency_index=P - 1)
    relaxed = sch.sample_plan_differentiable(
        state.logits, budgets, model.cost_model(P), tau=tau, rng=rng, gumbel=gumbel, frozen=frozen
    )
    logits = model.finish(state, relaxed.gates)
    loss, correct = _answer_loss(logits, batch, P)
    return loss, relaxed, P, correct


def training_step_probabilistic(model, batch, cfg: TrainConfig, rng: nx.Rng, gumbel=None, budgets=None, grads=True):
    budgets = sample_budgets(cfg, rng, len(batch)) if budgets is None else np.asarray(budgets, dtype=float)
    loss, relaxed, P, correct = probabilistic_loss(model, batch, budgets, cfg.tau, rng=rng, gumbel=gumbel)
    return _finish(model, loss, relaxed.hard.detach().numpy().astype(np.int8), budgets, P, correct, grads)


def training_step_random(model, batch, cfg: TrainConfig, rng: nx.Rng, budgets=None, grads=True):
    budgets = sample_budgets(cfg, rng, len(batch)) if budgets is None else np.asarray(budgets, dtype=float)
    seq, P = teacher_forced_inputs(model, batch, budgets)
    state = model.split(seq, latency_index=P - 1)
    plans = sch.sample_plans(np.zeros(model.K), budgets, model.cost_model(P), rng, n=len(batch))
    logits = model.finish(state, nx.tensor(plans))
    loss, correct = _answer_loss(logits, batch, P)
    return _finish(model, loss, plans, budgets, P, correct, grads)


def deterministic_gates(logits: torch.Tensor) -> torch.Tensor:
    """Sigmoid gates binarised at 0.5 with a straight-through backward pass."""
    soft = torch.sigmoid(logits)
    hard = (soft > 0.5).to(soft.dtype)
    return hard + (soft - soft.detach())


def training_step_deterministic(model, batch, cfg: TrainConfig, rng: nx.Rng, budgets=None, grads=True):
    budgets = sample_budgets(cfg, rng, len(batch)) if budgets is None else np.asarray(budgets, dtype=float)
    seq, P = teacher_forced_inputs(model, batch, budgets)
    state = model.split(seq, latency_index=P - 1)
    gates = deterministic_gates(state.logits)
    logits = model.finish(state, gates)
    nll, correct = _answer_loss(logits, batch, P)
    cm = model.cost_model(P)
    frac_costs = nx.tensor(np.asarray(cm.switch_costs, dtype=np.float64) / cm.base_prefill_flops)
    used = cm.fixed_flops / cm.base_prefill_flops + gates @ frac_costs
    penalty = torch.relu(used - nx.tensor(budgets)).mean()
    loss = nll + cfg.hinge_lambda * penalty
    plans = gates.detach().numpy().round().astype(np.int8)
    return _finish(model, loss, plans, budgets, P, correct, grads)


def training_step_base(model, batch, cfg: TrainConfig, rng: nx.Rng | None = None, grads=True):
    budgets = np.ones(len(batch))
    seq, P = teacher_forced_inputs(model, batch, budgets)
    logits = model.decoder.head(model.decoder.run_layers(seq, 0, model.config.n_layers)[0])
    loss, correct = _answer_loss(logits, batch, P)
    plans = np.ones((len(batch), model.K), dtype=np.int8)
    return _finish(model, loss, plans, budgets, P, correct, grads)


STEPS = {
    "probabilistic": training_step_probabilistic,
    "deterministic": training_step_deterministic,
    "random": training_step_random,
    "base": training_step_base,
}


def _lr_factor(cfg: TrainConfig, step: int) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return (step + 1) / cfg.warmup_steps
    if cfg.lr_schedule == "constant":
        return 1.0
    span = max(cfg.steps - cfg.warmup_steps, 1)
    return 0.5 * (1 + math.cos(math.pi * (step - cfg.warmup_steps) / span))


@dataclass
class TrainResult:
    model: AdaptiveModel
    log: list[dict]


def train(cfg: TrainConfig, out_dir=None, dataset=None) -> TrainResult:
    """Train one arm; writes ``checkpoint.bin`` and ``train_log.csv`` when ``out_dir`` is set."""
    torch.manual_seed(cfg.seed)
    rng = nx.Rng(cfg.seed)
    model = AdaptiveModel(cfg.model_config(), seed=cfg.seed)
    data = dataset if dataset is not None else make_synthetic_dataset(cfg.task, cfg.n_train, seed=cfg.seed + 1)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, weight_decay=0.0)
    step_fn = STEPS[cfg.arm]
    rows: list[dict] = []
    acc = {"loss": [], "budget": [], "util": [], "ok": [], "correct": []}
    order = rng.permutation(len(data))
    cursor = 0
    for step in range(cfg.steps):
        if cursor + cfg.batch_size > len(order):
            order, cursor = rng.permutation(len(data)), 0
        batch = collate([data[i] for i in order[cursor : cursor + cfg.batch_size]])
        cursor += cfg.batch_size
        res = step_fn(model, batch, cfg, rng)
        loss = float(res.loss.detach())
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss} at step {step} (arm={cfg.arm}, seed={cfg.seed})")
        for group in opt.param_groups:
            group["lr"] = cfg.learning_rate * _lr_factor(cfg, step)
        for p, g in zip(model.parameters(), res.grads):
            p.grad = g
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        acc["loss"].append(loss)
        acc["budget"].extend(res.budgets)
        acc["util"].extend(res.utilization)
        acc["ok"].extend(res.feasible)
        acc["correct"].extend(res.correct)
        if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.steps:
            row = {
                "step": step + 1,
                "loss": float(np.mean(acc["loss"])),
                "budget_mean": float(np.mean(acc["budget"])),
                "utilization_mean": float(np.mean(acc["util"])),
                "success_rate": 100.0 * float(np.mean(acc["ok"])),
                "accuracy": 100.0 * float(np.mean(acc["correct"])),
            }
            rows.append(row)
            log.info("step %(step)d loss %(loss).4f acc %(accuracy).1f", row)
            acc = {k: [] for k in acc}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.bin", model, {"train_config": cfg.to_dict(), "arm": cfg.arm})
        write_log(out / "train_log.csv", rows)
    return TrainResult(model, rows)


def write_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in LOG_COLUMNS})
