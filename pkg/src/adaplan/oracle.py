"""Brute-force references used to check the library. Slow on purpose.

Nothing in the main library imports this module. Each check recomputes its
answer by the most direct route available: enumeration over orderings or
plans, central finite differences, parameter surgery, or a from-scratch
transformer forward pass without gates or a KV cache.
"""
from __future__ import annotations

import copy
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .cost_model import CostModel
from .data import EOA, TrainingSample
from .model import ExecutionPlan, ReconfigurableDecoder, SwitchKind

MAX_ENUM_K = 10  # k! orderings per set, C(K, k) sets
MAX_EXHAUSTIVE_K = 16  # 2^K plans


def _bound(K: int, limit: int) -> None:
    if K > limit:
        raise ValueError(f"enumeration bound exceeded: K={K} > {limit}")


# -- plan-set probabilities -------------------------------------------------------


def exact_set_probability(logits, plan) -> float:
    """P(selected set == plan) when ``plan.count()`` switches are drawn one by one
    without replacement, each draw softmax-renormalised over the switches not yet taken."""
    logits = [float(v) for v in np.asarray(logits, dtype=np.float64).reshape(-1)]
    K = len(logits)
    _bound(K, MAX_ENUM_K)
    bits = plan.bits if isinstance(plan, ExecutionPlan) else tuple(int(b) for b in plan)
    if len(bits) != K:
        raise ValueError(f"plan length {len(bits)} != K={K}")
    chosen = [i for i, b in enumerate(bits) if b]
    top = max(logits)
    w = [math.exp(v - top) for v in logits]
    total = 0.0
    for order in itertools.permutations(chosen):
        p, left = 1.0, sum(w)
        for i in order:
            p *= w[i] / left
            left -= w[i]
        total += p
    return total


@dataclass
class PlanEnumeration:
    K: int
    k: int
    plans: list[ExecutionPlan]
    probabilities: np.ndarray

    def as_dict(self) -> dict[tuple[int, ...], float]:
        return {p.bits: float(q) for p, q in zip(self.plans, self.probabilities)}

    def mode(self) -> ExecutionPlan:
        return self.plans[int(np.argmax(self.probabilities))]


def enumerate_plans(logits, k: int) -> PlanEnumeration:
    K = int(np.asarray(logits).reshape(-1).shape[0])
    _bound(K, MAX_ENUM_K)
    if not 0 <= k <= K:
        raise ValueError(f"k must be in [0, {K}]")
    plans = [ExecutionPlan.from_indices(K, idx) for idx in itertools.combinations(range(K), k)]
    probs = np.array([exact_set_probability(logits, p) for p in plans])
    return PlanEnumeration(K, k, plans, probs)


def total_variation(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(s, 0.0) - q.get(s, 0.0)) for s in keys)


# -- exhaustive constrained optimum -------------------------------------------------


def feasible_plans(cost_model: CostModel, l: float) -> np.ndarray:
    """Every 0/1 plan (rows, in binary counting order) whose FLOPs fit the budget."""
    K = cost_model.K
    _bound(K, MAX_EXHAUSTIVE_K)
    bits = (np.arange(2**K)[:, None] >> np.arange(K)[None, :]) & 1
    flops = cost_model.fixed_flops + bits @ np.asarray(cost_model.switch_costs, dtype=np.int64)
    return bits[flops <= cost_model.allowance(l)].astype(np.int8)


@torch.no_grad()
def plan_nlls(model, sample: TrainingSample, l: float, plans: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Summed NLL of the gold answer followed by EOA, one value per plan row."""
    prompt = model.prompt(sample.features, sample.query, l)[0]
    P = prompt.shape[0]
    target = torch.tensor(tuple(sample.answer) + (EOA,))
    fed = model.decoder.embed_text(target[:-1], offset=P)
    seq = torch.cat([prompt, fed], dim=0)
    out = []
    for start in range(0, len(plans), chunk):
        gates = torch.as_tensor(plans[start : start + chunk], dtype=seq.dtype)
        n = gates.shape[0]
        logits = model.decoder.forward_prefill(seq.expand(n, -1, -1).contiguous(), gates).logits
        logp = torch.log_softmax(logits[:, P - 1 : P - 1 + len(target)].double(), dim=-1)
        out.append(-logp.gather(-1, target.expand(n, -1)[..., None])[..., 0].sum(-1))
    return torch.cat(out).numpy()


@dataclass
class PlanSearch:
    plan: ExecutionPlan
    nll: float
    plans: np.ndarray  # (n, K) every feasible plan
    nlls: np.ndarray  # (n,)

    def rank_fraction(self, nll: float) -> float:
        """Fraction of feasible plans strictly better than ``nll``."""
        return float(np.mean(self.nlls < nll))


def exhaustive_best_plan(model, sample: TrainingSample, l: float, cost_model: CostModel | None = None) -> PlanSearch:
    """Lowest-NLL feasible plan by full enumeration; ties go to the first plan in counting order."""
    if cost_model is None:
        cost_model = model.cost_model(len(sample.features) + len(sample.query) + 1)
    plans = feasible_plans(cost_model, l)
    nlls = plan_nlls(model, sample, l, plans)
    best = int(np.argmin(nlls))
    return PlanSearch(ExecutionPlan(tuple(int(b) for b in plans[best])), float(nlls[best]), plans, nlls)


# -- gradients -------------------------------------------------------------------------


@torch.no_grad()
def finite_difference_gradient(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], eps: float = 1e-4):
    """Central differences, one coordinate at a time. Run under float64 for meaningful digits."""
    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat, gflat = p.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(loss_fn())
            flat[i] = orig - eps
            down = float(loss_fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(a: Sequence[torch.Tensor], b: Sequence[torch.Tensor]) -> float:
    va = torch.cat([t.reshape(-1).double() for t in a])
    vb = torch.cat([t.reshape(-1).double() for t in b])
    return float((va - vb).norm() / max(float(va.norm()), float(vb.norm()), 1e-30))


# -- masking semantics --------------------------------------------------------------------


@torch.no_grad()
def parameter_surgery_check(
    decoder: ReconfigurableDecoder, switch_id: int, sequence: torch.Tensor | None = None, tol: float = 1e-5
) -> bool:
    """Turning one head/group switch off must equal zeroing the parameters it owns.

    Compares the forward pass with only ``switch_id`` off against a copy of the
    decoder whose slices for that head or channel group are zeroed, run with
    every switch on.
    """
    desc = decoder.topology.descriptors[switch_id]
    if desc.kind == SwitchKind.ATTN_HEAD:
        slices = decoder.head_parameter_slices(desc.layer_index, desc.group_index)
    elif desc.kind == SwitchKind.MLP_GROUP:
        slices = decoder.group_parameter_slices(desc.layer_index, desc.group_index)
    else:
        raise ValueError("surgery applies to head and channel-group switches only")
    if sequence is None:
        gen = torch.Generator().manual_seed(switch_id)
        T = decoder.config.max_seq_len
        sequence = torch.randn(2, T, decoder.config.d_model, generator=gen, dtype=decoder.lm_head.dtype)
    K = decoder.K
    masked = decoder.forward_prefill(sequence, ExecutionPlan(tuple(int(i != switch_id) for i in range(K)))).logits
    edited = copy.deepcopy(decoder)
    params = dict(edited.named_parameters())
    for name, idx in slices:
        params[name][idx] = 0.0
    reference = edited.forward_prefill(sequence, ExecutionPlan.ones(K)).logits
    return float((masked - reference).abs().max()) < tol


# -- plain reference transformer ----------------------------------------------------------


@torch.no_grad()
def reference_logits(decoder: ReconfigurableDecoder, sequence: torch.Tensor) -> torch.Tensor:
    """Ungated pre-LN decoder forward written directly with torch.nn.functional."""
    cfg = decoder.config
    x = sequence[None] if sequence.dim() == 2 else sequence
    B, T, d = x.shape
    H = cfg.n_heads
    causal = torch.ones(T, T, dtype=torch.bool).tril()
    for blk in decoder.blocks:
        h = F.layer_norm(x, (d,), blk.ln1_g, blk.ln1_b, eps=1e-5)
        q, k, v = F.linear(h, blk.w_qkv, blk.b_qkv).split(d, dim=-1)
        q, k, v = (t.reshape(B, T, H, -1).transpose(1, 2) for t in (q, k, v))
        att = (q @ k.transpose(-1, -2)) / math.sqrt(d // H)
        att = att.masked_fill(~causal, float("-inf")).softmax(-1)
        x = x + F.linear((att @ v).transpose(1, 2).reshape(B, T, d), blk.w_o, blk.b_o)
        h = F.layer_norm(x, (d,), blk.ln2_g, blk.ln2_b, eps=1e-5)
        a = F.gelu(F.linear(h, blk.w_in, blk.b_in), approximate="tanh")
        if blk.w_gate is not None:
            a = a * F.linear(h, blk.w_gate, blk.b_gate)
        x = x + F.linear(a, blk.w_out, blk.b_out)
    out = F.linear(F.layer_norm(x, (d,), decoder.lnf_g, decoder.lnf_b, eps=1e-5), decoder.lm_head)
    return out[0] if sequence.dim() == 2 else out


@torch.no_grad()
def reference_generate(decoder: ReconfigurableDecoder, sequence: torch.Tensor, max_len: int = 2, eoa_token: int | None = EOA):
    """Greedy decoding that re-runs the full reference forward at every step (EOA not emitted)."""
    seq = sequence
    ids: list[int] = []
    while len(ids) < max_len:
        tok = int(reference_logits(decoder, seq)[-1].argmax())
        if tok == eoa_token:
            break
        ids.append(tok)
        if len(ids) == max_len:
            break
        seq = torch.cat([seq, decoder.embed_text(torch.tensor([tok]), offset=seq.shape[0])], dim=0)
    return ids


# -- packaged checks (used by the CLI and the test suite) ------------------------------------


def check_set_probability(seed: int = 0, n: int = 200_000) -> dict:
    """K=6, k=3: empirical sampler frequencies vs exact enumeration."""
    from . import numerics as nx
    from . import scheduler as sch

    cm = CostModel.uniform(12, 6)  # l=0.75 leaves room for exactly 3 switches
    logits = np.random.default_rng(seed).normal(size=6)
    plans = sch.sample_plans(logits, 0.75, cm, nx.Rng(seed), n=n)
    keys, counts = np.unique(plans, axis=0, return_counts=True)
    emp = {tuple(int(b) for b in k): c / n for k, c in zip(keys, counts)}
    tv = total_variation(emp, enumerate_plans(logits, 3).as_dict())
    return {"check": "set-probability", "seed": seed, "tv": tv, "pass": tv < 0.01}


def check_surgery(seed: int = 0) -> dict:
    from .model import ModelConfig

    dec = ReconfigurableDecoder(ModelConfig(n_layers=2, d_model=16, n_heads=4, d_mlp=32, switch_design="head"), seed=seed)
    ok = [parameter_surgery_check(dec, i) for i in range(dec.K)]
    return {"check": "surgery", "switches": len(ok), "pass": all(ok)}


def check_gradients(seed: int = 0) -> dict:
    """Analytic vs central-difference gradients of the straight-through loss, float64, frozen noise.

    2-layer d_model=16 head-design model, so the single switchable layer
    carries 8 switches of two different costs and most budgets leave real draws.
    """
    from . import numerics as nx
    from .adaptive import AdaptiveModel
    from .data import TaskSpec, collate, make_synthetic_dataset
    from .model import ModelConfig
    from .training import probabilistic_loss

    with nx.precision(torch.float64):
        task = TaskSpec(grid=2, n_colors=2, modulus=2, d_feat=4)
        cfg = ModelConfig(**{**task.model_kwargs(), "n_layers": 2, "d_model": 16, "n_heads": 4, "d_mlp": 32, "switch_design": "head"})
        model = AdaptiveModel(cfg, seed=seed)
        with torch.no_grad():
            model.scheduler.weight.normal_(0, 0.5, generator=torch.Generator().manual_seed(seed))
        batch = collate(make_synthetic_dataset(task, 4, seed=seed))
        budgets = np.array([0.6, 0.7, 0.8, 0.9])
        gumbel = nx.Rng(seed).gumbel((4, model.K, model.K))
        loss, relaxed, _, _ = probabilistic_loss(model, batch, budgets, gumbel=gumbel)
        params = list(model.parameters())
        analytic = nx.gradients(loss, params)

        def surrogate():
            return probabilistic_loss(model, batch, budgets, gumbel=gumbel, frozen=relaxed)[0]

        fd = finite_difference_gradient(surrogate, params)
        n_theta = len(model.theta())
        err_theta = relative_error(analytic[:n_theta], fd[:n_theta])
        err_phi = relative_error(analytic[n_theta:], fd[n_theta:])
        phi_norm = float(torch.cat([g.reshape(-1) for g in analytic[n_theta:]]).norm())
        draws = sum(int((d >= 0).sum()) for d in relaxed.draws)
    ok = err_theta < 1e-4 and err_phi < 1e-3 and phi_norm > 0 and draws > 0
    return {
        "check": "gradients",
        "rel_err_theta": err_theta,
        "rel_err_phi": err_phi,
        "phi_grad_norm": phi_norm,
        "stochastic_draws": draws,
        "pass": ok,
    }
