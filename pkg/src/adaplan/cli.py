"""Command line entry point: ``adaplan <command> [options]``.

Commands: train, evaluate, sweep, inspect, flops, oracle, report. Every
command prints JSON to stdout; files go under ``--out``. The only environment
variable read is ``ADAPLAN_THREADS`` (torch intra-op thread count).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import harness, oracle
from . import scheduler as sch
from .checkpoint import load_checkpoint
from .cost_model import CostModel
from .data import TaskSpec, make_synthetic_dataset
from .model import PRESETS, ModelConfig, SwitchTopology
from .training import ARMS, TrainConfig, train

THREADS_ENV = "ADAPLAN_THREADS"
EVAL_SEED_OFFSET = 10_000  # eval data stream is disjoint from every training seed


def _budgets(values) -> list[float]:
    if not values:
        return list(harness.DEFAULT_BUDGETS)
    out = []
    for v in values:
        out += [float(x) for x in str(v).split(",") if x]
    return out


def _load_config(path, seed=None, **overrides) -> TrainConfig:
    d = json.loads(Path(path).read_text()) if path else {}
    d.update({k: v for k, v in overrides.items() if v is not None})
    if seed is not None:
        d["seed"] = seed
    return TrainConfig.from_dict(d)


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _eval_samples(task: TaskSpec, n: int, seed: int | None):
    return make_synthetic_dataset(task, n, seed=EVAL_SEED_OFFSET + (seed or 0), split="eval")


def _task_of(meta: dict) -> TaskSpec:
    return TaskSpec(**meta["train_config"]["task"])


def _evaluate_checkpoint(path, budgets, seed, n_eval, out=None):
    model, meta = load_checkpoint(path)
    samples = _eval_samples(_task_of(meta), n_eval, seed)
    rep, records = harness.evaluate(model, samples, budgets, seed=seed or 0, arm=meta["arm"], config=meta)
    # reports identify runs by arm label and training seed
    rep.seed = meta["train_config"]["seed"]
    if meta["arm"] == "deterministic":
        rep.arm = f"deterministic-lam{meta['train_config']['hinge_lambda']:g}"
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        harness.write_sweep_csv(out / "sweep.csv", rep.to_rows())
        harness.write_records(out / "records.jsonl", records)
    return rep


def cmd_train(a) -> None:
    cfg = _load_config(a.config, a.seed, arm=a.arm, steps=a.steps)
    t0 = time.perf_counter()
    res = train(cfg, out_dir=a.out)
    _emit({"out": a.out, "arm": cfg.arm, "seed": cfg.seed, "seconds": round(time.perf_counter() - t0, 2), "final": res.log[-1] if res.log else None})


def cmd_evaluate(a) -> None:
    rep = _evaluate_checkpoint(a.checkpoint, _budgets(a.budget), a.seed, a.n_eval, a.out)
    _emit(rep.to_json() | {"config": None})


def cmd_sweep(a) -> None:
    """Train and evaluate every requested (arm, seed[, lambda]) then write a merged report."""
    base = _load_config(a.config)
    out = Path(a.out)
    budgets = _budgets(a.budget)
    paths = []
    seeds = [int(s) for s in a.seeds.split(",")] if a.seeds else [base.seed if a.seed is None else a.seed]
    lambdas = [float(x) for x in a.lambdas.split(",")]
    for arm in a.arms.split(","):
        for seed in seeds:
            for lam in lambdas if arm == "deterministic" else [base.hinge_lambda]:
                cfg = TrainConfig.from_dict({**base.to_dict(), "arm": arm, "seed": seed, "hinge_lambda": lam})
                name = f"{arm}-s{seed}" + (f"-lam{lam:g}" if arm == "deterministic" else "")
                run = out / name
                train(cfg, out_dir=run)
                _evaluate_checkpoint(run / "checkpoint.bin", budgets, 0, a.n_eval, run)
                paths.append(run / "sweep.csv")
    harness.report(paths, out)
    _emit({"runs": [str(p) for p in paths], "report": str(out / "report.csv")})


def cmd_inspect(a) -> None:
    model, meta = load_checkpoint(a.checkpoint)
    samples = _eval_samples(_task_of(meta), a.index + 1, a.seed)
    budget = _budgets(a.budget)[0] if a.budget else 0.75
    dump = harness.inspect(model, samples[a.index], budget) | {"sample_index": a.index}
    if a.out:
        Path(a.out).mkdir(parents=True, exist_ok=True)
        (Path(a.out) / "inspect.json").write_text(json.dumps(dump, indent=2, sort_keys=True))
    _emit(dump)


def cmd_flops(a) -> None:
    if a.config:
        config = ModelConfig.from_dict(json.loads(Path(a.config).read_text()))
    else:
        config = ModelConfig.preset(a.preset)
    topo = SwitchTopology.from_config(config)
    cm = CostModel.build(config, topo, a.seq_len)
    res = {"table": cm.table(config, topo), "plans": []}
    for l in _budgets(a.budget) if a.budget else []:
        plan = sch.argmax_plan(np.zeros(cm.K), l, cm)
        res["plans"].append({"budget": l, "plan": str(plan), "plan_flops": cm.plan_flops(plan), "ratio": cm.plan_flops(plan) / cm.base_prefill_flops})
    _emit(res)


ORACLE_CHECKS = {"set-probability": oracle.check_set_probability, "surgery": oracle.check_surgery, "gradients": oracle.check_gradients}


def cmd_oracle(a) -> None:
    names = list(ORACLE_CHECKS) if a.check == "all" else [a.check]
    results = [ORACLE_CHECKS[n](a.seed or 0) for n in names]
    _emit({"results": results, "pass": all(r["pass"] for r in results)})


def cmd_report(a) -> None:
    text_csv, text_md = harness.report(a.files, a.out)
    if a.out is None:
        sys.stdout.write(text_md)
    else:
        _emit({"csv": str(Path(a.out) / "report.csv"), "markdown": str(Path(a.out) / "report.md")})


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaplan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, out=True):
        if config:
            sp.add_argument("--config", help="JSON file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--budget", action="append", help="budget(s); repeat or comma-separate")
        if out:
            sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("train", help="train one arm")
    common(sp)
    sp.add_argument("--arm", choices=ARMS)
    sp.add_argument("--steps", type=int)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("evaluate", help="budget sweep of one checkpoint")
    common(sp, config=False)
    sp.add_argument("checkpoint")
    sp.add_argument("--n-eval", type=int, default=1000)
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("sweep", help="train + evaluate several arms and seeds, then report")
    common(sp)
    sp.add_argument("--arms", default=",".join(ARMS))
    sp.add_argument("--seeds", help="comma-separated seeds")
    sp.add_argument("--lambdas", default="0.1,1,10", help="hinge weights for the deterministic arm")
    sp.add_argument("--n-eval", type=int, default=1000)
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("inspect", help="plan and latency-token attention dump for one eval sample")
    common(sp, config=False)
    sp.add_argument("checkpoint")
    sp.add_argument("--index", type=int, default=0)
    sp.set_defaults(fn=cmd_inspect)

    sp = sub.add_parser("flops", help="FLOPs table for a model config")
    common(sp)
    sp.add_argument("--preset", default="llava-7b", choices=sorted(PRESETS))
    sp.add_argument("--seq-len", type=int, default=620)
    sp.set_defaults(fn=cmd_flops)

    sp = sub.add_parser("oracle", help="run brute-force reference checks")
    common(sp, config=False, out=False)
    sp.add_argument("--check", default="all", choices=["all", *ORACLE_CHECKS])
    sp.set_defaults(fn=cmd_oracle)

    sp = sub.add_parser("report", help="merge sweep CSVs into CSV + Markdown")
    sp.add_argument("files", nargs="+")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    threads = os.environ.get(THREADS_ENV)
    if threads:
        torch.set_num_threads(int(threads))
    args.fn(args)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
