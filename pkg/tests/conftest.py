import os
import sys
import time

import pytest
import torch

torch.set_num_threads(int(os.environ.get("ADAPLAN_THREADS", "1")))


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)


@pytest.fixture
def float64():
    from adaplan import numerics as nx

    with nx.precision(torch.float64):
        yield


# trained toy runs, shared by every slow test in the session
SEEDS = (0, 1, 2)
LAMBDAS = (0.1, 1.0, 10.0)
N_EVAL = 1000


@pytest.fixture(scope="session")
def toy_runs():
    """Every arm trained with the default toy config and evaluated over the default budgets."""
    from dataclasses import replace

    from adaplan import harness
    from adaplan.data import make_synthetic_dataset
    from adaplan.training import TrainConfig, train

    base = TrainConfig()
    samples = make_synthetic_dataset(base.task, N_EVAL, seed=10_000, split="eval")
    jobs = [("base", s, base.hinge_lambda) for s in SEEDS]
    jobs += [(arm, s, base.hinge_lambda) for arm in ("probabilistic", "random") for s in SEEDS]
    jobs += [("deterministic", 0, lam) for lam in LAMBDAS]
    runs = {}
    t0 = time.perf_counter()
    for arm, seed, lam in jobs:
        t = time.perf_counter()
        res = train(replace(base, arm=arm, seed=seed, hinge_lambda=lam))
        train_s = time.perf_counter() - t
        rep, _ = harness.evaluate(res.model, samples, harness.DEFAULT_BUDGETS, seed=0, arm=arm)
        runs[(arm, seed, lam)] = {"model": res.model, "report": rep, "train_s": train_s}
    return {"runs": runs, "samples": samples, "config": base, "lambdas": LAMBDAS, "seconds": time.perf_counter() - t0}
