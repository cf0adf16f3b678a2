import csv

import numpy as np
import pytest
import torch

from adaplan import numerics as nx
from adaplan import oracle
from adaplan import training as tr
from adaplan.adaptive import AdaptiveModel
from adaplan.checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from adaplan.data import TaskSpec, collate, make_synthetic_dataset

TINY = dict(task=dict(grid=2, n_colors=2, modulus=2), model=dict(n_layers=4, d_model=16, n_heads=2, d_mlp=32), batch_size=8, n_train=200, log_every=2)


def cfg(**kw):
    return tr.TrainConfig.from_dict({**TINY, **kw})


@pytest.fixture
def setup():
    c = cfg()
    model = AdaptiveModel(c.model_config(), seed=0)
    batch = collate(make_synthetic_dataset(c.task, 8, seed=1))
    return c, model, batch


@pytest.mark.parametrize("arm", tr.ARMS)
def test_each_arm_step_is_finite(setup, arm):
    c, model, batch = setup
    res = tr.STEPS[arm](model, batch, c, nx.Rng(0))
    assert torch.isfinite(res.loss)
    assert len(res.grads) == len(list(model.parameters()))
    if arm != "deterministic":
        assert res.feasible.all()


def test_scheduler_gets_gradient_below_full_budget(setup):
    c, model, batch = setup
    res = tr.training_step_probabilistic(model, batch, c, nx.Rng(0), budgets=np.full(8, 0.8))
    n_theta = len(model.theta())
    head_grad = res.grads[-2]
    assert float(head_grad.abs().max()) > 0
    assert all(float(g.abs().max()) > 0 for g in res.grads[n_theta:])


def test_full_budget_saturates_the_scheduler(setup):
    c, model, batch = setup
    res = tr.training_step_probabilistic(model, batch, c, nx.Rng(0), budgets=np.ones(8))
    assert float(res.grads[-2].abs().max()) < 1e-8
    base = tr.training_step_base(model, batch, c)
    assert float(res.loss.detach()) == pytest.approx(float(base.loss.detach()), abs=1e-6)


def test_random_arm_marginals_are_uniform():
    from adaplan import scheduler as sch
    from adaplan.cost_model import CostModel

    c = CostModel.uniform(12, 6)
    plans = sch.sample_plans(np.zeros(6), 0.75, c, nx.Rng(0), n=60000)
    assert np.allclose(plans.mean(0), 0.5, atol=0.01)


def test_deterministic_loss_pieces(setup):
    c, model, batch = setup
    zero = tr.training_step_deterministic(model, batch, cfg(hinge_lambda=0.0), nx.Rng(0), budgets=np.full(8, 0.5))
    seq, P = tr.teacher_forced_inputs(model, batch, np.full(8, 0.5))
    state = model.split(seq, latency_index=P - 1)
    nll, _ = tr._answer_loss(model.finish(state, tr.deterministic_gates(state.logits)), batch, P)
    assert float(zero.loss.detach()) == pytest.approx(float(nll.detach()))
    # zero-init logits -> sigmoid 0.5 -> every gate off -> plan under any budget -> no penalty
    full = tr.training_step_deterministic(model, batch, cfg(hinge_lambda=10.0), nx.Rng(0), budgets=np.full(8, 0.5))
    assert float(full.loss.detach()) == pytest.approx(float(nll.detach()))


def test_hinge_penalises_overspending(setup):
    c, model, batch = setup
    with torch.no_grad():
        model.scheduler.bias.fill_(3.0)  # every gate on
    lam = 2.0
    res = tr.training_step_deterministic(model, batch, cfg(hinge_lambda=lam), nx.Rng(0), budgets=np.full(8, 0.5))
    seq, P = tr.teacher_forced_inputs(model, batch, np.full(8, 0.5))
    nll, _ = tr._answer_loss(model.finish(model.split(seq, P - 1), torch.ones(8, model.K)), batch, P)
    assert float(res.loss) == pytest.approx(float(nll) + lam * 0.5, rel=1e-5)
    assert not res.feasible.any()


def test_gradient_matches_finite_differences_on_a_subset(float64):
    c = cfg()
    model = AdaptiveModel(c.model_config(), seed=2)
    with torch.no_grad():
        model.scheduler.weight.normal_(0, 0.5)
    batch = collate(make_synthetic_dataset(c.task, 3, seed=0))
    budgets = np.full(3, 0.75)
    g = nx.Rng(0).gumbel((3, model.K, model.K))
    loss, relaxed, _, _ = tr.probabilistic_loss(model, batch, budgets, gumbel=g)
    params = [model.scheduler.weight, model.decoder.blocks[3].b_out, model.decoder.lnf_g]
    analytic = nx.gradients(loss, params)
    fd = oracle.finite_difference_gradient(lambda: tr.probabilistic_loss(model, batch, budgets, gumbel=g, frozen=relaxed)[0], params)
    assert oracle.relative_error(analytic[:1], fd[:1]) < 1e-3
    assert oracle.relative_error(analytic[1:], fd[1:]) < 1e-4


def test_zero_steps_checkpoint_is_the_initialisation(tmp_path):
    c = cfg(steps=0)
    tr.train(c, out_dir=tmp_path)
    model, meta = load_checkpoint(tmp_path / "checkpoint.bin")
    init = AdaptiveModel(c.model_config(), seed=c.seed)
    for (k, a), b in zip(model.state_dict().items(), init.state_dict().values()):
        assert torch.equal(a, b), k
    assert meta["arm"] == "probabilistic"


def test_training_is_reproducible(tmp_path):
    for d in ("a", "b"):
        tr.train(cfg(steps=4, warmup_steps=2), out_dir=tmp_path / d)
    assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == (tmp_path / "b" / "checkpoint.bin").read_bytes()
    with open(tmp_path / "a" / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == tr.LOG_COLUMNS
    assert [int(r["step"]) for r in rows] == [2, 4]


def test_nan_loss_aborts():
    c = cfg(steps=2)
    data = make_synthetic_dataset(c.task, 16, seed=0)
    data = [type(s)(s.features * np.nan, s.query, s.answer, s.grid) for s in data]
    with pytest.raises(FloatingPointError, match="non-finite"):
        tr.train(c, dataset=data)


def test_config_validation():
    with pytest.raises(ValueError):
        cfg(arm="greedy")
    with pytest.raises(ValueError):
        cfg(hinge_lambda=-1.0)
    with pytest.raises(ValueError):
        cfg(budget_range=(0.9, 0.5))


def test_checkpoint_round_trip_and_errors(tmp_path, setup):
    _, model, batch = setup
    path = tmp_path / "m.bin"
    save_checkpoint(path, model, {"x": 1})
    loaded, meta = load_checkpoint(path)
    assert meta == {"x": 1}
    seq = model.prompt(batch.features, batch.query, 0.8)
    assert torch.equal(model.decoder.forward_prefill(seq).logits, loaded.decoder.forward_prefill(seq).logits)
    header, arrays = read_checkpoint(path)
    assert header["version"] == 1 and set(arrays) == set(model.state_dict())
    raw = bytearray(path.read_bytes())
    (tmp_path / "bad.bin").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="not an adaplan checkpoint"):
        load_checkpoint(tmp_path / "bad.bin")
    raw[8] = 9
    (tmp_path / "v9.bin").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="unsupported checkpoint version"):
        load_checkpoint(tmp_path / "v9.bin")


@pytest.mark.slow
def test_default_config_lookup_loss_halves_early():
    c = tr.TrainConfig(task=TaskSpec(mode="lookup"))
    res = tr.train(c)
    first = res.log[0]["loss"]
    early = min(r["loss"] for r in res.log if r["step"] <= 0.2 * c.steps)
    print(f"\nlookup loss {first:.3f} -> {early:.3f} within {int(0.2 * c.steps)} steps")
    assert early <= 0.5 * first
