import json

import numpy as np
import pytest

from satfuse.config import TrainConfig
from satfuse.errors import ConfigError, NumericError
from satfuse.fusion.model import FusionModel, bench_config
from satfuse.synth import SceneSpec, generate_scene
from satfuse.tensor import Tensor
from satfuse.train import Adam, evaluate, learning_rate, recover_offset, train


@pytest.fixture(scope="module")
def samples():
    return [generate_scene(SceneSpec(), i) for i in range(6)]


def _small(**kw):
    return bench_config(fusion="concat", **kw)


def test_adam_zero_lr_is_a_no_op(samples):
    m = FusionModel(_small())
    before = {k: p.data.copy() for k, p in m.params.items()}
    train(_small(), TrainConfig(steps=1, batch=2, lr=0.0), samples, model=m)
    for k, p in m.params.items():
        assert p.data.tobytes() == before[k].tobytes(), k


def test_adam_minimises_quadratic():
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam({"x": x}, lr=0.1)
    for _ in range(300):
        x.grad = 2 * x.data
        opt.step()
    np.testing.assert_allclose(x.data, 0.0, atol=1e-2)


def test_adam_rejects_non_finite_gradient():
    x = Tensor(np.zeros(2), requires_grad=True)
    x.grad = np.array([np.nan, 0.0])
    with pytest.raises(NumericError):
        Adam({"x": x}).step()


def test_adam_clips_global_norm():
    x = Tensor(np.zeros(2), requires_grad=True)
    x.grad = np.array([30.0, 40.0])
    assert Adam({"x": x}).step(clip=5.0) == 50.0


def test_overfits_single_sample(samples):
    one = samples[:1]
    r = train(_small(), TrainConfig(steps=150, batch=1, lr=3e-3, log_every=50), one)
    assert evaluate(r.model, one).overall.miou > 0.95


def test_training_improves_over_init(samples):
    init = FusionModel(_small())
    r = train(_small(), TrainConfig(steps=40, batch=2, lr=3e-3, log_every=10), samples)
    assert evaluate(r.model, samples).overall.miou >= evaluate(init, samples).overall.miou
    assert r.history[-1]["loss"] < r.history[0]["loss"]


def test_runs_are_reproducible(samples, tmp_path):
    cfg = TrainConfig(steps=5, batch=2, log_every=1)
    a = train(_small(), cfg, samples, samples[:2], log_path=tmp_path / "a.jsonl", out_dir=tmp_path / "a")
    b = train(_small(), cfg, samples, samples[:2], log_path=tmp_path / "b.jsonl", out_dir=tmp_path / "b")
    assert a.model.params.digest() == b.model.params.digest()
    assert a.final_val.to_dict() == b.final_val.to_dict()
    strip = lambda p: [{k: v for k, v in json.loads(line).items() if k != "seconds"}  # noqa: E731
                       for line in p.read_text().splitlines()]
    assert strip(tmp_path / "a.jsonl") == strip(tmp_path / "b.jsonl")
    assert len(strip(tmp_path / "a.jsonl")) == 5
    assert FusionModel.load(tmp_path / "a").params.digest() == a.model.params.digest()


def test_cosine_schedule_endpoints():
    cfg = TrainConfig(lr=2e-3, steps=100, lr_schedule="cosine")
    rates = [learning_rate(cfg, s) for s in range(1, 101)]
    assert rates[0] == pytest.approx(2e-3)
    assert rates[50] == pytest.approx(1.1e-3)
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    assert rates[-1] > 2e-4
    assert learning_rate(TrainConfig(lr=2e-3), 77) == 2e-3
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"lr_schedule": "step"})


def test_diverging_loss_names_the_step(samples):
    m = FusionModel(_small())
    m.params["head.c3.b"].data[:] = np.nan
    with pytest.raises(NumericError, match="step 1"):
        train(_small(), TrainConfig(steps=3, batch=1), samples, model=m)


def test_class_weight_length_checked(samples):
    with pytest.raises(ValueError):
        train(_small(), TrainConfig(steps=1, class_weights="1,2"), samples)


def test_evaluate_groups_by_tag(samples):
    res = evaluate(FusionModel(_small()), samples, "60x30")
    tags = {t for s in samples for t in s.meta["tags"]}
    assert set(res.by_tag) == tags
    assert res.to_dict()["bev_range"] == "60x30"


@pytest.mark.parametrize("shift", [(0, 0), (2, -1), (-3, 3)])
def test_offset_head_recovers_integer_shift(shift):
    r = recover_offset(shift)
    assert r.mean_error < 0.25
    assert r.steps <= 2000
