"""Tests for optimisation, evaluation and the experiment drivers (hgfx/services/trainer.py)."""

import json
from decimal import Decimal, localcontext
from pathlib import Path

import numpy as np
import pytest

from hgfx.checkpoint import load_checkpoint
from hgfx.config import OptimConfig, RunConfig, load_run_config
from hgfx.errors import ConfigError, DataError, GradError, NumericError
from hgfx.services.datasets import ImageDataset, load_dataset, synth_generate
from hgfx.services.graph_reason import HeteroGraphNet
from hgfx.services.trainer import (
    OptimState,
    accuracy,
    adam_step,
    clip_grad_norm,
    evaluate,
    lr_at,
    predict_proba,
    run_ablation,
    run_sweep,
    train,
)
from hgfx.tensor import Tensor, cross_entropy

from tests.conftest import random_pixels, tiny_config


def tiny_dataset(rng, n: int = 4) -> ImageDataset:
    return ImageDataset(random_pixels(rng, batch=n), np.arange(n) % 2, ["cloud", "smoke"])


def optim(**overrides) -> OptimConfig:
    fields = dict(lr=1e-2, warmup_steps=0, epochs=2, batch_size=2, seed=0)
    fields.update(overrides)
    return OptimConfig(**fields)


def named(values, grad=None):
    p = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
    p.grad = None if grad is None else np.array(grad, dtype=np.float64)
    return [("w", p)]


def adam_transcript(theta: float, grads: list[float], lr: float) -> float:
    """Bias-corrected Adam on one scalar, carried out in 50-digit decimal arithmetic."""
    with localcontext() as ctx:
        ctx.prec = 50
        b1, b2, eps = Decimal("0.9"), Decimal("0.999"), Decimal("1e-8")
        th, m, v = Decimal(repr(theta)), Decimal(0), Decimal(0)
        for t, g in enumerate(grads, start=1):
            g = Decimal(repr(g))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat, v_hat = m / (1 - b1**t), v / (1 - b2**t)
            th -= Decimal(repr(lr)) * m_hat / (v_hat.sqrt() + eps)
        return float(th)


def dataset_loss(model: HeteroGraphNet, data: ImageDataset) -> float:
    model.eval()
    return cross_entropy(model(data.images.astype(model.cfg.np_dtype)), data.labels).item()


class TestLearningRate:
    def test_warmup_start(self):
        assert lr_at(0, 1.25e-4, 1e-4, 100) == pytest.approx(1.25e-8)

    def test_warmup_midpoint(self):
        assert lr_at(50, 1.0, 0.0, 100) == pytest.approx(0.5)

    def test_after_warmup(self):
        assert lr_at(100, 1.25e-4, 1e-4, 100) == 1.25e-4
        assert lr_at(7, 3e-3) == 3e-3

    def test_negative_step(self):
        with pytest.raises(ConfigError):
            lr_at(-1, 1.0)

    def test_state_from_config(self):
        state = OptimState.from_config(OptimConfig(lr=1e-3, warmup_fraction=0.1), total_steps=200)
        assert state.warmup_steps == 20
        assert state.lr == pytest.approx(1e-3 * 1e-4)


class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        params = named([1.0, -2.0], [0.0, 0.0])
        adam_step(params, OptimState(), lr=0.1)
        np.testing.assert_array_equal(params[0][1].data, [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        params = named([1.0, 1.0], [3.0, -0.5])
        state = OptimState()
        adam_step(params, state, lr=0.01)
        np.testing.assert_allclose(params[0][1].data, [0.99, 1.01], rtol=1e-6)
        assert state.step == 1

    def test_zero_lr_leaves_parameters(self):
        params = named([0.5], [2.0])
        state = OptimState()
        adam_step(params, state, lr=0.0)
        assert params[0][1].data[0] == 0.5
        assert state.step == 1 and "w" in state.m

    def test_missing_gradient(self):
        with pytest.raises(GradError):
            adam_step(named([1.0]), OptimState(), lr=0.1)

    def test_two_steps_match_decimal_transcript(self):
        theta, first, second = [0.5, -1.0, 2.0], [0.3, -2.0, 0.0], [-0.1, 0.7, 1e-3]
        params = named(theta, first)
        state = OptimState()
        adam_step(params, state, lr=0.01)
        params[0][1].grad = np.array(second)
        adam_step(params, state, lr=0.01)
        expected = [adam_transcript(th, [g1, g2], 0.01) for th, g1, g2 in zip(theta, first, second)]
        np.testing.assert_allclose(params[0][1].data, expected, rtol=1e-12)
        assert state.step == 2


class TestClipping:
    def test_rescales_to_max_norm(self):
        params = named([0.0, 0.0], [3.0, 4.0])
        assert clip_grad_norm(params, 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose(params[0][1].grad, [0.6, 0.8], rtol=1e-9)

    def test_small_gradient_untouched(self):
        params = named([0.0], [0.5])
        clip_grad_norm(params, 1.0)
        assert params[0][1].grad[0] == 0.5

    def test_non_finite(self):
        with pytest.raises(NumericError):
            clip_grad_norm(named([0.0], [np.nan]), 1.0)


class TestEvaluation:
    def test_accuracy(self):
        assert accuracy([0, 1, 1], [0, 1, 1]) == 1.0
        assert accuracy([1, 0], [0, 1]) == 0.0
        assert accuracy([0, 1, 0, 1], [0, 1, 1, 1]) == pytest.approx(0.75)

    def test_empty(self):
        with pytest.raises(DataError):
            accuracy([], [])

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            accuracy([0, 1], [0])

    def test_evaluate_in_range(self, tiny_model, rng):
        assert 0.0 <= evaluate(tiny_model, tiny_dataset(rng)) <= 1.0

    def test_probabilities(self, tiny_model, rng):
        probs = predict_proba(tiny_model, random_pixels(rng, batch=3))
        assert probs.shape == (3, 2)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0)


class TestTrain:
    def test_zero_lr_keeps_parameters(self, rng):
        model = HeteroGraphNet(tiny_config(), seed=1)
        before = model.state_dict()
        train(model, tiny_dataset(rng), None, optim(lr=0.0))
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(value, before[name])

    def test_same_seed_same_history(self, rng):
        data = tiny_dataset(rng)
        runs = [train(HeteroGraphNet(tiny_config(dropout=0.2), seed=1), data, data, optim()) for _ in range(2)]
        assert [r.model_dump() for r in runs[0]] == [r.model_dump() for r in runs[1]]

    def test_loss_decreases(self, rng):
        data = tiny_dataset(rng)
        history = train(HeteroGraphNet(tiny_config(), seed=1), data, None, optim(epochs=15, batch_size=4))
        assert history[-1].train_loss < history[0].train_loss

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_loss_below_initial_after_first_epoch(self, seed, tmp_path):
        synth_generate(tmp_path, 8, size=8, seed=seed)
        data, _, _ = load_dataset(tmp_path, 8, 3, val_fraction=0.0)
        model = HeteroGraphNet(tiny_config(), seed=seed)
        initial = dataset_loss(model, data)
        train(model, data, None, optim(epochs=1, batch_size=4, seed=seed))
        assert dataset_loss(model, data) < initial

    def test_writes_run_artifacts(self, rng, tmp_path):
        data = tiny_dataset(rng)
        run_cfg = RunConfig(model=tiny_config(), optim=optim())
        history = train(HeteroGraphNet(run_cfg.model, seed=1), data, data, run_cfg.optim, tmp_path, run_cfg)
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert [json.loads(line)["epoch"] for line in lines] == [1, 2]
        assert json.loads(lines[-1])["val_acc"] == history[-1].val_acc
        state = load_checkpoint(tmp_path / "best.hgfx")
        assert "ssm.A_log" in state
        assert load_run_config(tmp_path / "config.json") == run_cfg

    def test_empty_training_set(self, rng):
        empty = tiny_dataset(rng).subset([])
        with pytest.raises(DataError):
            train(HeteroGraphNet(tiny_config()), empty, None, optim())

    def test_epoch_callback(self, rng):
        seen = []
        train(HeteroGraphNet(tiny_config(), seed=1), tiny_dataset(rng), None, optim(), on_epoch=seen.append)
        assert [r.epoch for r in seen] == [1, 2]


class TestDrivers:
    def test_ablation_table(self, rng, tmp_path):
        data = tiny_dataset(rng)
        run_cfg = RunConfig(model=tiny_config(), optim=optim(epochs=1), output_dir=str(tmp_path))
        rows = run_ablation(run_cfg, data, data, presets=["base", "full"])
        assert [r.preset for r in rows] == ["base", "full"]
        assert rows[0].delta == 0.0
        assert rows[1].delta == pytest.approx(rows[1].val_acc - rows[0].val_acc)
        table = json.loads((tmp_path / "ablation.json").read_text())
        assert table[1]["hetero_learning"] is True
        assert (tmp_path / "best-full.hgfx").exists()
        assert load_run_config(tmp_path / "config-base.json").model.ablation == "base"

    def test_ablation_seed_tags(self, rng, tmp_path):
        data = tiny_dataset(rng)
        run_cfg = RunConfig(model=tiny_config(), optim=optim(epochs=1), output_dir=str(tmp_path))
        run_ablation(run_cfg, data, None, presets=["hg"], seeds=[0, 1])
        assert (tmp_path / "metrics-hg-s0.jsonl").exists() and (tmp_path / "metrics-hg-s1.jsonl").exists()

    def test_unknown_preset(self, rng, tmp_path):
        run_cfg = RunConfig(model=tiny_config(), optim=optim(), output_dir=str(tmp_path))
        with pytest.raises(ConfigError):
            run_ablation(run_cfg, tiny_dataset(rng), None, presets=["everything"])

    def test_sweep(self, rng, tmp_path):
        data = tiny_dataset(rng)
        run_cfg = RunConfig(model=tiny_config(), optim=optim(epochs=1), output_dir=str(tmp_path))
        records = run_sweep(run_cfg, data, data, "k", [1, 2])
        assert [(r.value, r.preset) for r in records] == [(1.0, "full"), (1.0, "base"), (2.0, "full"), (2.0, "base")]
        assert len((tmp_path / "sweep-k.jsonl").read_text().splitlines()) == 4

    def test_sweep_rejects_unknown_param(self, rng, tmp_path):
        run_cfg = RunConfig(model=tiny_config(), optim=optim(), output_dir=str(tmp_path))
        with pytest.raises(ConfigError):
            run_sweep(run_cfg, tiny_dataset(rng), None, "blocks", [1])

    def test_sweep_rejects_invalid_value(self, rng, tmp_path):
        run_cfg = RunConfig(model=tiny_config(), optim=optim(), output_dir=str(tmp_path))
        with pytest.raises(ConfigError):
            run_sweep(run_cfg, tiny_dataset(rng), None, "k", [99])


DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.json"


@pytest.fixture(scope="module")
def desk_ablation(tmp_path_factory):
    """``base`` and ``full`` trained on the 64/32 synthetic split with the desk config, seeds 0-2."""
    root = tmp_path_factory.mktemp("desk")
    run_cfg = load_run_config(DESK_CONFIG)
    size, seed = run_cfg.model.image_size, run_cfg.data.seed
    synth_generate(root / "data", 48, size=size, seed=seed)
    train_set, val_set, _ = load_dataset(root / "data", size, run_cfg.model.channels, run_cfg.data.val_fraction, seed)
    run_cfg = run_cfg.model_copy(update={
        "optim": run_cfg.optim.model_copy(update={"epochs": 12}),
        "output_dir": str(root / "runs"),
    })
    rows = run_ablation(run_cfg, train_set, val_set, presets=["base", "full"], seeds=[0, 1, 2])
    return {"out": root / "runs", "cfg": run_cfg, "rows": rows, "train": train_set, "val": val_set}


class TestDeskScale:
    def test_split(self, desk_ablation):
        assert len(desk_ablation["train"]) == 64 and len(desk_ablation["val"]) == 32
        assert desk_ablation["cfg"].model.blocks == 4 and desk_ablation["cfg"].model.patch_size == 8

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_full_model_fits_training_set(self, desk_ablation, seed):
        lines = (desk_ablation["out"] / f"metrics-full-s{seed}.jsonl").read_text().splitlines()
        best = max(json.loads(line)["train_acc"] for line in lines)
        assert best >= 0.95

    def test_full_model_not_worse_than_base(self, desk_ablation):
        rows = {row.preset: row for row in desk_ablation["rows"]}
        assert rows["full"].val_acc >= rows["base"].val_acc
        assert rows["full"].delta >= 0.0
        table = json.loads((desk_ablation["out"] / "ablation.json").read_text())
        assert [row["preset"] for row in table] == ["base", "full"]

    def test_trained_model_stays_stable(self, desk_ablation):
        model = HeteroGraphNet(desk_ablation["cfg"].model.with_ablation("full"))
        model.load_state_dict(load_checkpoint(desk_ablation["out"] / "best-full-s0.hgfx"))
        assert model.check_stability() < 1.0
