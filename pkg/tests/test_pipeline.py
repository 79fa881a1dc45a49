import numpy as np
import pytest

from ttedit.backbone.toy import ToyBackbone, ToyBackboneConfig, train_toy_backbone
from ttedit.diffusion import SamplerConfig
from ttedit.errors import ConfigError
from ttedit.pipeline import (
    BudgetViolation,
    JobConfig,
    bench,
    bundled_weights,
    default_toy,
    invert_image,
    load_toy,
    mismatch_suite,
    save_toy,
)
from ttedit.ttis import OptimizerConfig

from conftest import TINY


def test_bundled_weights_present_and_trained(toy):
    assert bundled_weights().exists()
    assert toy.loss_curve and toy.loss_curve[-1][1] < toy.loss_curve[0][1]
    assert toy.config.latent_shape == (4, 16, 16)


def test_save_load_round_trip(tiny_toy, tmp_path):
    path = save_toy(tiny_toy, tmp_path / "w.brtc")
    assert load_toy(path).weights_digest() == tiny_toy.weights_digest()


def test_non_default_config_needs_training(monkeypatch, tmp_path):
    monkeypatch.setenv("TTEDIT_CACHE_DIR", str(tmp_path))
    with pytest.raises(ConfigError):
        default_toy(TINY, train_if_missing=False)
    save_toy(ToyBackbone(TINY), tmp_path / f"toy-{TINY.digest()}.brtc")
    assert default_toy(TINY, train_if_missing=False).config == TINY


def test_mismatch_suite_is_deterministic():
    a, b = mismatch_suite(6), mismatch_suite(6)
    assert [c.prompt for c in a] == [c.prompt for c in b]
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a, b))
    assert all(x.source != x.target for x in a)


def test_job_requires_prompt():
    with pytest.raises(ConfigError):
        JobConfig(prompt="")


def test_invert_is_deterministic(toy):
    case = mismatch_suite(1)[0]
    job = JobConfig(prompt=case.prompt, sampler=SamplerConfig(steps=5), seed=7)
    a = invert_image(case.image, job, toy)
    b = invert_image(case.image, job, toy)
    assert a.to_bytes() == b.to_bytes()


class TestBench:
    def test_zero_learning_rate_curves_flat_and_equal(self, toy):
        rows, summary = bench(toy, n_cases=1, sampler_cfg=SamplerConfig(steps=4),
                              opt_cfg=OptimizerConfig(learning_rate=0.0))
        tt, nt = summary["modes"]["target-text"], summary["modes"]["null-text"]
        assert tt["mean_step_loss"] == nt["mean_step_loss"]
        assert tt["total_iterations"] == nt["total_iterations"]
        for mode in ("target-text", "null-text"):
            for step in range(1, 5):
                losses = {r["loss"] for r in rows if r["mode"] == mode and r["step"] == step}
                assert len(losses) <= 1

    def test_rows_match_iterations(self, toy):
        rows, summary = bench(toy, n_cases=2, sampler_cfg=SamplerConfig(steps=3))
        assert len(rows) == sum(m["total_iterations"] for m in summary["modes"].values())
        assert summary["budget_ok"] and 0 < summary["iteration_ratio"] <= 1.5

    def test_budget_violation_detected(self, toy, monkeypatch):
        import ttedit.pipeline as pl

        real = pl.run_ttis

        def overspend(*args, **kwargs):
            res = real(*args, **kwargs)
            res.schedule.iterations_used[0] = 6
            return res

        monkeypatch.setattr(pl, "run_ttis", overspend)
        with pytest.raises(BudgetViolation):
            bench(toy, n_cases=1, sampler_cfg=SamplerConfig(steps=2))


@pytest.mark.slow
def test_bundled_weights_are_reproducible():
    """Retraining the default config from scratch gives the bundled weights bit for bit."""
    retrained = train_toy_backbone(ToyBackboneConfig())
    assert retrained.weights_digest() == load_toy(bundled_weights()).weights_digest()
