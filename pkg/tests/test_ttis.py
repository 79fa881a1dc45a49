import pytest
import torch

from ttedit.diffusion import SamplerConfig, sample_trajectory
from ttedit.errors import ConfigError, ParameterError, UnsupportedError
from ttedit.ttis import (
    InversionMode,
    OptimizerConfig,
    early_stop_threshold,
    finetune_timestep,
    reconstruct,
    run_ttis,
)

from conftest import ConstantEpsBackbone

STEPS = 8
SAMPLER = SamplerConfig(guidance_scale=7.5, steps=STEPS)


@pytest.fixture(scope="module")
def z0(tiny_toy):
    return torch.rand(tiny_toy.latent_shape, generator=torch.Generator().manual_seed(0))


@pytest.fixture(scope="module")
def tt_run(tiny_toy, z0):
    return run_ttis(z0, "red circle on blue", tiny_toy, SAMPLER, OptimizerConfig(learning_rate=0.01))


class TestThreshold:
    def test_values(self):
        assert early_stop_threshold(1) == 1e-5
        assert early_stop_threshold(7, 2e-5) == pytest.approx(1.4e-4)

    def test_monotone(self):
        vals = [early_stop_threshold(i) for i in range(1, 60)]
        assert all(b > a for a, b in zip(vals, vals[1:]))

    def test_counter_starts_at_one(self):
        with pytest.raises(ParameterError):
            early_stop_threshold(0)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"learning_rate": -1}, {"learning_rate": float("inf")}, {"inner_iterations": -1},
                                    {"total_budget": -2}, {"threshold_index": "sideways"}])
    def test_rejects(self, kw):
        with pytest.raises(ParameterError):
            OptimizerConfig(**kw)

    def test_inversion_condition_validated(self, tiny_toy, z0):
        with pytest.raises(ConfigError):
            run_ttis(z0, "red circle", tiny_toy, SAMPLER, inversion_condition="other")

    def test_needs_gradients(self, z0):
        class NoGrad(ConstantEpsBackbone):
            supports_gradient_wrt_embedding = False

        b = NoGrad(latent_shape=tuple(z0.shape))
        with pytest.raises(UnsupportedError):
            run_ttis(z0, "a b", b, SAMPLER)


class TestSchedule:
    def test_shapes_and_bookkeeping(self, tt_run, tiny_toy):
        s = tt_run.schedule
        assert len(s) == STEPS and s.mode == InversionMode.TARGET_TEXT
        assert all(e.shape == tiny_toy.null_embedding.shape for e in s.embeddings)
        assert torch.equal(s.fixed.tokens, tiny_toy.null_embedding.tokens)
        assert s.cond() is s.embeddings and s.uncond() is s.fixed
        assert len(tt_run.inversion.latents) == len(tt_run.reconstruction.latents) == STEPS + 1
        assert tt_run.inversion.guidance_scale == 1.0

    def test_budget_and_early_stop_discipline(self, tt_run):
        s, opt = tt_run.schedule, OptimizerConfig()
        assert s.total_iterations <= opt.total_budget
        assert max(s.iterations_used) <= opt.inner_iterations
        for step, (used, loss) in enumerate(zip(s.iterations_used, s.per_step_loss), 1):
            if used < opt.inner_iterations:
                assert loss <= early_stop_threshold(step)

    def test_records_match_iterations(self, tt_run):
        s = tt_run.schedule
        assert len(tt_run.records) == s.total_iterations
        for r in tt_run.records:
            assert r.loss > r.threshold and r.mode == "target-text"
            assert r.threshold == pytest.approx(early_stop_threshold(r.step))
            assert 1 <= r.inner_iter <= 5

    def test_reconstruct_matches_internal_trajectory(self, tt_run, tiny_toy):
        traj, image = reconstruct(tt_run.schedule, tt_run.inversion.z_T, tiny_toy, SAMPLER)
        assert torch.equal(traj.stacked(), tt_run.reconstruction.stacked())
        assert image.dtype.name == "uint8"

    def test_reconstruct_length_mismatch(self, tt_run, tiny_toy):
        with pytest.raises(ConfigError):
            reconstruct(tt_run.schedule, tt_run.inversion.z_T, tiny_toy, SamplerConfig(steps=STEPS + 1))

    def test_optimization_improves_on_initial_pass(self, tt_run):
        target = tt_run.inversion.z_0
        rec = float((tt_run.reconstruction.z_0 - target).square().mean())
        init = float((tt_run.initial.z_0 - target).square().mean())
        assert rec < init


class TestModes:
    def test_null_text_baseline_optimizes_unconditional(self, tiny_toy, z0):
        res = run_ttis(z0, "red circle on blue", tiny_toy, SAMPLER, OptimizerConfig(learning_rate=0.01),
                       mode="null-text")
        s = res.schedule
        phi = tiny_toy.encode_text("red circle on blue")
        assert s.mode == InversionMode.NULL_TEXT
        assert torch.equal(s.fixed.tokens, phi.tokens)
        assert s.cond() is s.fixed and s.uncond() is s.embeddings
        traj, _ = reconstruct(s, res.inversion.z_T, tiny_toy, SAMPLER)
        assert torch.equal(traj.stacked(), res.reconstruction.stacked())

    def test_zero_learning_rate_keeps_target_and_initial_pass(self, tiny_toy, z0):
        res = run_ttis(z0, "green square", tiny_toy, SAMPLER, OptimizerConfig(learning_rate=0.0))
        phi = tiny_toy.encode_text("green square")
        assert all(torch.equal(e.tokens, phi.tokens) for e in res.schedule.embeddings)
        assert torch.equal(res.reconstruction.stacked(), res.initial.stacked())

    def test_budget_is_a_hard_cap(self, tiny_toy, z0):
        opt = OptimizerConfig(learning_rate=1e-4, total_budget=7, threshold_coefficient=0.0)
        res = run_ttis(z0, "green square", tiny_toy, SAMPLER, opt)
        assert res.schedule.iterations_used == [5, 2] + [0] * (STEPS - 2)

    def test_budget_can_be_lifted(self, tiny_toy, z0):
        opt = OptimizerConfig(learning_rate=1e-4, total_budget=7, threshold_coefficient=0.0, enforce_budget=False)
        res = run_ttis(z0, "green square", tiny_toy, SAMPLER, opt)
        assert res.schedule.total_iterations == 5 * STEPS

    def test_literal_threshold_index(self, tiny_toy, z0):
        res = run_ttis(z0, "green square", tiny_toy, SamplerConfig(steps=4),
                       OptimizerConfig(threshold_index="literal", threshold_coefficient=1e-9))
        # the literal counter is the timestep index: T at the first step, 1 at the last
        assert {r.step: r.threshold for r in res.records} == pytest.approx({1: 4e-9, 2: 3e-9, 3: 2e-9, 4: 1e-9})

    def test_fixed_point_on_exactly_invertible_backbone(self, const_backbone):
        g = torch.Generator().manual_seed(4)
        cfg = SamplerConfig(guidance_scale=1.0, steps=20)
        phi = const_backbone.encode_text("red circle")
        z0 = sample_trajectory(torch.randn(const_backbone.latent_shape, generator=g), phi, const_backbone, cfg).z_0
        res = run_ttis(z0, phi, const_backbone, cfg)
        assert res.schedule.total_iterations == 0
        assert all(e is phi for e in res.schedule.embeddings)


def test_finetune_step_reinitializes(tiny_toy, z0):
    """Two calls from the same start give identical results: no optimizer state leaks across steps."""
    phi, null = tiny_toy.encode_text("white triangle"), tiny_toy.null_embedding
    target = torch.zeros(tiny_toy.latent_shape)
    args = (1, z0, target, phi, null, tiny_toy, SAMPLER, OptimizerConfig(learning_rate=0.01), "target-text", 1)
    a, b = finetune_timestep(*args), finetune_timestep(*args)
    assert a.iterations == b.iterations == 5
    assert torch.equal(a.embedding.tokens, b.embedding.tokens)
    assert not torch.equal(a.embedding.tokens, phi.tokens)
