import math
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conceptrol.analysis import OracleMask, auc, normalize_map
from conceptrol.attention import AttentionBlockWeights
from conceptrol.control import ConceptrolConfig, MaskCache
from conceptrol.numerics import Prng
from conceptrol.toy import (
    CONCEPT_CHANNEL,
    CONCEPTROL,
    TEXT_ONLY,
    VANILLA,
    EngineConfig,
    LatentGrid,
    NoiseSchedule,
    build_instance,
    build_toy_denoiser,
    ddpm_step,
    denoiser_forward,
    generate,
    make_schedule,
    render_rgb,
)

ENGINE = EngineConfig()


class TestSchedule:
    def test_single_step(self):
        assert make_schedule(1, 0.5, 0.5).alpha_bar[0] == 0.5

    def test_two_steps(self):
        s = make_schedule(2, 0.1, 0.2)
        assert s.beta.tolist() == [0.1, 0.2]
        assert s.alpha_bar == pytest.approx([0.9, 0.72], abs=1e-15)

    def test_default_against_exact_product(self):
        s = make_schedule(50, 1e-4, 0.02)
        acc = Fraction(1)
        for b in s.beta:
            acc *= 1 - Fraction(float(b))
        assert abs(s.alpha_bar[-1] - float(acc)) <= 1e-12

    def test_invariants(self):
        s = make_schedule()
        assert s.total_steps == 50
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert s.alpha_bar[0] == pytest.approx(1.0, abs=1e-3)
        for i in range(1, 50):
            assert s.alpha_bar[i] == s.alpha_bar[i - 1] * s.alpha[i]
        assert np.array_equal(s.sigma, s.beta)

    @pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            make_schedule(*args)


class TestRender:
    def test_black(self):
        assert np.array_equal(render_rgb(LatentGrid(2, 2, np.zeros((4, 4)))), np.zeros((2, 2, 3), np.uint8))

    def test_half_rounds_up(self):
        assert np.all(render_rgb(LatentGrid(1, 1, np.full((1, 3), 0.5))) == 128)

    def test_clamp(self):
        out = render_rgb(LatentGrid(1, 2, np.array([[1.7, -0.2, 1.0], [0.0, 0.25, 2.0]])))
        assert out.tolist() == [[[255, 0, 255], [0, 64, 255]]]

    def test_too_few_channels(self):
        with pytest.raises(ValueError):
            render_rgb(LatentGrid(1, 1, np.zeros((1, 2))))


class TestPlantedConstruction:
    @pytest.mark.parametrize("mode", ["direct", "mm"])
    @pytest.mark.parametrize("seed", [0, 5])
    def test_concept_logit_margin(self, mode, seed):
        d, cond = build_instance(ENGINE, mode, seed)
        w = d.blocks[ENGINE.planted_block]
        region = ENGINE.region_mask()
        for h in range(w.heads):
            q = d.latent_tokens @ w.w_q[h] + w.query_offset[h]
            k = cond.concept_tokens @ w.w_k[h]
            logits = q @ k.T / math.sqrt(w.head_dim)
            assert np.array_equal(logits, np.where(region, ENGINE.delta, 0.0)[:, None].repeat(cond.num_concept, 1))

    def test_weights_are_seeded(self):
        a = build_toy_denoiser(ENGINE, "direct", 1)
        b = build_toy_denoiser(ENGINE, "direct", 1)
        c = build_toy_denoiser(ENGINE, "direct", 2)
        assert np.array_equal(a.blocks[0].w_q, b.blocks[0].w_q)
        assert not np.array_equal(a.blocks[0].w_q, c.blocks[0].w_q)

    @pytest.mark.parametrize(
        "change", [{"channels": 4}, {"channels": 9}, {"planted_block": 6}, {"region": (0, 0, 16, 16)}, {"region": (10, 10, 8, 8)}]
    )
    def test_bad_engine(self, change):
        with pytest.raises(ValueError, match="engine"):
            build_toy_denoiser(replace(ENGINE, **change))

    def test_mm_uses_one_image_token_per_position(self):
        _, cond = build_instance(ENGINE, "mm", 0)
        assert cond.image_tokens.shape[0] == ENGINE.positions


def zero_value_denoiser(d):
    blocks = tuple(
        AttentionBlockWeights(w.block_id, w.w_q, w.w_k, np.zeros_like(w.w_v), w.query_offset) for w in d.blocks
    )
    return replace(d, blocks=blocks)


class TestDenoiserForward:
    def test_zero_target_closed_form(self):
        d, cond = build_instance(ENGINE, "direct", 0)
        d = zero_value_denoiser(d)
        s = make_schedule()
        x = Prng(1).normal_matrix(d.positions, d.channels)
        eps, rec = denoiser_forward(x, 30, cond, ConceptrolConfig(), d, MaskCache(d.positions), s, TEXT_ONLY)
        assert np.array_equal(rec.target, np.zeros_like(x))
        assert np.array_equal(eps, x / math.sqrt(1 - s.alpha_bar[29]))

    @pytest.mark.parametrize("mode", ["direct", "mm"])
    def test_vanilla_lambda_zero_is_text_only(self, mode):
        d, cond = build_instance(ENGINE, mode, 0)
        s = make_schedule()
        x = Prng(1).normal_matrix(d.positions, d.channels)
        cfg = ConceptrolConfig(lam=0.0, mode=mode)
        a, _ = denoiser_forward(x, 20, cond, cfg, d, MaskCache(d.positions, mode), s, VANILLA)
        b, _ = denoiser_forward(x, 20, cond, cfg, d, MaskCache(d.positions, mode), s, TEXT_ONLY)
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("mode", ["direct", "mm"])
    def test_planted_mask_auc(self, mode):
        d, cond = build_instance(ENGINE, mode, 3)
        s = make_schedule()
        x = Prng(3).normal_matrix(d.positions, d.channels)
        _, rec = denoiser_forward(x, 50, cond, ConceptrolConfig(mode=mode), d, MaskCache(d.positions, mode), s)
        assert auc(normalize_map(rec.mask.values).values, OracleMask(ENGINE.region_mask())) >= 0.95

    def test_mode_mismatch(self):
        d, cond = build_instance(ENGINE, "direct", 0)
        x = np.zeros((d.positions, d.channels))
        with pytest.raises(ValueError):
            denoiser_forward(x, 1, cond, ConceptrolConfig(mode="mm"), d, MaskCache(d.positions), make_schedule())


def eq2_oracle(x, eps, beta, alpha_bar):
    """Posterior-mean form with the x0 estimate, algebraically equal to the noise form."""
    alpha = 1 - beta
    alpha_bar_prev = alpha_bar / alpha
    x0 = (x - math.sqrt(1 - alpha_bar) * eps) / math.sqrt(alpha_bar)
    c0 = math.sqrt(alpha_bar_prev) * beta / (1 - alpha_bar)
    ct = math.sqrt(alpha) * (1 - alpha_bar_prev) / (1 - alpha_bar)
    return c0 * x0 + ct * x


def scalar_schedule(beta, alpha_bar):
    return NoiseSchedule(np.array([beta]), np.array([1 - beta]), np.array([alpha_bar]))


class TestDDPM:
    def test_zero_eps_small_beta(self):
        s = make_schedule(2, 1e-8, 1e-8)
        x = np.array([[0.7, -1.2]])
        assert ddpm_step(x, 1, np.zeros_like(x), s) == pytest.approx(x, abs=1e-8)

    def test_hand_values(self):
        out = ddpm_step(np.array([1.0]), 1, np.array([1.0]), scalar_schedule(0.01, 0.9))
        assert out[0] == pytest.approx((1 - 0.01 / math.sqrt(0.1)) / math.sqrt(0.99), abs=1e-15)

    @given(
        st.floats(1e-4, 0.3), st.floats(0.05, 0.99), st.floats(-3, 3), st.floats(-3, 3)
    )
    def test_against_posterior_form(self, beta, frac, x, eps):
        alpha_bar = (1 - beta) * frac
        out = ddpm_step(np.array([x]), 1, np.array([eps]), scalar_schedule(beta, alpha_bar))
        assert abs(out[0] - eq2_oracle(x, eps, beta, alpha_bar)) <= 1e-12

    def test_noise_from_prng(self):
        s = make_schedule(5)
        x, e = np.ones((2, 3)), np.full((2, 3), 0.5)
        mean = ddpm_step(x, 1, e, replace(s, beta=s.beta[2:3], alpha=s.alpha[2:3], alpha_bar=s.alpha_bar[2:3]))
        out = ddpm_step(x, 3, e, s, Prng(9))
        z = Prng(9).gaussians(6).reshape(2, 3)
        assert np.array_equal(out, mean + math.sqrt(s.beta[2]) * z)

    def test_noise_requires_prng(self):
        with pytest.raises(ValueError):
            ddpm_step(np.ones(2), 2, np.ones(2), make_schedule(3))


class TestGenerate:
    @pytest.mark.parametrize("mode", ["direct", "mm"])
    def test_reproducible(self, mode):
        d, cond = build_instance(ENGINE, mode, 4)
        cfg = ConceptrolConfig(mode=mode)
        a, ta = generate(cond, cfg, d, make_schedule(), 4)
        b, tb = generate(cond, cfg, d, make_schedule(), 4)
        assert np.array_equal(a.data, b.data)
        assert all(np.array_equal(p, q) for p, q in zip(ta.latents, tb.latents))

    @pytest.mark.parametrize("mode", ["direct", "mm"])
    def test_full_warmup_is_text_only(self, mode):
        d, cond = build_instance(ENGINE, mode, 1)
        s = make_schedule()
        a, _ = generate(cond, ConceptrolConfig(warmup_ratio=1.0, mode=mode), d, s, 1)
        b, _ = generate(cond, ConceptrolConfig(mode=mode), d, s, 1, variant=TEXT_ONLY)
        assert np.array_equal(a.data, b.data)

    def test_text_only_converges(self):
        d, cond = build_instance(ENGINE, "direct", 2)
        x, trace = generate(cond, ConceptrolConfig(), d, make_schedule(), 2, variant=TEXT_ONLY)
        assert np.max(np.abs(x.data - trace.targets[-1])) <= 0.05

    def test_trace_shape(self):
        d, cond = build_instance(ENGINE, "mm", 0)
        _, trace = generate(cond, ConceptrolConfig(mode="mm"), d, make_schedule(6), 0)
        assert trace.timesteps == [6, 5, 4, 3, 2, 1]
        for name in ("latents", "injected", "targets", "text_maps", "image_scores", "masks"):
            assert len(getattr(trace, name)) == 6
        for per_block in trace.text_maps:
            for maps in per_block:
                assert maps.shape == (ENGINE.heads, ENGINE.positions, ENGINE.text_tokens)

    def test_concept_channel_tracks_region(self):
        d, cond = build_instance(ENGINE, "direct", 0)
        x, _ = generate(cond, ConceptrolConfig(), d, make_schedule(), 0, variant=TEXT_ONLY)
        region = ENGINE.region_mask()
        assert x.data[region, CONCEPT_CHANNEL].min() > 0.5 > x.data[~region, CONCEPT_CHANNEL].max()

    @pytest.mark.parametrize("mode", ["direct", "mm"])
    def test_leakage_lower_than_vanilla(self, mode):
        d, cond = build_instance(ENGINE, mode, 0)
        s = make_schedule()
        cfg = ConceptrolConfig(mode=mode)
        ref, _ = generate(cond, cfg, d, s, 0, variant=TEXT_ONLY)
        outside = ~ENGINE.region_mask()
        leak = {}
        for v in (VANILLA, CONCEPTROL):
            x, _ = generate(cond, cfg, d, s, 0, variant=v)
            leak[v] = np.abs(x.data - ref.data).mean(axis=1)[outside].mean()
        assert leak[CONCEPTROL] < leak[VANILLA]

    @pytest.mark.parametrize("mode", ["direct", "mm"])
    def test_planted_auc_every_step_after_first(self, mode):
        d, cond = build_instance(ENGINE, mode, 6)
        _, trace = generate(cond, ConceptrolConfig(mode=mode), d, make_schedule(), 6, variant=CONCEPTROL)
        oracle = OracleMask(ENGINE.region_mask())
        start, end = cond.concept_span
        for per_block in trace.text_maps[1:]:
            reduced = per_block[ENGINE.planted_block][:, :, start:end].mean(axis=(0, 2))
            assert auc(normalize_map(reduced).values, oracle) >= 0.95
