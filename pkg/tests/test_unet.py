"""Configurable epsilon-prediction U-Net with per-plan conv dispatch."""

from __future__ import annotations

import hashlib
import math

import numpy as np
import pytest

from rescalekit.errors import ConfigError, DimensionError, ParameterError
from rescalekit.plans import AdaptationPlan, RedilatedSpec, resolve_operators
from rescalekit.tensorcore import footprint_width, impulse_response
from rescalekit.unet import (
    AttentionParams,
    UNet,
    UNetConfig,
    WeightStore,
    apply_adapted_conv,
    attn_logit_scale,
    attn_scale_baseline,
    init_toy_weights,
    plain_attention,
    redilated_attention,
    required_entries,
    timestep_embedding,
)
from rescalekit.tensorcore import Kernel


@pytest.fixture(scope="module")
def cfg():
    return UNetConfig()


@pytest.fixture(scope="module")
def net(cfg):
    return UNet(init_toy_weights(cfg, seed=11))


@pytest.fixture(scope="module")
def latent():
    rng = np.random.default_rng(8)
    return rng.standard_normal((1, 4, 32, 32), dtype=np.float32)


def make_attn_params(c=16, groups=8, seed=0):
    rng = np.random.default_rng(seed)
    ortho = lambda: np.linalg.qr(rng.standard_normal((c, c)))[0].astype(np.float32)
    return AttentionParams(
        gn_weight=np.ones(c, np.float32),
        gn_bias=np.zeros(c, np.float32),
        wq=ortho(), wk=ortho(), wv=ortho(), wout=ortho(),
        bout=np.zeros(c, np.float32),
        groups=groups,
    )


def reference_attention(x, p, scale=1.0):
    """Dense float64 softmax attention oracle with residual."""
    n, c, H, W = x.shape
    g = x.reshape(n, p.groups, c // p.groups, H, W).astype(np.float64)
    mean = g.mean(axis=(2, 3, 4), keepdims=True)
    var = g.var(axis=(2, 3, 4), keepdims=True)
    normed = ((g - mean) / np.sqrt(var + 1e-5)).reshape(n, c, H, W)
    normed = normed * p.gn_weight[None, :, None, None] + p.gn_bias[None, :, None, None]
    t = normed.reshape(n, c, H * W).transpose(0, 2, 1)
    q = t @ p.wq.astype(np.float64).T
    k = t @ p.wk.astype(np.float64).T
    v = t @ p.wv.astype(np.float64).T
    logits = q @ k.transpose(0, 2, 1) * (c ** -0.5) * scale
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    attn = e / e.sum(axis=-1, keepdims=True)
    out = (attn @ v) @ p.wout.astype(np.float64).T + p.bout
    return x + out.transpose(0, 2, 1).reshape(n, c, H, W).astype(np.float32)


class TestTimestepEmbedding:
    def test_t0_frozen(self):
        emb = timestep_embedding(0, 8)
        np.testing.assert_array_equal(emb, [0, 0, 0, 0, 1, 1, 1, 1])

    def test_frozen_values(self):
        emb = timestep_embedding(10, 4)
        want = [math.sin(10.0), math.sin(0.1), math.cos(10.0), math.cos(0.1)]
        np.testing.assert_allclose(emb, want, rtol=1e-6)

    def test_distinct_timesteps_distinct_embeddings(self):
        a, b = timestep_embedding(3, 32), timestep_embedding(4, 32)
        assert not np.array_equal(a, b)


class TestConfigValidation:
    def test_defaults(self, cfg):
        assert cfg.base_channels == 32
        assert cfg.channel_mults == (1, 2, 4)
        assert cfg.attention_levels == (2,)
        assert cfg.groups == 8

    def test_block_names(self, cfg):
        assert cfg.block_names() == ("DB0", "DB1", "DB2", "MB", "UB0", "UB1", "UB2")

    def test_four_level_names(self):
        cfg = UNetConfig(channel_mults=(1, 2, 2, 4))
        assert "DB3" in cfg.block_names() and "UB3" in cfg.block_names()

    def test_invalid_configs(self):
        with pytest.raises(ConfigError):
            UNetConfig(channel_mults=())
        with pytest.raises(ConfigError):
            UNetConfig(channel_mults=(1,) * 5)
        with pytest.raises(ConfigError):
            UNetConfig(base_channels=30, groups=8)
        with pytest.raises(ConfigError):
            UNetConfig(attention_levels=(7,))


class TestWeights:
    def test_init_deterministic(self, cfg):
        a = init_toy_weights(cfg, seed=3)
        b = init_toy_weights(cfg, seed=3)
        assert list(a.entries) == list(b.entries)
        for path in a.entries:
            np.testing.assert_array_equal(a.entries[path], b.entries[path])

    def test_entries_match_layout(self, cfg):
        store = init_toy_weights(cfg, seed=3)
        layout = required_entries(cfg)
        assert list(store.entries) == list(layout)
        for path, shape in layout.items():
            assert store.entries[path].shape == shape

    def test_conv_rows_orthonormal(self, cfg):
        store = init_toy_weights(cfg, seed=3)
        w = store.entries["MB.resnets.0.conv1.weight"]
        flat = w.reshape(w.shape[0], -1).astype(np.float64)
        np.testing.assert_allclose(flat @ flat.T, np.eye(w.shape[0]), atol=1e-5)

    def test_norm_affine_is_identity_at_init(self, cfg):
        store = init_toy_weights(cfg, seed=3)
        np.testing.assert_array_equal(store.entries["norm_out.weight"], np.ones(32, np.float32))
        np.testing.assert_array_equal(store.entries["norm_out.bias"], np.zeros(32, np.float32))

    def test_store_round_trip(self, cfg, tmp_path):
        store = init_toy_weights(cfg, seed=5)
        path = tmp_path / "weights.dten"
        store.save(path)
        back = WeightStore.load(path)
        assert back.config == cfg
        assert list(back.entries) == list(store.entries)
        for k in store.entries:
            np.testing.assert_array_equal(back.entries[k], store.entries[k])

    def test_missing_entry_rejected(self, cfg):
        store = init_toy_weights(cfg, seed=5)
        broken = dict(store.entries)
        del broken["MB.resnets.0.conv1.weight"]
        with pytest.raises(ConfigError):
            UNet(WeightStore(entries=broken, config=cfg))

    def test_extra_entry_rejected(self, cfg):
        store = init_toy_weights(cfg, seed=5)
        extra = dict(store.entries)
        extra["MB.resnets.9.conv9.weight"] = np.zeros((1, 1, 3, 3), np.float32)
        with pytest.raises(ConfigError):
            UNet(WeightStore(entries=extra, config=cfg))


class TestAdaptedConvDispatch:
    def plan(self, **kw):
        args = dict(redilated=(RedilatedSpec("MB", 2.0),), tau=30, steps=50)
        args.update(kw)
        return AdaptationPlan(**args)

    def test_footprint_widens_before_tau(self):
        k = Kernel(np.random.default_rng(0).standard_normal((1, 1, 3, 3), dtype=np.float32))
        resp = impulse_response(
            lambda h: apply_adapted_conv(h, k, "MB", 5, self.plan()), extent=11
        )
        assert footprint_width(resp) == (5, 5)

    def test_footprint_reverts_after_tau(self):
        k = Kernel(np.random.default_rng(0).standard_normal((1, 1, 3, 3), dtype=np.float32))
        resp = impulse_response(
            lambda h: apply_adapted_conv(h, k, "MB", 40, self.plan()), extent=11
        )
        assert footprint_width(resp) == (3, 3)

    def test_unlisted_block_never_adapted(self):
        k = Kernel(np.random.default_rng(0).standard_normal((1, 1, 3, 3), dtype=np.float32))
        resp = impulse_response(
            lambda h: apply_adapted_conv(h, k, "DB0", 5, self.plan()), extent=11
        )
        assert footprint_width(resp) == (3, 3)

    def test_dispersed_block_requires_operator(self):
        plan = AdaptationPlan.from_dict({"dispersed": [{"block": "MB", "d": 2.0}], "tau": 30})
        k = Kernel(np.ones((1, 1, 3, 3), np.float32))
        h = np.zeros((1, 1, 8, 8), np.float32)
        with pytest.raises(ConfigError):
            apply_adapted_conv(h, k, "MB", 5, plan)

    def test_dispersed_dispatch_uses_enlarged_kernel(self):
        plan = AdaptationPlan.from_dict({"dispersed": [{"block": "MB", "d": 2.0}], "tau": 30})
        ops = resolve_operators(plan)
        k = Kernel(np.random.default_rng(1).standard_normal((1, 1, 3, 3), dtype=np.float32))
        resp = impulse_response(
            lambda h: apply_adapted_conv(h, k, "MB", 5, plan, operators=ops), extent=11
        )
        w, hgt = footprint_width(resp)
        assert w <= 5 and hgt <= 5
        resp_off = impulse_response(
            lambda h: apply_adapted_conv(h, k, "MB", 45, plan, operators=ops), extent=11
        )
        assert footprint_width(resp_off) == (3, 3)


class TestAttention:
    def test_matches_dense_oracle(self):
        p = make_attn_params()
        x = np.random.default_rng(2).standard_normal((1, 16, 6, 6), dtype=np.float32)
        np.testing.assert_allclose(plain_attention(x, p), reference_attention(x, p), atol=1e-5)

    def test_constant_input_stays_constant(self):
        p = make_attn_params()
        x = np.full((1, 16, 8, 8), 0.3, dtype=np.float32)
        out = redilated_attention(x, 2, p)
        spread = out.max(axis=(2, 3)) - out.min(axis=(2, 3))
        assert np.max(spread) < 1e-5

    def test_d1_is_plain_attention_bitwise(self):
        p = make_attn_params()
        x = np.random.default_rng(3).standard_normal((1, 16, 8, 8), dtype=np.float32)
        np.testing.assert_array_equal(redilated_attention(x, 1, p), plain_attention(x, p))

    def test_slice_independence_is_exact(self):
        p = make_attn_params()
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 16, 8, 8), dtype=np.float32)
        y = x.copy()
        y[:, :, 0::2, 0::2] = rng.standard_normal((1, 16, 4, 4), dtype=np.float32)
        a, b = redilated_attention(x, 2, p), redilated_attention(y, 2, p)
        for dy, dx in [(0, 1), (1, 0), (1, 1)]:
            np.testing.assert_array_equal(
                a[:, :, dy::2, dx::2], b[:, :, dy::2, dx::2]
            )

    def test_slice_token_counts(self):
        """d=2 on an 8x8 map attends within 4 slices of 16 tokens, so each
        slice sees 16^2 token pairs, 1/d^4 of the full map's 64^2."""
        assert (8 // 2) * (8 // 2) == 16
        assert (16 ** 2) * (2 ** 4) == 64 ** 2

    def test_indivisible_dims_rejected(self):
        p = make_attn_params()
        x = np.zeros((1, 16, 7, 8), np.float32)
        with pytest.raises(DimensionError):
            redilated_attention(x, 2, p)

    def test_scale_baseline_identity_when_tokens_match(self):
        p = make_attn_params()
        x = np.random.default_rng(5).standard_normal((1, 16, 6, 6), dtype=np.float32)
        np.testing.assert_array_equal(
            attn_scale_baseline(x, p, trained_tokens=36, current_tokens=36),
            plain_attention(x, p),
        )

    def test_scale_monotone_in_current_tokens(self):
        scales = [attn_logit_scale(64, t) for t in (64, 128, 256, 1024)]
        assert all(a < b for a, b in zip(scales, scales[1:]))
        assert scales[0] == 1.0

    def test_scale_baseline_matches_oracle(self):
        p = make_attn_params()
        x = np.random.default_rng(6).standard_normal((1, 16, 16, 16), dtype=np.float32)
        scale = attn_logit_scale(64, 256)
        assert scale == pytest.approx(math.sqrt(math.log(256) / math.log(64)))
        np.testing.assert_allclose(
            attn_scale_baseline(x, p, 64, 256),
            reference_attention(x, p, scale=scale),
            atol=1e-5,
        )


class TestForward:
    def test_output_shape(self, net, latent):
        out = net.forward(latent, step=0)
        assert out.shape == latent.shape
        assert out.dtype == np.float32

    def test_empty_plan_equals_all_factor_one_plan(self, net, latent):
        ones = AdaptationPlan(
            redilated=tuple(RedilatedSpec(b, 1.0) for b in ("DB2", "MB", "UB0")), tau=30
        )
        np.testing.assert_array_equal(
            net.forward(latent, step=3), net.forward(latent, step=3, plan=ones)
        )

    def test_deterministic_across_runs_and_thread_env(self, net, latent, monkeypatch):
        digests = set()
        for threads in ("1", "2", "8"):
            monkeypatch.setenv("RESCALEKIT_THREADS", threads)
            out = net.forward(latent, step=7, cond=1)
            digests.add(hashlib.sha256(out.tobytes()).hexdigest())
        assert len(digests) == 1

    def test_plan_changes_output(self, net, latent):
        plan = AdaptationPlan(redilated=(RedilatedSpec("MB", 2.0),), tau=30)
        base = net.forward(latent, step=0)
        adapted = net.forward(latent, step=0, plan=plan)
        assert not np.array_equal(base, adapted)

    def test_plan_locality(self, net, latent):
        """Adapting MB must leave everything upstream untouched and only
        perturb downstream activations."""
        plan = AdaptationPlan(redilated=(RedilatedSpec("MB", 2.0),), tau=30)
        rec_base: dict = {}
        rec_plan: dict = {}
        net.forward(latent, step=0, record=rec_base)
        net.forward(latent, step=0, plan=plan, record=rec_plan)
        for name in ("conv_in", "DB0", "DB1", "DB2"):
            np.testing.assert_array_equal(rec_base[name], rec_plan[name])
        assert not np.array_equal(rec_base["MB"], rec_plan["MB"])
        assert not np.array_equal(rec_base["UB0"], rec_plan["UB0"])

    def test_adaptation_inactive_past_tau(self, net, latent):
        plan = AdaptationPlan(redilated=(RedilatedSpec("MB", 2.0),), tau=10)
        np.testing.assert_array_equal(
            net.forward(latent, step=20), net.forward(latent, step=20, plan=plan)
        )

    def test_conditioning_changes_output(self, net, latent):
        uncond = net.forward(latent, step=0)
        cond0 = net.forward(latent, step=0, cond=0)
        cond1 = net.forward(latent, step=0, cond=1)
        assert not np.array_equal(uncond, cond0)
        assert not np.array_equal(cond0, cond1)

    def test_cond_out_of_range(self, net, latent):
        with pytest.raises(ParameterError):
            net.forward(latent, step=0, cond=99)

    def test_unknown_block_for_this_config(self, net, latent):
        plan = AdaptationPlan(redilated=(RedilatedSpec("DB3", 2.0),), tau=30)
        with pytest.raises(ConfigError):
            net.forward(latent, step=0, plan=plan)

    def test_indivisible_spatial_dims(self, net):
        x = np.zeros((1, 4, 30, 32), np.float32)
        with pytest.raises(DimensionError):
            net.forward(x, step=0)

    def test_fractional_plan_runs(self, net, latent):
        plan = AdaptationPlan(redilated=(RedilatedSpec("MB", 2.5),), tau=30)
        out = net.forward(latent, step=0, plan=plan)
        assert out.shape == latent.shape

    def test_dispersed_plan_runs(self, net, latent):
        plan = AdaptationPlan.from_dict({"dispersed": [{"block": "MB", "d": 2.0}], "tau": 30})
        ops = resolve_operators(plan)
        out = net.forward(latent, step=0, plan=plan, operators=ops)
        assert out.shape == latent.shape
        assert not np.array_equal(out, net.forward(latent, step=0))

    def test_attention_plan_gated_by_tau(self, net, latent):
        plan = AdaptationPlan(attention_d=2, tau=10)
        early = net.forward(latent, step=0, plan=plan)
        late = net.forward(latent, step=15, plan=plan)
        assert not np.array_equal(early, net.forward(latent, step=0))
        np.testing.assert_array_equal(late, net.forward(latent, step=15))
