import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from catsagg.aggregator import (
    AggregatorConfig,
    AggregatorParams,
    cats_forward,
    collapse_levels,
    parameter_shapes,
    project_appearance,
    transformer_agg,
)
from catsagg.correlation import CorrelationStack, FeatureStack, Orientation, build_correlation, resize_normalize
from catsagg.engine import Tape, Tensor, sum_
from catsagg.errors import ConfigurationError, UsageError

TOY = dict(h=2, w=2, p=2, channels=[3, 3], heads=2, depth=1, mlp_ratio=1.0)


def random_params(cfg, rng, scale=0.4):
    params = AggregatorParams.init(cfg, rng)
    for _, t in params.items():
        t.data = t.data + rng.normal(0.0, scale, t.shape)
    return params


def random_inputs(cfg, rng, lead=()):
    d_s = FeatureStack([rng.standard_normal((*lead, cfg.h, cfg.w, c)) for c in cfg.channels])
    d_t = FeatureStack([rng.standard_normal((*lead, cfg.h, cfg.w, c)) for c in cfg.channels])
    d_s, d_t = resize_normalize(d_s, (cfg.h, cfg.w)), resize_normalize(d_t, (cfg.h, cfg.w))
    return build_correlation(d_t, d_s), d_s, d_t


def test_parameter_shapes_of_paper_configuration():
    cfg = AggregatorConfig(h=16, w=16, p=128, channels=[1024, 2048], heads=6, depth=1)
    shapes = parameter_shapes(cfg)
    assert cfg.token_dim == 384 and cfg.token_dim // cfg.heads == 64
    assert shapes["pos_embed"] == (256, 384)
    assert shapes["proj.1.w"] == (2048, 128)
    assert shapes["blocks.0.attn_intra.wq"] == (384, 384)
    assert shapes["out.w"] == (384, 256)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        AggregatorConfig(h=2, w=2, p=3, channels=[2], heads=2)
    with pytest.raises(ConfigurationError):
        AggregatorConfig(channels=[])
    with pytest.raises(ConfigurationError):
        AggregatorConfig(depth=0)
    cfg = AggregatorConfig(**TOY)
    assert AggregatorConfig.from_dict(cfg.to_dict()) == cfg


def test_init_conventions(rng):
    params = AggregatorParams.init(AggregatorConfig(**TOY), rng)
    assert not params["out.w"].data.any() and not params["out.b"].data.any()
    np.testing.assert_array_equal(params["blocks.0.ln_intra_attn.gamma"].data, 1.0)
    assert not params["blocks.0.attn_inter.bq"].data.any()
    assert params["blocks.0.attn_inter.wq"].data.std() > 0


def test_projection_examples(rng):
    cfg = AggregatorConfig(h=2, w=3, p=4, channels=[4], heads=2)
    params = AggregatorParams.init(cfg, rng)
    zero = FeatureStack([np.zeros((2, 3, 4))])
    assert not project_appearance(zero, params, cfg).data.any()
    params["proj.0.w"].data = np.eye(4)
    feats = FeatureStack([rng.standard_normal((2, 3, 4))])
    np.testing.assert_array_equal(project_appearance(feats, params, cfg).data[0], feats.flat_level(0))


def test_projection_matches_affine_oracle(rng):
    cfg = AggregatorConfig(h=2, w=2, p=2, channels=[3, 5], heads=2)
    params = random_params(cfg, rng)
    feats = FeatureStack([rng.standard_normal((2, 2, c)) for c in cfg.channels])
    got = project_appearance(feats, params, cfg).data
    plist = oracles.tolist(params)
    for l in range(2):
        want = oracles.embed(feats.flat_level(l).tolist(), plist, l)
        np.testing.assert_allclose(got[l], want, atol=1e-12)


def test_projection_rejects_mismatched_features(rng):
    cfg = AggregatorConfig(**TOY)
    params = AggregatorParams.init(cfg, rng)
    with pytest.raises(ConfigurationError):
        project_appearance(FeatureStack([rng.standard_normal((2, 2, 4))] * 2), params, cfg)


def test_branches_zeroed_leave_input_plus_position(rng):
    cfg = AggregatorConfig(**TOY)
    params = random_params(cfg, rng)
    for name, t in params.items():
        if name.endswith((".wo", ".bo", ".w2", ".b2")):
            t.data = np.zeros_like(t.data)
    x = rng.standard_normal((2, cfg.hw, cfg.token_dim))
    out = transformer_agg(Tensor(x), params, cfg).data
    np.testing.assert_allclose(out, x + params["pos_embed"].data, atol=1e-15)


def test_single_level_inter_attention_is_value_output_path(rng):
    cfg = AggregatorConfig(h=2, w=2, p=2, channels=[3], heads=2, mlp_ratio=1.0)
    params = random_params(cfg, rng)
    x = rng.standard_normal((1, cfg.hw, cfg.token_dim))
    out = transformer_agg(Tensor(x), params, cfg).data
    want = oracles.transformer_agg(x.tolist(), oracles.tolist(params), 1, 2, cfg.ln_eps)
    np.testing.assert_allclose(out, want, atol=1e-10)


def test_transformer_agg_matches_loop_oracle(rng):
    cfg = AggregatorConfig(**TOY)
    for _ in range(5):
        params = random_params(cfg, rng)
        x = rng.standard_normal((2, cfg.hw, cfg.token_dim))
        got = transformer_agg(Tensor(x), params, cfg).data
        want = oracles.transformer_agg(x.tolist(), oracles.tolist(params), cfg.depth, cfg.heads, cfg.ln_eps)
        np.testing.assert_allclose(got, want, atol=1e-10)


def test_transformer_agg_depth_two_matches_oracle(rng):
    cfg = AggregatorConfig(**{**TOY, "depth": 2})
    params = random_params(cfg, rng)
    x = rng.standard_normal((2, cfg.hw, cfg.token_dim))
    got = transformer_agg(Tensor(x), params, cfg).data
    want = oracles.transformer_agg(x.tolist(), oracles.tolist(params), 2, cfg.heads, cfg.ln_eps)
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_cats_forward_matches_oracle(rng):
    cfg = AggregatorConfig(**TOY)
    params = random_params(cfg, rng)
    corr, d_s, d_t = random_inputs(cfg, rng)
    got = cats_forward(corr, d_s, d_t, params, cfg)
    assert got.orientation is Orientation.ROWS_SOURCE
    fs = [d_s.flat_level(l).tolist() for l in range(2)]
    ft = [d_t.flat_level(l).tolist() for l in range(2)]
    want = oracles.cats_forward(corr.maps.data.tolist(), fs, ft, oracles.tolist(params), 1, 2, cfg.ln_eps)
    np.testing.assert_allclose(got.maps.data, want, atol=1e-10)


def test_residual_identity_with_zero_output_map(rng):
    cfg = AggregatorConfig(**TOY)
    params = AggregatorParams.init(cfg, rng)
    corr, d_s, d_t = random_inputs(cfg, rng)
    out = cats_forward(corr, d_s, d_t, params, cfg)
    np.testing.assert_array_equal(out.maps.data, np.swapaxes(corr.maps.data, -1, -2))

    no_swap = AggregatorConfig(**{**TOY, "swap_on": False})
    out = cats_forward(corr, d_s, d_t, AggregatorParams.init(no_swap, rng), no_swap)
    assert out.orientation is Orientation.ROWS_TARGET
    np.testing.assert_array_equal(out.maps.data, corr.maps.data)


def test_both_passes_share_parameters(rng):
    cfg = AggregatorConfig(**TOY)
    params = random_params(cfg, rng)
    corr, d_s, d_t = random_inputs(cfg, rng)
    trace = {}
    with Tape() as tape:
        loss = sum_(cats_forward(corr, d_s, d_t, params, cfg, trace=trace).maps)
    tape.backward(loss)
    assert {k.split(".")[0] for k in trace} == {"stage1", "stage2"}
    # a single tensor per name, and both stages contribute to its gradient
    assert len(set(map(id, (t for _, t in params.items())))) == len(params)
    for name, t in params.items():
        assert t.grad is not None and t.grad.shape == t.shape, name


def test_rejects_source_rows(rng):
    cfg = AggregatorConfig(**TOY)
    corr, d_s, d_t = random_inputs(cfg, rng)
    with pytest.raises(UsageError):
        cats_forward(corr.transposed(), d_s, d_t, AggregatorParams.init(cfg, rng), cfg)


@pytest.mark.parametrize(
    "flags",
    [
        {"appearance_on": False},
        {"multi_level_on": False},
        {"swap_on": False},
        {"residual_on": False},
        {"appearance_on": False, "swap_on": False, "residual_on": False},
    ],
)
def test_ablations_run_with_shared_layout(rng, flags):
    cfg = AggregatorConfig(**{**TOY, **flags})
    assert parameter_shapes(cfg) == parameter_shapes(AggregatorConfig(**TOY))
    corr, d_s, d_t = random_inputs(cfg, rng)
    out = cats_forward(corr, d_s, d_t, random_params(cfg, rng), cfg)
    assert out.maps.shape == (cfg.effective_levels, cfg.hw, cfg.hw)
    assert np.isfinite(out.maps.data).all()


def test_batched_forward_equals_per_sample(rng):
    cfg = AggregatorConfig(**TOY)
    params = random_params(cfg, rng)
    corr, d_s, d_t = random_inputs(cfg, rng, lead=(3,))
    out = cats_forward(corr, d_s, d_t, params, cfg).maps.data
    for n in range(3):
        single = cats_forward(
            CorrelationStack(Tensor(corr.maps.data[n]), Orientation.ROWS_TARGET, corr.grid),
            FeatureStack([lvl[n] for lvl in d_s.levels]),
            FeatureStack([lvl[n] for lvl in d_t.levels]),
            params,
            cfg,
        )
        np.testing.assert_allclose(out[n], single.maps.data, atol=1e-12)


def test_collapse_levels_examples(rng):
    a = rng.standard_normal((4, 4))
    np.testing.assert_allclose(collapse_levels(Tensor(np.stack([a, a, a]))).data, a, rtol=0, atol=1e-15)
    assert not collapse_levels(Tensor(np.stack([a, -a]))).data.any()
    m = rng.standard_normal((3, 4, 4))
    want = [[(m[0, i, j] + m[1, i, j] + m[2, i, j]) / 3 for j in range(4)] for i in range(4)]
    np.testing.assert_allclose(collapse_levels(Tensor(m)).data, want, rtol=0, atol=1e-15)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31))
def test_zero_output_map_is_transpose_for_any_input(seed):
    rng = np.random.default_rng(seed)
    cfg = AggregatorConfig(**{**TOY, "h": 1, "w": 4})
    params = AggregatorParams.init(cfg, rng)
    corr, d_s, d_t = random_inputs(cfg, rng)
    out = cats_forward(corr, d_s, d_t, params, cfg)
    np.testing.assert_array_equal(out.maps.data, np.swapaxes(corr.maps.data, -1, -2))
    assert out.orientation is corr.orientation.flipped()


@pytest.mark.slow
def test_paper_shape_forward_backward():
    # one shallow 64-channel map and seven deep 1024-channel maps
    cfg = AggregatorConfig(h=16, w=16, p=128, channels=[64] + [1024] * 7, heads=6, depth=1)
    rng = np.random.default_rng(0)
    params = AggregatorParams.init(cfg, rng)
    corr, d_s, d_t = random_inputs(cfg, rng)
    start = time.process_time()
    with Tape() as tape:
        loss = sum_(collapse_levels(cats_forward(corr, d_s, d_t, params, cfg)))
    tape.backward(loss)
    assert time.process_time() - start < 10.0
    assert params["out.w"].grad.shape == (384, 256)
