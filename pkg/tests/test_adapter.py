import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddsam2 import tensor as T
from ddsam2.adapter import (AdapterParams, DDAdapterConfig, dd_adapter_forward, flop_count,
                            init_adapter, param_count, std_adapter_forward)
from ddsam2.errors import ConfigError, ShapeError
from oracles import depthwise_loop, gelu_scalar, pointwise_loop

gelu_np = np.vectorize(gelu_scalar)


def random_params(cfg, rng, scale=0.5):
    p = init_adapter(cfg, rng)
    p.up_w = T.Tensor(rng.uniform(-scale, scale, size=p.up_w.dims))
    p.up_b = T.Tensor(rng.uniform(-scale, scale, size=p.up_b.dims))
    return p


def test_zero_up_projection_is_identity():
    cfg = DDAdapterConfig(8, 4, 3, (1, 3))
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 8, 5, 5))
    out = dd_adapter_forward(T.Tensor(x), init_adapter(cfg, rng), cfg)
    assert np.abs(out.data - x).max() < 1e-15
    np.testing.assert_array_equal(out.data, x)


def test_only_up_bias_adds_gelu_of_bias():
    cfg = DDAdapterConfig(4, 2, 3, (1,))
    c = np.array([0.5, -1.0, 2.0, 0.0])
    z = lambda *s: T.Tensor(np.zeros(s))  # noqa: E731
    p = AdapterParams(z(2, 4), z(2), z(4, 2), T.Tensor(c), [(z(2, 3, 3), z(2))])
    x = np.random.default_rng(1).normal(size=(1, 4, 3, 3))
    out = dd_adapter_forward(T.Tensor(x), p, cfg).data
    expected = x + np.array([gelu_scalar(v) for v in c])[None, :, None, None]
    np.testing.assert_allclose(out, expected, atol=1e-15)


def straight_line_dd(x, p, cfg):
    f_d = gelu_np(pointwise_loop(x, p.down_w.data, p.down_b.data))
    f_m = f_d.copy()
    for (w, b), r in zip(p.branches, cfg.dilation_rates):
        f_m = f_m + gelu_np(depthwise_loop(f_d, w.data, b.data, r))
    return x + gelu_np(pointwise_loop(f_m, p.up_w.data, p.up_b.data))


def test_dd_matches_straight_line_oracle():
    cfg = DDAdapterConfig(8, 4, 3, (1, 3))
    rng = np.random.default_rng(2)
    p = random_params(cfg, rng)
    x = rng.uniform(-1, 1, size=(1, 8, 6, 6))
    out = dd_adapter_forward(T.Tensor(x), p, cfg).data
    np.testing.assert_allclose(out, straight_line_dd(x, p, cfg), atol=1e-13)


def test_std_adapter_zero_up_identity_and_loop():
    cfg = DDAdapterConfig(8, 4, 3, ())
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, size=(1, 8, 4, 4))
    p = init_adapter(cfg, rng, "mlp")
    np.testing.assert_array_equal(std_adapter_forward(T.Tensor(x), p, cfg).data, x)
    p = random_params(cfg, rng)
    hid = gelu_np(pointwise_loop(x, p.down_w.data, p.down_b.data))
    expected = x + gelu_np(pointwise_loop(hid, p.up_w.data, p.up_b.data))
    np.testing.assert_allclose(std_adapter_forward(T.Tensor(x), p, cfg).data, expected, atol=1e-13)


def test_dd_without_branches_equals_std():
    cfg = DDAdapterConfig(8, 2, 3, ())
    rng = np.random.default_rng(4)
    p = random_params(cfg, rng)
    x = T.Tensor(rng.normal(size=(2, 8, 3, 3)))
    np.testing.assert_array_equal(dd_adapter_forward(x, p, cfg).data, std_adapter_forward(x, p, cfg).data)


def test_channel_mismatch_is_shape_error():
    cfg = DDAdapterConfig(8, 4)
    p = init_adapter(cfg, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        dd_adapter_forward(T.Tensor(np.zeros((1, 6, 3, 3))), p, cfg)


@pytest.mark.parametrize("kwargs", [dict(channels=6, reduction=4), dict(channels=8, kernel=4),
                                    dict(channels=8, dilation_rates=(3, 1)), dict(channels=8, dilation_rates=(0,))])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        DDAdapterConfig(**kwargs)


@pytest.mark.parametrize("rates", [(1,), (1, 3), (1, 2, 3)])
def test_adapter_gradients(rates):
    cfg = DDAdapterConfig(8, 4, 3, rates)
    rng = np.random.default_rng(len(rates))
    p = random_params(cfg, rng)
    x = T.Tensor(rng.uniform(-1, 1, size=(1, 8, 5, 5)))
    tensors = [x] + [t for _, t in p.named()]
    names = [n for n, _ in p.named()]
    w = rng.uniform(0.5, 1.5, size=x.dims)

    def f(x_, *params):
        q = AdapterParams.from_state(dict(zip(names, params)), "", len(rates))
        return T.sum_all(dd_adapter_forward(x_, q, cfg) * T.Tensor(w))

    assert T.grad_check(f, tensors) < 1e-4


# ---------------------------------------------------------------- accounting


def test_param_count_examples():
    assert param_count(DDAdapterConfig(8, 4, 3, (1, 3))) == 82
    assert param_count(DDAdapterConfig(8, 4, 3, ())) == 42
    for c in (1, 2, 5, 16):
        assert param_count(DDAdapterConfig(c, c, 3, (1,))) == 3 * c + 11


@given(c=st.integers(1, 12), ratio=st.integers(1, 4), k=st.sampled_from([1, 3, 5]),
       rates=st.lists(st.integers(1, 6), max_size=4, unique=True))
@settings(max_examples=40, deadline=None)
def test_param_count_equals_enumeration(c, ratio, k, rates):
    cfg = DDAdapterConfig(c * ratio, ratio, k, tuple(sorted(rates)))
    p = init_adapter(cfg, np.random.default_rng(0))
    assert p.count() == param_count(cfg)


def test_param_count_monotone():
    base = DDAdapterConfig(16, 4, 3, (1, 3))
    assert param_count(DDAdapterConfig(16, 4, 3, (1, 2, 3))) > param_count(base)
    assert param_count(DDAdapterConfig(20, 4, 3, (1, 3))) > param_count(base)
    assert param_count(DDAdapterConfig(16, 4, 5, (1, 3))) > param_count(base)


def counted_macs(cfg, h, w):
    """Count multiply-accumulates by walking the oracle loop nests."""
    count = 0
    hid, c, k = cfg.hidden, cfg.channels, cfg.kernel
    for _ in range(h * w):
        for _ in range(hid):
            count += c
        for _ in cfg.dilation_rates:
            for _ in range(hid):
                count += k * k
        for _ in range(c):
            count += hid
    return count


def test_flop_count_examples():
    cfg = DDAdapterConfig(8, 4, 3, (1, 3))
    assert flop_count(cfg, 4, 4) == 1088 == 16 * (16 + 36 + 16)
    assert flop_count(cfg, 4, 4) == counted_macs(cfg, 4, 4)
    assert flop_count(cfg, 8, 4) == 2 * flop_count(cfg, 4, 4)
    p = init_adapter(cfg, np.random.default_rng(0))
    weights = p.down_w.size + sum(w.size for w, _ in p.branches) + p.up_w.size
    assert flop_count(cfg, 1, 1) == weights


@given(c=st.integers(1, 8), h=st.integers(1, 6), w=st.integers(1, 6),
       rates=st.lists(st.integers(1, 5), max_size=3, unique=True))
@settings(max_examples=30, deadline=None)
def test_shape_preserved(c, h, w, rates):
    cfg = DDAdapterConfig(2 * c, 2, 3, tuple(sorted(rates)))
    rng = np.random.default_rng(c)
    p = random_params(cfg, rng)
    x = T.Tensor(rng.normal(size=(1, 2 * c, h, w)))
    assert dd_adapter_forward(x, p, cfg).dims == x.dims
    assert std_adapter_forward(x, p, cfg).dims == x.dims
