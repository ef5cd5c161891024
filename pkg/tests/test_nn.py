import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wspkit import nn


def loop_conv(x, w, b, s, p):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    ho, wo = (h + 2 * p - k) // s + 1, (wd + 2 * p - k) // s + 1
    y = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * s:i * s + k, j * s:j * s + k]
            y[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w) + b
    return y


def loop_tconv(x, w, b, s, p):
    n, cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    ho, wo = (h - 1) * s - 2 * p + k, (wd - 1) * s - 2 * p + k
    y = np.zeros((n, cout, ho, wo)) + b[None, :, None, None]
    for i in range(h):
        for j in range(wd):
            for a in range(k):
                for c in range(k):
                    r, q = i * s - p + a, j * s - p + c
                    if 0 <= r < ho and 0 <= q < wo:
                        y[:, :, r, q] += x[:, :, i, j] @ w[:, :, a, c]
    return y


def _store(net, seed=0):
    params = nn.init_params(net, seed)
    rng = np.random.default_rng(seed + 1)
    for name, v in params.params.items():
        if name.endswith(".bias"):
            v[...] = rng.normal(size=v.shape)
    return params


@pytest.mark.parametrize("k,s,p", [(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 0), (5, 3, 2)])
def test_conv_matches_loop_oracle(k, s, p):
    net = [nn.LayerSpec("conv2d", "c", 3, 4, k, s, p)]
    params = _store(net)
    x = np.random.default_rng(2).normal(size=(2, 3, 9, 8))
    y, _ = nn.forward(net, params, x)
    assert np.abs(y - loop_conv(x, params["c.weight"], params["c.bias"], s, p)).max() < 1e-12


@pytest.mark.parametrize("k,s,p", [(4, 2, 1), (3, 1, 1), (2, 2, 0), (3, 3, 1)])
def test_transposed_conv_matches_loop_oracle(k, s, p):
    net = [nn.transposed_conv2d("t", 3, 2, k, s, p)]
    params = _store(net)
    x = np.random.default_rng(3).normal(size=(2, 3, 4, 5))
    y, _ = nn.forward(net, params, x)
    assert np.abs(y - loop_tconv(x, params["t.weight"], params["t.bias"], s, p)).max() < 1e-12


def test_transposed_conv_is_adjoint_of_conv():
    # with zero bias, <conv(x), y> == <x, tconv(y)> when both share one weight array
    rng = np.random.default_rng(4)
    w = rng.normal(size=(5, 3, 4, 4))
    conv = [nn.LayerSpec("conv2d", "c", 3, 5, 4, 2, 1)]
    tconv = [nn.transposed_conv2d("t", 5, 3, 4, 2, 1)]
    pc, pt = nn.ParamStore(), nn.ParamStore()
    pc.add("c.weight", w)
    pc.add("c.bias", np.zeros(5))
    pt.add("t.weight", w)
    pt.add("t.bias", np.zeros(3))
    x = rng.normal(size=(1, 3, 8, 8))
    cx, _ = nn.forward(conv, pc, x)
    y = rng.normal(size=cx.shape)
    ty, _ = nn.forward(tconv, pt, y)
    assert ty.shape == x.shape
    assert abs((cx * y).sum() - (x * ty).sum()) < 1e-10


def test_transposed_conv_doubles_resolution():
    assert nn.output_shape([nn.transposed_conv2d("t", 4, 2)], (4, 8, 8)) == (2, 16, 16)


def test_fc_and_avgpool_values():
    net = [nn.avgpool("p", 2)]
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    y, _ = nn.forward(net, nn.ParamStore(), x)
    assert np.array_equal(y[0, 0], [[2.5, 4.5], [10.5, 12.5]])
    fc = [nn.fully_connected("f", 3, 2)]
    params = _store(fc)
    v = np.array([[1.0, -2.0, 0.5]])
    y, _ = nn.forward(fc, params, v)
    assert np.allclose(y, v @ params["f.weight"].T + params["f.bias"])


def test_sigmoid_is_stable_at_extremes():
    y, _ = nn.forward([nn.sigmoid()], nn.ParamStore(), np.array([[-1000.0, 0.0, 1000.0]]))
    assert np.array_equal(y, [[0.0, 0.5, 1.0]])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-500, 500), min_size=1, max_size=20))
def test_softmax_rows_sum_to_one(vals):
    y, _ = nn.forward([nn.softmax()], nn.ParamStore(), np.array([vals]))
    assert abs(y.sum() - 1.0) < 1e-12
    assert np.all(y >= 0)


def _input_gradcheck(net, params, x, eps=1e-6):
    rng = np.random.default_rng(0)
    y, tape = nn.forward(net, params, x)
    g = rng.normal(size=y.shape)
    dx = nn.backward(tape, g, params)
    num = np.zeros_like(x)
    flat, nflat = x.reshape(-1), num.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        lp = (nn.forward(net, params, x)[0] * g).sum()
        flat[i] = orig - eps
        lm = (nn.forward(net, params, x)[0] * g).sum()
        flat[i] = orig
        nflat[i] = (lp - lm) / (2 * eps)
    return np.abs(dx - num).max() / max(1.0, np.abs(num).max())


NETS = {
    "conv": ([nn.conv2d("c", 2, 3, 3, 2)], (2, 2, 6, 6)),
    "tconv": ([nn.transposed_conv2d("t", 2, 3)], (2, 2, 3, 3)),
    "fc_sigmoid": ([nn.fully_connected("f", 4, 3), nn.sigmoid()], (3, 4)),
    "softmax": ([nn.softmax()], (3, 5)),
    "pool": ([nn.avgpool("p")], (2, 2, 4, 4)),
    "stack": ([nn.conv2d("c", 1, 2, 3, 2), nn.relu(), nn.transposed_conv2d("t", 2, 2)], (2, 1, 6, 6)),
}


@pytest.mark.parametrize("which", sorted(NETS))
def test_input_gradients(which):
    net, shape = NETS[which]
    params = _store(net)
    x = np.random.default_rng(5).normal(size=shape)
    assert _input_gradcheck(net, params, x) < 1e-7


@pytest.mark.parametrize("which", sorted(n for n in NETS if n not in ("softmax", "pool")))
def test_parameter_gradients(which):
    net, shape = NETS[which]
    params = _store(net)
    x = np.random.default_rng(6).normal(size=shape)
    target = np.random.default_rng(7).normal(size=nn.forward(net, params, x)[0].shape)
    report = nn.grad_check(nn.net_objective(net, x, lambda y: (0.5 * ((y - target) ** 2).sum(), y - target)), params)
    assert report.passed, report.format()


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 1), st.integers(0, 1000))
def test_conv_gradients_property(cin, cout, k, p, seed):
    net = [nn.LayerSpec("conv2d", "c", cin, cout, k, 1, p), nn.sigmoid()]
    params = _store(net, seed)
    x = np.random.default_rng(seed).normal(size=(2, cin, 4, 4))
    report = nn.grad_check(nn.net_objective(net, x, lambda y: (float(y.sum()), np.ones_like(y))), params)
    assert report.passed, report.format()


def test_grad_check_detects_wrong_gradient():
    net = [nn.fully_connected("f", 2, 1)]
    params = _store(net)
    x = np.ones((1, 2))

    def bad(ps):
        y, tape = nn.forward(net, ps, x)
        nn.backward(tape, 2 * np.ones_like(y), ps)  # true gradient is 1
        return float(y.sum())

    assert not nn.grad_check(bad, params).passed


def test_grad_check_needs_float64():
    params = _store([nn.fully_connected("f", 2, 1)]).astype(np.float32)
    with pytest.raises(TypeError):
        nn.grad_check(lambda ps: 0.0, params)


def test_shape_errors():
    with pytest.raises(nn.ShapeError):
        nn.forward([nn.conv2d("c", 3, 2)], _store([nn.conv2d("c", 3, 2)]), np.zeros((1, 2, 4, 4)))
    with pytest.raises(nn.ShapeError):
        nn.output_shape([nn.avgpool("p", 2)], (1, 3, 4))
    with pytest.raises(nn.ShapeError):
        nn.output_shape([nn.fully_connected("f", 4, 2)], (5,))
    net = [nn.relu()]
    _, tape = nn.forward(net, nn.ParamStore(), np.zeros((1, 3)))
    with pytest.raises(nn.ShapeError):
        nn.backward(tape, np.zeros((1, 4)), nn.ParamStore())
    with pytest.raises(RuntimeError):
        nn.backward(None, np.zeros(1), nn.ParamStore())


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        nn.LayerSpec("maxpool", "m")
    with pytest.raises(ValueError):
        nn.conv2d("c", 0, 2)
    with pytest.raises(ValueError):
        nn.LayerSpec("conv2d", "c", 1, 1, kernel=0)


def test_init_is_seeded_and_bounded():
    net = [nn.conv2d("c", 4, 8, 3)]
    a, b, c = nn.init_params(net, 1), nn.init_params(net, 1), nn.init_params(net, 2)
    assert np.array_equal(a["c.weight"], b["c.weight"])
    assert not np.array_equal(a["c.weight"], c["c.weight"])
    assert np.abs(a["c.weight"]).max() <= np.sqrt(6 / 36)
    assert not a["c.bias"].any()
    with pytest.raises(KeyError):
        nn.init_params(net, 1, store=a)


def test_sgd_momentum_update():
    ps = nn.ParamStore()
    ps.add("w", np.array([1.0]))
    ps.grads["w"][...] = 2.0
    nn.sgd_step(ps, lr=0.1, momentum=0.9)
    assert ps["w"][0] == pytest.approx(0.8)
    assert ps.grads["w"][0] == 0.0
    ps.grads["w"][...] = 1.0
    nn.sgd_step(ps, lr=0.1, momentum=0.9)
    # v = 0.9 * 2 + 1
    assert ps["w"][0] == pytest.approx(0.8 - 0.28)


def test_sgd_rejects_non_finite_gradients():
    ps = nn.ParamStore()
    ps.add("w", np.array([1.0]))
    ps.grads["w"][...] = np.nan
    with pytest.raises(nn.NumericError):
        nn.sgd_step(ps, 0.1)
    assert ps["w"][0] == 1.0


def test_param_store_copy_is_deep():
    ps = _store([nn.fully_connected("f", 2, 2)])
    cp = ps.copy()
    cp["f.weight"][...] = 0
    assert ps["f.weight"].any()
