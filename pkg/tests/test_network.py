import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from molgrad.exceptions import DomainError, FormatError, ShapeError
from molgrad.network import (
    ActivationSpec,
    Layer,
    Network,
    activation_derivative,
    activation_eval,
    activation_second_derivative,
    conv_layer,
    dumps_network,
    init_network,
    load_network,
    loads_network,
    network_forward,
    save_network,
)

from conftest import certified_net

X = np.array([-1.0, -0.5, 0.0, 0.25, 0.5, 2.0])
SPEC = ActivationSpec("srelu", 0.5)


def test_srelu_values_by_hand():
    # x^2/(4g) + x/2 + g/4 with g = 0.5 inside the band
    np.testing.assert_allclose(activation_eval(SPEC, X), [0, 0, 0.125, 0.28125, 0.5, 2.0])
    np.testing.assert_allclose(activation_derivative(SPEC, X), [0, 0, 0.5, 0.75, 1, 1])
    np.testing.assert_allclose(activation_second_derivative(SPEC, X), [0, 1, 1, 1, 1, 0])


def test_linear_test_activation_is_identity():
    spec = ActivationSpec("linear-test")
    np.testing.assert_array_equal(activation_eval(spec, X), X)
    assert not spec.certifiable
    assert SPEC.certifiable


def test_activation_rejects_nonfinite():
    with pytest.raises(DomainError):
        activation_eval(SPEC, np.array([np.nan]))


@settings(max_examples=60, deadline=None)
@given(
    x=st.floats(-5, 5),
    y=st.floats(-5, 5),
    gamma=st.floats(0.01, 2.0),
)
def test_srelu_convex_and_slope_bounded(x, y, gamma):
    s = ActivationSpec("srelu", gamma)
    fx, fy = activation_eval(s, np.array([x, y]))
    dx, dy = activation_derivative(s, np.array([x, y]))
    assert 0 <= dx <= 1 and 0 <= dy <= 1
    # convexity via the supporting line at x
    assert fy >= fx + dx * (y - x) - 1e-12
    # derivative monotone
    assert (dx - dy) * (x - y) >= -1e-15


def test_srelu_continuity_at_band_edges():
    for g in (0.1, 1.0):
        s = ActivationSpec("srelu", g)
        e = 1e-9
        for edge in (-g, g):
            lo, hi = activation_eval(s, np.array([edge - e, edge + e]))
            assert abs(hi - lo) < 1e-8
            dlo, dhi = activation_derivative(s, np.array([edge - e, edge + e]))
            assert abs(dhi - dlo) < 1e-7


def test_layer_and_network_shapes():
    net = init_network([4, 6, 3], seed=0)
    assert (net.in_dim, net.out_dim, net.depth) == (4, 3, 2)
    assert net.n_params == 4 * 6 + 6 + 6 * 3 + 3
    assert network_forward(net, np.zeros((5, 4))).shape == (5, 3)
    with pytest.raises(ShapeError):
        Network((net.layers[1], net.layers[0]))
    with pytest.raises(ShapeError):
        network_forward(net, np.zeros(3))


def test_layer_arrays_are_read_only():
    net = init_network([3, 2], seed=0)
    with pytest.raises(ValueError):
        net.layers[0].weight[0, 0] = 1.0


def test_nonneg_init_and_mask():
    net = init_network([4, 5, 6, 2], seed=1, nonneg=True)
    assert net.layers[0].weight.min() < 0
    assert all(l.weight.min() >= 0 for l in net.layers[1:])
    mask = net.weight_mask()
    assert mask.sum() == 5 * 6 + 6 * 2
    assert mask[: 4 * 5 + 5].sum() == 0


def test_skip_validation():
    Network(init_network([6, 8, 8, 8, 5], seed=0).layers, skip=(1, 3))
    with pytest.raises(ShapeError):
        Network(init_network([6, 8, 7, 8, 5], seed=0).layers, skip=(1, 3))
    with pytest.raises(ShapeError):
        Network(init_network([6, 8, 8, 8, 5], seed=0).layers, skip=(1, 2))


def test_skip_forward_adds_branch():
    layers = init_network([3, 4, 4, 2], seed=2).layers
    x = np.array([0.3, -0.2, 0.5])
    plain = Network(layers)
    skip = Network(layers, skip=(1, 3))
    h1 = network_forward(plain, x, 1, 1)
    h2 = network_forward(plain, x, 1, 2)
    expect = network_forward(plain, h1 + h2, 3, 3)
    np.testing.assert_allclose(network_forward(skip, x), expect)


def test_flat_params_roundtrip():
    net = init_network([3, 4, 2], seed=0)
    theta = net.get_flat_params()
    assert theta.shape == (net.n_params,)
    again = net.with_flat_params(theta * 2)
    np.testing.assert_allclose(again.layers[1].weight, 2 * net.layers[1].weight)
    assert not again.certified


def test_text_container_roundtrip(tmp_path):
    net = certified_net([4, 5, 3], seed=7, skip=None)
    path = tmp_path / "m.net"
    save_network(net, path)
    back = load_network(path)
    assert back.certified == net.certified
    for a, b in zip(net.layers, back.layers):
        np.testing.assert_array_equal(a.weight, b.weight)
        np.testing.assert_array_equal(a.bias, b.bias)
        assert a.activation == b.activation
    skip_net = certified_net([3, 4, 4, 4, 2], seed=1, skip=(1, 3))
    assert loads_network(dumps_network(skip_net)).skip == (1, 3)


def test_text_container_rejects_garbage():
    with pytest.raises(FormatError):
        loads_network("not a network")
    text = dumps_network(init_network([2, 2], seed=0))
    with pytest.raises(FormatError):
        loads_network(text[: len(text) // 2])


def test_conv_layer_matches_direct_convolution():
    rng = np.random.default_rng(0)
    k = rng.random((1, 1, 3, 3))
    layer = conv_layer(k, 5, 5)
    img = rng.random((5, 5))
    out = (layer.weight @ img.ravel()).reshape(5, 5)
    # direct zero-padded true convolution at an interior pixel
    flipped = k[0, 0][::-1, ::-1]
    np.testing.assert_allclose(out[2, 2], np.sum(img[1:4, 1:4] * flipped))
    assert conv_layer(k, 4, 4, pool=True).weight.shape == (4, 16)
