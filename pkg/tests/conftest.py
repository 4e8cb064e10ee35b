import numpy as np
import pytest

from molgrad.network import init_network
from molgrad.training import clamp_negative_weights

_ACCEPTANCE = []


def record_acceptance(name, passed, detail):
    """Remember one acceptance verdict; printed in the terminal summary."""
    line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
    _ACCEPTANCE.append(line)
    print(line)
    return passed


@pytest.fixture
def acceptance():
    return record_acceptance


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


def certified_net(widths, gamma=0.5, seed=0, skip=None, bias_scale=0.3):
    """Random nonnegative (layers >= 2) network with nonzero biases."""
    net = init_network(widths, gamma=gamma, seed=seed, nonneg=True, skip=skip)
    rng = np.random.default_rng(seed + 1000)
    layers = tuple(l.replace(bias=bias_scale * rng.standard_normal(l.out_dim)) for l in net.layers)
    return clamp_negative_weights(net.replace(layers=layers))


@pytest.fixture
def small_net():
    return certified_net([5, 7, 6, 4], seed=3)
