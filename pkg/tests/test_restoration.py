import numpy as np
import pytest

from molgrad.imaging import BlurKernel, build_blur_operator
from molgrad.network import ActivationSpec, Layer, Network
from molgrad.pnp import LinearOperator
from molgrad.restoration import restore

from conftest import certified_net


def identity_denoiser(d):
    # D(x) = x exactly on [0, 2]: the implicit regularizer vanishes there
    return Network((Layer(2 * np.eye(d), -2 * np.ones(d), ActivationSpec("srelu", 2.0)),), certified=True)


def test_identity_operator_and_denoiser_return_observation():
    y = np.random.default_rng(0).uniform(0.1, 0.9, 9)
    res = restore(identity_denoiser(9), LinearOperator.identity(9), y, mu=10.0, lipschitz=2.0)
    # squared relative change < 1e-10 leaves steps of about 1e-5
    np.testing.assert_allclose(res.image, y, atol=1e-5)
    assert res.beta == pytest.approx(0.5) and res.params.sigma == pytest.approx(1.0)
    assert res.step_check.passed and res.trace.reason == "rel_tol"


def test_estimated_lipschitz_and_sets():
    net = certified_net([16, 12, 8], gamma=0.3, seed=1)
    A = build_blur_operator(BlurKernel.box(3), 4, 4)
    y = np.random.default_rng(1).uniform(0.1, 0.9, 16)
    obs = restore(net, A, y, mu=20.0, max_iter=20)
    cons = restore(net, A, y, mu=20.0, max_iter=20, lipschitz_set="conservative")
    assert cons.lipschitz >= obs.lipschitz > 0
    assert cons.params.sigma <= obs.params.sigma
    with pytest.raises(ValueError):
        restore(net, A, y, mu=20.0, lipschitz_set="everything")


def test_sigma_override_in_strict_mode_is_rejected():
    from molgrad.exceptions import ValidationError

    net = identity_denoiser(4)
    with pytest.raises(ValidationError):
        restore(net, LinearOperator.identity(4), np.full(4, 0.5), mu=1.0, lipschitz=2.0, sigma=3.0)
