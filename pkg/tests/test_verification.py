import numpy as np
import pytest

from molgrad.exceptions import CapExceededError, DomainError, ShapeError
from molgrad.selftest import affine_instance
from molgrad.verification import (
    CSV_HEADER,
    LipschitzWarning,
    check_convexity,
    check_jacobian_symmetry,
    check_lipschitz_lower_bound,
    check_monotonicity,
    check_nonnegativity,
    estimate_lipschitz,
    lipschitz_to_beta,
    reports_to_csv,
    reports_to_text,
    run_suite,
    sprox_oracle_build,
    sprox_oracle_check,
)

from conftest import certified_net


def untied(net, seed=0, eps=0.2):
    rng = np.random.default_rng(seed)
    dec = tuple(l.weight + eps * np.abs(rng.standard_normal(l.weight.shape)) for l in net.layers)
    return net.replace(decoder_weights=dec, certified=False)


def test_suite_passes_on_certified_net(small_net):
    reports = run_suite(small_net, samples=20, pairs=300)
    names = [r.prop for r in reports]
    assert names == [
        "nonnegativity",
        "jacobian_symmetry",
        "convexity",
        "monotonicity",
        "lipschitz_estimate",
        "lipschitz_lower_bound",
    ]
    assert all(r.passed for r in reports), reports_to_text(reports)


def test_untied_net_fails_symmetry(small_net):
    rep = check_jacobian_symmetry(untied(small_net), samples=10)
    assert not rep.passed and rep.value > 1e-3


def test_negative_weight_fails_audit(small_net):
    w = small_net.layers[1].weight.copy()
    w[2, 1] = -0.01
    bad = small_net.replace(layers=(small_net.layers[0], small_net.layers[1].replace(weight=w), *small_net.layers[2:]))
    rep = check_nonnegativity(bad)
    assert not rep.passed
    assert rep.value == pytest.approx(-0.01)
    assert rep.worst_case == "layer 2 entry (2, 1)"


def test_negative_weights_can_break_monotonicity():
    # one hidden unit whose output enters with a large negative weight: psi is concave there
    from molgrad.network import ActivationSpec, Layer, Network

    s = ActivationSpec("srelu", 0.5)
    net = Network((Layer(np.array([[1.0]]), np.zeros(1), s), Layer(np.array([[-3.0]]), np.zeros(1), s)))
    assert not check_nonnegativity(net).passed
    assert not check_convexity(net, samples=50, scale=0.3).passed
    assert not check_monotonicity(net, pairs=500, scale=0.3).passed


def test_adversarial_monotonicity_on_certified(small_net):
    rep = check_monotonicity(small_net, pairs=100, adversarial=True)
    assert rep.passed and rep.notes == "adversarial"


def test_lipschitz_affine_equals_spectral_norm():
    inst = affine_instance(0)
    L = estimate_lipschitz(inst.net, np.zeros((3, 16)), iters=2000, tol=1e-14)
    assert abs(L - np.linalg.norm(inst.Q, 2)) <= 1e-6
    assert lipschitz_to_beta(L) == pytest.approx(1 / L)
    assert lipschitz_to_beta(0.5) == pytest.approx(1 / (1 + 1e-6))


def test_lipschitz_untied_path_and_warning(small_net):
    X = np.random.default_rng(0).standard_normal((2, 5))
    L_tied = estimate_lipschitz(small_net, X)
    L_dense = estimate_lipschitz(untied(small_net, eps=0.0), X)
    assert L_tied == pytest.approx(L_dense, rel=1e-8)
    with pytest.warns(LipschitzWarning):
        estimate_lipschitz(small_net, X, iters=1)
    with pytest.raises(ShapeError):
        estimate_lipschitz(small_net, np.zeros((1, 4)))


def test_lipschitz_lower_bound_records_violations(small_net):
    X = np.random.default_rng(1).standard_normal((50, 5))
    L = estimate_lipschitz(small_net, X)
    assert check_lipschitz_lower_bound(small_net, L, pairs=2000).passed
    rep = check_lipschitz_lower_bound(small_net, 0.1 * L, pairs=2000)
    assert not rep.passed and rep.notes.endswith("violations")


def test_sprox_witness_on_1d_net():
    net = certified_net([1, 6, 4], gamma=0.5, seed=2)
    oracle = sprox_oracle_build(net, -8, 8, 10_000)
    rep = sprox_oracle_check(oracle, net, np.linspace(-2, 2, 20))
    assert rep.passed, rep
    assert rep.tolerance == pytest.approx(2 * oracle.spacing)
    assert run_suite(net, samples=5, pairs=50)[-1].prop == "sprox_witness"


def test_sprox_grid_validation():
    net = certified_net([1, 3], seed=0)
    with pytest.raises(DomainError):
        sprox_oracle_build(net, -1, 1, 10)
    with pytest.raises(ShapeError):
        sprox_oracle_build(certified_net([2, 3], seed=0), -1, 1, 1000)


def test_cap_enforced(small_net):
    with pytest.raises(CapExceededError):
        check_convexity(small_net, samples=1, cap=3)


def test_report_serialization(small_net):
    reports = run_suite(small_net, samples=3, pairs=20)
    csv_text = reports_to_csv(reports)
    assert csv_text.splitlines()[0] == ",".join(CSV_HEADER)
    assert len(csv_text.strip().splitlines()) == len(reports) + 1
    assert "[convexity]" in reports_to_text(reports)
