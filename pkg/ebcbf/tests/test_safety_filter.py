from contextlib import contextmanager
from unittest import mock

import numpy as np
import pytest
from scipy.optimize import minimize
from traitlets import TraitError

from ebcbf import safety_filter
from ebcbf.barrier import BarrierSpec, barrier_value_and_gradient
from ebcbf.errors import DegeneracyError, InfeasibilityError, InputError, NumericalError
from ebcbf.gp import Dataset, PhsGaussianProcess, posterior_drift
from ebcbf.kernels import PhsStructure
from ebcbf.safety_filter import (
    FilterConfig,
    _box_halfspace_projection,
    ebcbf_constraint_residual,
    filter_control,
    phi_lower,
    psd_sqrt,
    solve_filter,
)


@contextmanager
def pinned_posterior(h, grad, mu, cov):
    """Fix the barrier and drift posterior seen by the filter"""
    grad = np.asarray(grad, dtype=float)
    with mock.patch.object(
        safety_filter, "barrier_value_and_gradient", lambda *args, **kwargs: (h, grad)
    ), mock.patch.object(
        safety_filter,
        "posterior_drift",
        lambda *args, **kwargs: (np.asarray(mu, dtype=float), np.asarray(cov, dtype=float)),
    ):
        yield


@pytest.fixture
def spec():
    return BarrierSpec()


@pytest.fixture
def two_input_model(small_dataset, hp):
    """A model of the oscillator driven on both coordinates"""
    phs = PhsStructure(2, 2, [[0.0, 1.0], [-1.0, 0.0]], G=np.eye(2))
    data = Dataset(small_dataset.times, small_dataset.states, np.zeros((small_dataset.K, 2)))
    return PhsGaussianProcess().condition(data, phs, hp)


def test_phi_lower_example(model, spec):
    cfg = FilterConfig(beta_f=1.0)
    with pinned_posterior(0.0, [1.0, 0.0], np.zeros(2), np.eye(2)):
        assert phi_lower(model, spec, cfg, np.zeros(2)) == pytest.approx(-1.0)


def test_phi_lower_zero_radius(model, spec):
    cfg = FilterConfig(beta_f=0.0, gamma=2.0)
    x = np.array([0.4, 0.5])
    h, grad = barrier_value_and_gradient(spec, model, x)
    mu, _ = posterior_drift(model, x)
    assert phi_lower(model, spec, cfg, x) == pytest.approx(grad @ mu + 2.0 * h)


def test_phi_lower_is_ellipsoid_minimum(model, spec):
    cfg = FilterConfig()
    x = np.array([0.3, -0.7])
    h, grad = barrier_value_and_gradient(spec, model, x)
    mu, cov = posterior_drift(model, x)
    phi = phi_lower(model, spec, cfg, x)
    rng = np.random.default_rng(0)
    z = rng.standard_normal((100_000, 2))
    # half of the draws on the boundary, where the minimum is attained
    radii = cfg.radius() * np.where(np.arange(100_000) % 2, 1.0, rng.random(100_000) ** 0.5)
    z = z / np.linalg.norm(z, axis=1)[:, None] * radii[:, None]
    v = mu + z @ psd_sqrt(cov)
    values = v @ grad + cfg.gamma * h
    assert values.min() >= phi - 1e-9
    assert values.min() <= phi + 1e-3


def test_closed_form_example(model, spec):
    cfg = FilterConfig(beta_f=0.0)
    # g = (0, 1) so grad h^T g = 1, and Psi = gamma h = -2
    with pinned_posterior(-2.0, [0.0, 1.0], np.zeros(2), np.zeros((2, 2))):
        solution = solve_filter(model, spec, cfg, np.array([0.1, 0.2]), np.zeros(1))
        assert solution.psi == pytest.approx(-2.0)
        assert solution.active
        np.testing.assert_allclose(solution.u, [2.0])
        residual = ebcbf_constraint_residual(model, spec, cfg, np.array([0.1, 0.2]), solution.u)
        assert residual == pytest.approx(0.0, abs=1e-12)


def test_inactive_constraint_keeps_nominal(model, spec):
    cfg = FilterConfig(beta_f=0.0)
    u_nom = np.array([0.3])
    with pinned_posterior(1.0, [0.0, 1.0], np.zeros(2), np.zeros((2, 2))):
        solution = solve_filter(model, spec, cfg, np.zeros(2), u_nom)
    assert not solution.active
    np.testing.assert_array_equal(solution.u, u_nom)


def test_kkt_oracle(two_input_model, spec):
    cfg = FilterConfig(gamma=1.5, beta_f=2.0)
    rng = np.random.default_rng(7)
    active_count = 0
    for _ in range(50):
        h = rng.normal()
        grad = rng.normal(size=2)
        mu = rng.normal(size=2)
        S = rng.normal(size=(2, 2))
        cov = S @ S.T
        u_nom = rng.normal(size=2)
        x = rng.uniform(-1, 1, size=2)
        with pinned_posterior(h, grad, mu, cov):
            solution = solve_filter(two_input_model, spec, cfg, x, u_nom)
        phi = grad @ mu + cfg.gamma * h - cfg.beta_f * np.linalg.norm(psd_sqrt(cov) @ grad)
        a = grad  # g = I
        if phi + a @ u_nom >= 0:
            expected = u_nom
        else:
            active_count += 1
            # stationarity u - u_nom = lam a with a^T u = -phi
            kkt = np.block([[np.eye(2), -a[:, None]], [a[None, :], np.zeros((1, 1))]])
            expected = np.linalg.solve(kkt, np.r_[u_nom, -phi])[:2]
        np.testing.assert_allclose(solution.u, expected, atol=1e-6)
    assert active_count > 0


def test_filter_output_is_admissible(model, spec):
    cfg = FilterConfig()
    for x in ([0.5, 0.8], [-0.3, -1.0], [1.0, 0.4]):
        x = np.array(x)
        for u_nom in (-3.0, 0.0, 3.0):
            u = filter_control(model, spec, cfg, x, np.array([u_nom]))
            assert ebcbf_constraint_residual(model, spec, cfg, x, u) >= -1e-9


def test_filter_is_minimal(model, spec):
    cfg = FilterConfig()
    x = np.array([0.5, 0.8])
    u_nom = np.array([3.0])
    u = filter_control(model, spec, cfg, x, u_nom)
    for candidate in np.linspace(-10, 10, 201):
        c = np.array([candidate])
        if ebcbf_constraint_residual(model, spec, cfg, x, c) >= 0:
            assert abs(u - u_nom)[0] <= abs(c - u_nom)[0] + 1e-9


def test_residual_is_affine(model, spec):
    cfg = FilterConfig()
    x = np.array([0.2, 0.6])

    def r(u):
        return ebcbf_constraint_residual(model, spec, cfg, x, np.array([u]))

    assert r(1.5) + r(-0.4) - r(0.0) == pytest.approx(r(1.1), abs=1e-10)


def test_box_bounds(model, spec):
    x = np.array([0.1, 0.2])
    with pinned_posterior(-2.0, [0.0, 1.0], np.zeros(2), np.zeros((2, 2))):
        cfg = FilterConfig(beta_f=0.0, input_bounds=[[-3.0, 3.0]])
        np.testing.assert_allclose(solve_filter(model, spec, cfg, x, np.zeros(1)).u, [2.0])
        cfg = FilterConfig(beta_f=0.0, input_bounds=[[-1.0, 1.0]])
        with pytest.raises(InfeasibilityError):
            solve_filter(model, spec, cfg, x, np.zeros(1))
    with pinned_posterior(1.0, [0.0, 1.0], np.zeros(2), np.zeros((2, 2))):
        cfg = FilterConfig(beta_f=0.0, input_bounds=[[-3.0, 3.0]])
        solution = solve_filter(model, spec, cfg, x, np.array([5.0]))
        np.testing.assert_allclose(solution.u, [3.0])
        assert not solution.active


def test_box_projection_oracle():
    rng = np.random.default_rng(3)
    checked = 0
    for _ in range(100):
        u_nom = rng.normal(scale=2, size=2)
        a = rng.normal(size=2)
        b = rng.normal()
        lo = -rng.uniform(0.2, 2, size=2)
        hi = rng.uniform(0.2, 2, size=2)
        u = _box_halfspace_projection(u_nom, a, b, lo, hi)
        best_reachable = np.sum(np.maximum(a * lo, a * hi))
        if best_reachable < b - 1e-9:
            assert u is None
            continue
        if best_reachable < b + 1e-6:
            # barely feasible, left to the exact solver
            continue
        result = minimize(
            lambda z: np.sum((z - u_nom) ** 2),
            np.clip(u_nom, lo, hi),
            jac=lambda z: 2 * (z - u_nom),
            method="SLSQP",
            bounds=list(zip(lo, hi)),
            constraints=[{"type": "ineq", "fun": lambda z: a @ z - b, "jac": lambda z: a}],
            options={"ftol": 1e-14, "maxiter": 500},
        )
        assert u is not None
        assert np.sum((u - u_nom) ** 2) <= result.fun + 1e-7
        np.testing.assert_allclose(u, result.x, atol=1e-4)
        assert np.all(u >= lo) and np.all(u <= hi)
        assert a @ u >= b - 1e-8
        checked += 1
    assert checked > 50


def test_degenerate_active_constraint(model, spec):
    cfg = FilterConfig(beta_f=0.0)
    # grad h orthogonal to g = (0, 1)
    with pinned_posterior(-1.0, [1.0, 0.0], np.zeros(2), np.zeros((2, 2))):
        with pytest.raises(DegeneracyError) as e:
            solve_filter(model, spec, cfg, np.zeros(2), np.zeros(1), t=1.25)
    assert e.value.t == 1.25
    assert "t=1.25s" in str(e.value)


def test_degenerate_inactive_holds_nominal(model, spec):
    cfg = FilterConfig(beta_f=0.0)
    with pinned_posterior(1.0, [1.0, 0.0], np.zeros(2), np.zeros((2, 2))):
        solution = solve_filter(model, spec, cfg, np.zeros(2), np.array([0.7]), t=0.0)
    assert solution.degenerate
    np.testing.assert_array_equal(solution.u, [0.7])


def test_psd_sqrt():
    S = np.array([[2.0, 0.5], [0.5, 1.0]])
    R = psd_sqrt(S)
    np.testing.assert_allclose(R @ R, S, atol=1e-12)
    np.testing.assert_allclose(R, R.T)
    with pytest.raises(NumericalError):
        psd_sqrt(np.diag([1.0, -0.5]))


def test_nominal_control():
    cfg = FilterConfig(nominal_gain=[[-1.0, -2.0]], nominal_offset=[0.5])
    np.testing.assert_allclose(cfg.nominal_control([1.0, 1.0], 1), [-2.5])
    assert FilterConfig().nominal_control([1.0, 1.0], 1).tolist() == [0.0]
    cfg = FilterConfig(nominal=lambda x: -x[1])
    np.testing.assert_allclose(cfg.nominal_control([0.0, 0.3], 1), [-0.3])
    with pytest.raises(InputError):
        FilterConfig(nominal_gain=[[1.0]]).nominal_control([1.0, 1.0], 1)


def test_filter_config():
    assert FilterConfig().radius() == pytest.approx(np.sqrt(2 * np.log(40)))
    assert FilterConfig(beta_f="eta=0.05").radius() == pytest.approx(np.sqrt(2 * np.log(20)))
    assert FilterConfig(eta_dyn=0.05, uniform_points=10).radius() == pytest.approx(
        np.sqrt(2 * np.log(200))
    )
    assert FilterConfig().bounds(1) is None
    with pytest.raises(InputError):
        FilterConfig(input_bounds=[[-1.0, 1.0]]).bounds(2)
    with pytest.raises(TraitError):
        FilterConfig(input_bounds=[[1.0, -1.0]])
    with pytest.raises(TraitError):
        FilterConfig(gamma=0.0)
