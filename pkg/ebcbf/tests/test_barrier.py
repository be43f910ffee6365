import numpy as np
import pytest
from traitlets import TraitError

from ebcbf.barrier import (
    AffineThreshold,
    BarrierSpec,
    EnergyConstraint,
    barrier_value_and_gradient,
    combine,
    constraint_margin,
    grad_h_eb,
    h_eb,
    h_eb_batch,
    softmin_weights,
    true_margin,
    true_margin_batch,
)
from ebcbf.errors import ConfigError, InputError, StateError
from ebcbf.gp import EnergyPosterior, hamiltonian_mean_gradient, posterior_kinetic
from ebcbf.utils import beta_from_eta

MIXED = [
    {"kind": "kinematic", "threshold": {"offset": 1.0, "gain": [1.0]}},
    {"kind": "total_lower", "threshold": 0.15},
    {"kind": "total_upper", "threshold": 0.75},
]


def energies(mu_H, sd_H, mu_T=0.0, sd_T=0.0, mu_V=0.0, sd_V=0.0):
    a = np.atleast_1d
    return EnergyPosterior(
        mu_T=a(mu_T), var_T=a(sd_T ** 2), mu_V=a(mu_V), var_V=a(sd_V ** 2),
        mu_H=a(mu_H), var_H=a(sd_H ** 2),
    )


def test_total_upper_margin():
    c = EnergyConstraint("total_upper", 0.75)
    margin = c.margins_from(np.zeros((1, 2)), energies(0.5, 0.1), beta=1.0)
    assert margin[0] == pytest.approx(0.15)


def test_lower_bound_uses_lower_band():
    c = EnergyConstraint("total_lower", 0.15)
    assert c.band_direction == "lower"
    margin = c.margins_from(np.zeros((1, 2)), energies(0.5, 0.1), beta=1.0)
    assert margin[0] == pytest.approx(0.25)


@pytest.mark.parametrize(
    "kind, expected",
    [
        ("kinetic_upper", 2.0 - 0.3 - 2 * 0.1),
        ("potential_upper", 2.0 - 0.4 - 2 * 0.2),
        ("total_upper", 2.0 - 0.7 - 2 * 0.25),
    ],
)
def test_upper_margins(kind, expected):
    e = energies(0.7, 0.25, mu_T=0.3, sd_T=0.1, mu_V=0.4, sd_V=0.2)
    c = EnergyConstraint(kind, 2.0)
    assert c.band_direction == "upper"
    assert c.margins_from(np.zeros((1, 2)), e, beta=2.0)[0] == pytest.approx(expected)


def test_kinematic_margin():
    c = EnergyConstraint.from_config(MIXED[0])
    assert c.band_direction is None
    np.testing.assert_allclose(c.margins_from(np.array([[-0.5, 3.0], [2.0, 0.0]]), None, 1.0), [0.5, 3.0])


def test_affine_threshold():
    t = AffineThreshold.from_config({"offset": 0.5, "gain": [2.0]})
    np.testing.assert_allclose(t(np.array([[1.0], [-1.0]])), [2.5, -1.5])
    assert AffineThreshold.from_config(3)(np.zeros((2, 1))).tolist() == [3.0, 3.0]
    with pytest.raises(InputError):
        t(np.zeros((1, 2)))
    with pytest.raises(ConfigError):
        AffineThreshold.from_config("q + 1")
    with pytest.raises(ConfigError):
        AffineThreshold.from_config({"offset": 1, "slope": [1]})


def test_unknown_kind():
    with pytest.raises(ConfigError):
        EnergyConstraint("momentum_upper", 1.0)


def test_band_zero_is_mean_barrier(model):
    x = np.array([0.4, 0.5])
    c = EnergyConstraint("kinetic_upper", 1.0)
    mu_T, _ = posterior_kinetic(model, 0.4, 0.5)
    assert constraint_margin(c, model, x, 0.0) == pytest.approx(1.0 - mu_T)


def test_conservatism_is_monotone(model):
    spec = BarrierSpec(constraints=MIXED + [{"kind": "kinetic_upper", "threshold": 1.0}])
    Xs = np.random.default_rng(0).uniform(-1.5, 1.5, size=(25, 2))
    previous = h_eb_batch(spec, model, Xs, beta=0.0)
    for beta in (0.5, 1.0, 2.0, 3.0):
        current = h_eb_batch(spec, model, Xs, beta=beta)
        assert np.all(current <= previous + 1e-12)
        previous = current


def test_combine_bounds():
    margins = np.random.default_rng(1).normal(size=(50, 3))
    tau = 20.0
    soft = combine(margins, "softmin", tau)
    exact = combine(margins, "exact_min", tau)
    np.testing.assert_array_equal(exact, margins.min(axis=1))
    assert np.all(soft <= exact + 1e-12)
    assert np.all(soft >= exact - np.log(3) / tau - 1e-12)


def test_single_constraint_modes(model):
    x = np.array([0.3, -0.4])
    constraint = {"kind": "total_upper", "threshold": 0.9}
    soft = BarrierSpec(constraints=[constraint])
    exact = BarrierSpec(constraints=[constraint], combine_mode="exact_min")
    beta = soft.band_multiplier()
    margin = constraint_margin(soft.energy_constraints[0], model, x, beta)
    assert h_eb(exact, model, x) == pytest.approx(margin)
    assert h_eb(soft, model, x) == pytest.approx(margin)


def test_mixed_barrier_modes(model):
    x = np.array([0.6, 0.7])
    soft = BarrierSpec(constraints=MIXED)
    exact = BarrierSpec(constraints=MIXED, combine_mode="exact_min")
    h_soft, h_exact = h_eb(soft, model, x), h_eb(exact, model, x)
    assert h_exact - np.log(3) / soft.softmin_temperature <= h_soft <= h_exact


def test_kinematic_gradient(model):
    spec = BarrierSpec(constraints=[MIXED[0]])
    x = np.array([0.3, 1.7])
    h, grad = barrier_value_and_gradient(spec, model, x)
    assert h == pytest.approx(1.3)
    np.testing.assert_allclose(grad, [1.0, 0.0], atol=1e-8)


def test_total_upper_gradient_is_mean_gradient(model):
    spec = BarrierSpec(constraints=[{"kind": "total_upper", "threshold": 10.0}])
    x = np.array([0.4, -0.2])
    grad = grad_h_eb(spec, model, x, beta=0.0)
    np.testing.assert_allclose(grad, -hamiltonian_mean_gradient(model, x), rtol=1e-4, atol=1e-7)


def test_softmin_gradient_is_convex_combination(model):
    spec = BarrierSpec(constraints=MIXED, softmin_temperature=5.0)
    x = np.array([0.2, 0.5])
    beta = 1.0
    grad = grad_h_eb(spec, model, x, beta)
    margins = np.array([constraint_margin(c, model, x, beta) for c in spec.energy_constraints])
    weights = softmin_weights(margins, spec.softmin_temperature)[0]
    assert weights.sum() == pytest.approx(1.0)
    assert np.all(weights >= 0)
    parts = [
        grad_h_eb(BarrierSpec(constraints=[c]), model, x, beta) for c in MIXED
    ]
    np.testing.assert_allclose(grad, weights @ np.array(parts), rtol=1e-4, atol=1e-7)


def test_gradient_half_step_oracle(model):
    spec = BarrierSpec()
    x = np.array([0.5, 0.6])
    grad = grad_h_eb(spec, model, x)
    oracle = []
    for i in range(2):
        e = np.zeros(2)
        e[i] = 5e-6 * (1 + abs(x[i]))
        oracle.append((h_eb(spec, model, x + e) - h_eb(spec, model, x - e)) / (2 * e[i]))
    np.testing.assert_allclose(grad, oracle, rtol=1e-3, atol=1e-6)


def test_true_margins(system):
    spec = BarrierSpec(constraints=MIXED)
    Xs = np.array([[0.0, 0.0], [0.6, 0.7], [-1.2, 0.0], [1.0, 1.0]])
    # H = 0, 0.425, 0.72, 1.0
    np.testing.assert_allclose(
        true_margin_batch(spec, system, Xs), [-0.15, 0.275, -0.2, -0.25]
    )
    assert true_margin(spec, system, Xs[1]) == pytest.approx(0.275)


def test_unfitted_model():
    with pytest.raises(StateError):
        h_eb(BarrierSpec(), None, np.zeros(2))


def test_band_multiplier_config():
    spec = BarrierSpec()
    assert spec.band_multiplier() == pytest.approx(np.sqrt(2 * np.log(40)))
    spec.uniform_points = 441
    assert spec.band_multiplier() == pytest.approx(beta_from_eta(0.025, 441))
    spec.beta_eb = "eta=0.05"
    assert spec.band_multiplier() == pytest.approx(np.sqrt(2 * np.log(20)))
    spec.beta_eb = 1.5
    assert spec.band_multiplier() == 1.5


def test_constraints_config():
    spec = BarrierSpec()
    assert [c.kind for c in spec.energy_constraints] == ["kinetic_upper"]
    spec.constraints = MIXED
    assert [c.kind for c in spec.energy_constraints] == [
        "kinematic", "total_lower", "total_upper"
    ]
    assert spec.energy_constraints[0].to_config() == {"kind": "kinematic", "threshold": {"offset": 1.0, "gain": [1.0]}}


@pytest.mark.parametrize(
    "kwargs",
    [
        {"constraints": []},
        {"constraints": [{"kind": "nope"}]},
        {"softmin_temperature": 0.0},
        {"eta_eb": 1.5},
        {"beta_eb": "eta=2"},
        {"beta_eb": -1.0},
        {"combine_mode": "max"},
    ],
)
def test_invalid_barrier_config(kwargs):
    with pytest.raises(TraitError):
        BarrierSpec(**kwargs)


@pytest.mark.slow
def test_learned_safe_boundary_is_truly_safe(regime_model, system):
    spec = BarrierSpec(constraints=MIXED, combine_mode="exact_min")
    axis = np.linspace(-1.5, 1.5, 41)
    Xs = np.array([[q, p] for q in axis for p in axis])
    safe = (h_eb_batch(spec, regime_model, Xs) >= 0).reshape(41, 41)
    # learned-safe cells with at least one learned-unsafe neighbour
    padded = np.pad(safe, 1, constant_values=True)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    boundary = safe & ~interior
    assert boundary.any()
    true = true_margin_batch(spec, system, Xs).reshape(41, 41)
    assert np.mean(true[boundary] >= 0) >= 0.99
