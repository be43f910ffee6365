"""
Energy-aware Bayesian barriers

Every constraint turns one energy component of the GP posterior into a
margin that is nonnegative on its allowable set. Upper bounds consume the
upper credible band mu + beta sigma, lower bounds the lower band
mu - beta sigma, so a larger band multiplier never enlarges the set. The
margins are folded into one barrier by an exact or a smooth minimum.
"""
import numpy as np
from scipy.special import logsumexp, softmax
from traitlets import CaselessStrEnum, Dict, Float, Integer, List, TraitError, default, observe, validate
from traitlets.config import LoggingConfigurable

from .errors import ConfigError, InputError, NumericalError
from .gp import energy_posterior
from .utils import BandMultiplier, beta_from_eta

KINDS = ("kinematic", "kinetic_upper", "potential_upper", "total_upper", "total_lower")
# relative central-difference step
FD_STEP = 1e-5


def configuration_part(Xs):
    """The q block of every row of Xs (the full row for odd dimensions)"""
    Xs = np.atleast_2d(Xs)
    n = Xs.shape[1]
    return Xs[:, : n // 2] if n % 2 == 0 else Xs


class AffineThreshold:
    """Threshold offset + gain^T q

    A bare number is a constant threshold.
    """

    def __init__(self, offset=0.0, gain=None):
        self.offset = float(offset)
        self.gain = None if gain is None else np.atleast_1d(np.asarray(gain, dtype=float))
        if not np.isfinite(self.offset) or (self.gain is not None and not np.all(np.isfinite(self.gain))):
            raise ConfigError("threshold offset and gain must be finite")

    @classmethod
    def from_config(cls, value):
        if isinstance(value, (int, float)):
            return cls(value)
        if isinstance(value, dict):
            unknown = set(value) - {"offset", "gain"}
            if unknown:
                raise ConfigError(f"unknown threshold keys {sorted(unknown)}")
            return cls(value.get("offset", 0.0), value.get("gain"))
        raise ConfigError(
            f"threshold must be a number or {{'offset': c, 'gain': [...]}}, got {value!r}"
        )

    def to_config(self):
        if self.gain is None:
            return self.offset
        return {"offset": self.offset, "gain": self.gain.tolist()}

    def __call__(self, Q):
        Q = np.atleast_2d(Q)
        if self.gain is None:
            return np.full(len(Q), self.offset)
        if Q.shape[1] != self.gain.size:
            raise InputError(
                f"threshold gain has {self.gain.size} entries, configuration has {Q.shape[1]}"
            )
        return self.offset + Q @ self.gain


class EnergyConstraint:
    """One energy-aware constraint of an allowable set

    ``kind``
        kinematic: h_q(q) >= 0, with h_q given by the threshold itself;
        kinetic_upper: T <= T_bar(q); potential_upper: V <= V_bar(q);
        total_upper: H <= H_bar(q); total_lower: H >= H_low(q)
    ``threshold``
        an AffineThreshold, a number, or its config dict
    """

    def __init__(self, kind, threshold):
        if kind not in KINDS:
            raise ConfigError(f"unknown constraint kind {kind!r}, must be one of {KINDS}")
        self.kind = kind
        if not isinstance(threshold, AffineThreshold):
            threshold = AffineThreshold.from_config(threshold)
        self.threshold = threshold

    @property
    def band_direction(self):
        """Side of the credible band the constraint consumes"""
        if self.kind == "kinematic":
            return None
        return "lower" if self.kind == "total_lower" else "upper"

    @classmethod
    def from_config(cls, d):
        if not isinstance(d, dict) or "kind" not in d:
            raise ConfigError(f"constraint must be a dict with a 'kind' key, got {d!r}")
        unknown = set(d) - {"kind", "threshold"}
        if unknown:
            raise ConfigError(f"unknown constraint keys {sorted(unknown)}")
        return cls(d["kind"], d.get("threshold", 0.0))

    def to_config(self):
        return {"kind": self.kind, "threshold": self.threshold.to_config()}

    def margins_from(self, Xs, energies, beta):
        """Margins at the rows of Xs given their energy posterior"""
        limit = self.threshold(configuration_part(Xs))
        if self.kind == "kinematic":
            return limit
        mu, var = {
            "kinetic_upper": (energies.mu_T, energies.var_T),
            "potential_upper": (energies.mu_V, energies.var_V),
            "total_upper": (energies.mu_H, energies.var_H),
            "total_lower": (energies.mu_H, energies.var_H),
        }[self.kind]
        sigma = np.sqrt(np.maximum(var, 0.0))
        if self.band_direction == "lower":
            return (mu - beta * sigma) - limit
        return limit - (mu + beta * sigma)

    def true_margins(self, Xs, T, V, H):
        """Margins at the rows of Xs for known energies"""
        limit = self.threshold(configuration_part(Xs))
        return {
            "kinematic": lambda: limit,
            "kinetic_upper": lambda: limit - T,
            "potential_upper": lambda: limit - V,
            "total_upper": lambda: limit - H,
            "total_lower": lambda: H - limit,
        }[self.kind]()

    def __repr__(self):
        return f"EnergyConstraint({self.kind!r}, {self.threshold.to_config()!r})"


class BarrierSpec(LoggingConfigurable):
    """Constraints and band settings of an energy-aware Bayesian barrier"""

    constraints = List(
        Dict(),
        [{"kind": "kinetic_upper", "threshold": {"offset": 1.0, "gain": [1.0]}}],
        config=True,
        help="""
        Constraints of the allowable set.

        Each entry is a dict with 'kind' (kinematic, kinetic_upper,
        potential_upper, total_upper or total_lower) and 'threshold'
        (a number or {'offset': c, 'gain': [g1, ...]} giving c + g^T q).
        For kinematic constraints the threshold is h_q(q) itself,
        e.g. q >= -1 is {'offset': 1, 'gain': [1]}. The default keeps the
        kinetic energy below q + 1, which the input can act on.
        """,
    )

    energy_constraints = List()

    @default("energy_constraints")
    def _default_energy_constraints(self):
        return [EnergyConstraint.from_config(c) for c in self.constraints]

    @validate("constraints")
    def _valid_constraints(self, proposal):
        if not proposal.value:
            raise TraitError("a barrier needs at least one constraint")
        for c in proposal.value:
            try:
                EnergyConstraint.from_config(c)
            except ConfigError as e:
                raise TraitError(str(e))
        return proposal.value

    @observe("constraints")
    def _update_energy_constraints(self, change):
        self.energy_constraints = [EnergyConstraint.from_config(c) for c in change.new]

    beta_eb = BandMultiplier(
        None,
        allow_none=True,
        config=True,
        help="""
        Credible band multiplier of the energy components.

        A number, or 'eta=0.025' / 'eta=0.025,points=441'.
        When unset it is derived from eta_eb and uniform_points.
        """,
    )

    eta_eb = Float(
        0.025,
        config=True,
        help="""Confidence level eta of the energy bands when beta_eb is unset""",
    )

    uniform_points = Integer(
        0,
        config=True,
        help="""
        Number of evaluation points the band must hold on simultaneously.

        0 (the default) gives pointwise bands with no union-bound inflation
        over the evaluation grid. Set it to the number of grid points (441
        for a 21 x 21 grid) to make the multiplier sqrt(2 ln(points / eta))
        hold on every grid point at once.
        """,
    )

    @validate("eta_eb")
    def _valid_eta(self, proposal):
        if not 0 < proposal.value < 1:
            raise TraitError(f"eta_eb must lie in (0, 1), got {proposal.value}")
        return proposal.value

    softmin_temperature = Float(
        20.0,
        config=True,
        help="""Temperature tau of the soft-min -1/tau log sum exp(-tau h_i)""",
    )

    @validate("softmin_temperature")
    def _valid_temperature(self, proposal):
        if proposal.value <= 0:
            raise TraitError(f"softmin_temperature must be positive, got {proposal.value}")
        return proposal.value

    combine_mode = CaselessStrEnum(
        ["softmin", "exact_min"],
        "softmin",
        config=True,
        help="""How constraint margins are folded into one barrier""",
    )

    def band_multiplier(self):
        if self.beta_eb is not None:
            return self.beta_eb
        return beta_from_eta(self.eta_eb, max(1, self.uniform_points))

    def needs_energies(self):
        return any(c.kind != "kinematic" for c in self.energy_constraints)


def _margin_matrix(spec, model, Xs, beta=None):
    """Margins of every constraint at every row of Xs, shape (P, C)"""
    if not spec.energy_constraints:
        raise ConfigError("a barrier needs at least one constraint")
    Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
    beta = spec.band_multiplier() if beta is None else beta
    energies = energy_posterior(model, Xs) if spec.needs_energies() else None
    M = np.column_stack([c.margins_from(Xs, energies, beta) for c in spec.energy_constraints])
    if not np.all(np.isfinite(M)):
        raise NumericalError(f"non-finite barrier margin near {Xs[0]}")
    return M


def combine(margins, mode, temperature):
    """Fold a (P, C) margin matrix into P barrier values"""
    margins = np.atleast_2d(margins)
    if mode == "exact_min":
        return margins.min(axis=1)
    return -logsumexp(-temperature * margins, axis=1) / temperature


def softmin_weights(margins, temperature):
    """Convex weights of the soft-min gradient over the constraints"""
    return softmax(-temperature * np.atleast_2d(margins), axis=1)


def constraint_margin(c, model, x, beta):
    """Margin of one constraint at one state"""
    x = np.asarray(x, dtype=float)
    energies = None if c.kind == "kinematic" else energy_posterior(model, x[None])
    return float(c.margins_from(x[None], energies, beta)[0])


def h_eb_batch(spec, model, Xs, beta=None):
    M = _margin_matrix(spec, model, Xs, beta)
    return combine(M, spec.combine_mode, spec.softmin_temperature)


def h_eb(spec, model, x, beta=None):
    """The energy-aware Bayesian barrier at one state"""
    return float(h_eb_batch(spec, model, np.asarray(x, dtype=float)[None], beta)[0])


def fd_steps(x):
    return FD_STEP * (1 + np.abs(x))


def barrier_value_and_gradient(spec, model, x, beta=None):
    """h_EB(x) and its central-difference gradient from one batched query"""
    x = np.asarray(x, dtype=float)
    n = x.size
    steps = fd_steps(x)
    offsets = np.diag(steps)
    Xs = np.vstack([x, x + offsets, x - offsets])
    values = h_eb_batch(spec, model, Xs, beta)
    grad = (values[1:n + 1] - values[n + 1:]) / (2 * steps)
    if not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite barrier gradient at {x}")
    return float(values[0]), grad


def grad_h_eb(spec, model, x, beta=None):
    """Central-difference gradient of h_EB with step 1e-5 (1 + |x_i|)"""
    return barrier_value_and_gradient(spec, model, x, beta)[1]


def true_margin_batch(spec, system, Xs):
    """Smallest true constraint margin at the rows of Xs

    ``system`` provides the ground-truth energies through
    ``energy_components(Xs) -> (T, V, H)``. The exact minimum is used, so
    a nonnegative value means membership of the true allowable set.
    """
    Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
    T, V, H = system.energy_components(Xs)
    M = np.column_stack([c.true_margins(Xs, T, V, H) for c in spec.energy_constraints])
    return M.min(axis=1)


def true_margin(spec, system, x):
    return float(true_margin_batch(spec, system, np.asarray(x, dtype=float)[None])[0])
