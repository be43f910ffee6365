"""
EB-CBF safety filter

The drift-side bound takes the worst case of grad h^T f + gamma h over the
credible ellipsoid {mu_f + Sigma_f^(1/2) v : |v| <= beta_f}, and the filter
returns the input closest to the nominal one that keeps

    Phi_low(x) + grad h(x)^T g(x) u >= 0
"""
from collections import namedtuple
from itertools import product

import numpy as np
from traitlets import Callable, Float, Integer, List, TraitError, validate
from traitlets.config import LoggingConfigurable

from . import metrics
from .barrier import barrier_value_and_gradient
from .errors import DegeneracyError, InfeasibilityError, InputError, NumericalError
from .gp import EIG_FLOOR, PSD_TOLERANCE, posterior_drift, require_fitted
from .log import log_filter_step
from .utils import BandMultiplier, beta_from_eta

# |g^T grad h| at or below this cannot move the barrier
DEGENERACY_TOL = 1e-10
FEASIBILITY_TOL = 1e-9


class FilterConfig(LoggingConfigurable):
    """Settings of the EB-CBF quadratic program"""

    gamma = Float(
        1.0,
        config=True,
        help="""Slope gamma of the class-K function alpha(h) = gamma h""",
    )

    @validate("gamma")
    def _valid_gamma(self, proposal):
        if proposal.value <= 0:
            raise TraitError(f"gamma must be positive, got {proposal.value}")
        return proposal.value

    beta_f = BandMultiplier(
        None,
        allow_none=True,
        config=True,
        help="""
        Radius of the drift credible ellipsoid.

        A number, or 'eta=0.025' / 'eta=0.025,points=441'.
        When unset it is derived from eta_dyn and uniform_points.
        """,
    )

    eta_dyn = Float(
        0.025,
        config=True,
        help="""Confidence level eta of the drift ellipsoid when beta_f is unset""",
    )

    uniform_points = Integer(
        0,
        config=True,
        help="""
        Number of states the ellipsoid must hold on simultaneously.

        0 (the default) gives a pointwise ellipsoid with no union-bound
        inflation over the rollout grid. Set it to the number of grid states
        (441 for a 21 x 21 grid) to make the radius sqrt(2 ln(points / eta))
        hold on every grid state at once.
        """,
    )

    @validate("eta_dyn")
    def _valid_eta(self, proposal):
        if not 0 < proposal.value < 1:
            raise TraitError(f"eta_dyn must lie in (0, 1), got {proposal.value}")
        return proposal.value

    input_bounds = List(
        List(Float(), minlen=2, maxlen=2),
        [],
        config=True,
        help="""
        Per-channel input bounds [[lo, hi], ...].

        Empty means unconstrained inputs.
        """,
    )

    @validate("input_bounds")
    def _valid_bounds(self, proposal):
        for lo, hi in proposal.value:
            if not lo <= hi:
                raise TraitError(f"input bound [{lo}, {hi}] is empty")
        return proposal.value

    nominal_gain = List(
        List(Float()),
        [],
        config=True,
        help="""
        Gain K (m x n) of the nominal controller u_nom = offset + K x.

        Empty means zero gain.
        """,
    )

    nominal_offset = List(
        Float(),
        [],
        config=True,
        help="""Offset of the nominal controller (empty means zero)""",
    )

    nominal = Callable(
        None,
        allow_none=True,
        config=True,
        help="""
        Nominal controller as a callable of the state.

        Takes precedence over nominal_gain and nominal_offset.
        """,
    )

    def radius(self):
        if self.beta_f is not None:
            return self.beta_f
        return beta_from_eta(self.eta_dyn, max(1, self.uniform_points))

    def bounds(self, m):
        """(lo, hi) arrays, or None for unconstrained inputs"""
        if not self.input_bounds:
            return None
        if len(self.input_bounds) != m:
            raise InputError(f"{len(self.input_bounds)} input bounds for {m} input channels")
        b = np.asarray(self.input_bounds, dtype=float)
        return b[:, 0], b[:, 1]

    def nominal_control(self, x, m):
        x = np.asarray(x, dtype=float)
        if self.nominal is not None:
            return np.asarray(self.nominal(x), dtype=float).reshape(m)
        u = np.zeros(m)
        if self.nominal_offset:
            u = u + np.asarray(self.nominal_offset, dtype=float).reshape(m)
        if self.nominal_gain:
            gain = np.asarray(self.nominal_gain, dtype=float)
            if gain.shape != (m, x.size):
                raise InputError(f"nominal_gain must be {m} x {x.size}, got {gain.shape}")
            u = u + gain @ x
        return u


FilterSolution = namedtuple(
    "FilterSolution",
    ["u", "u_nom", "psi", "phi", "h", "grad_h", "lg_h", "active", "degenerate"],
)


def psd_sqrt(S):
    """Symmetric PSD square root, eigenvalues floored at 1e-10 trace"""
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    trace = max(float(np.trace(S)), 0.0)
    if trace > 0 and w.min() < -PSD_TOLERANCE * trace:
        raise NumericalError(f"drift covariance has eigenvalue {w.min():.3g}")
    w = np.maximum(w, EIG_FLOOR * trace)
    return (V * np.sqrt(w)) @ V.T


def _phi_parts(model, spec, cfg, x):
    h, grad = barrier_value_and_gradient(spec, model, x)
    mu, cov = posterior_drift(model, x)
    spread = np.linalg.norm(psd_sqrt(cov) @ grad)
    phi = float(grad @ mu + cfg.gamma * h - cfg.radius() * spread)
    return h, grad, phi


def phi_lower(model, spec, cfg, x):
    """Worst case of grad h^T f + gamma h over the drift credible ellipsoid"""
    return _phi_parts(model, spec, cfg, np.asarray(x, dtype=float))[2]


def _box_halfspace_projection(u_nom, a, b, lo, hi):
    """Minimize |u - u_nom|^2 over lo <= u <= hi, a^T u >= b

    Every face of the box is enumerated with the halfspace either free or
    tight; the best feasible face projection is the optimum.
    """
    m = u_nom.size
    best, best_cost = None, np.inf
    for assignment in product((None, "lo", "hi"), repeat=m):
        u = u_nom.copy()
        free = np.array([s is None for s in assignment])
        for i, s in enumerate(assignment):
            if s == "lo":
                u[i] = lo[i]
            elif s == "hi":
                u[i] = hi[i]
        candidates = [u]
        a_free = a[free]
        if a_free @ a_free > DEGENERACY_TOL ** 2:
            shift = (b - a @ u) / (a_free @ a_free)
            tight = u.copy()
            tight[free] += shift * a_free
            candidates.append(tight)
        for c in candidates:
            scale = FEASIBILITY_TOL * (1 + abs(b))
            if np.any(c < lo - scale) or np.any(c > hi + scale) or a @ c < b - scale:
                continue
            cost = float(np.sum((c - u_nom) ** 2))
            if cost < best_cost:
                best, best_cost = np.clip(c, lo, hi), cost
    return best


def solve_filter(model, spec, cfg, x, u_nom=None, t=None):
    """Solve the EB-CBF quadratic program at one state

    Returns a FilterSolution. ``t`` is only used for error context and logs.
    """
    x = np.asarray(x, dtype=float)
    gp_model = require_fitted(model)
    m = gp_model.phs.m
    if u_nom is None:
        u_nom = cfg.nominal_control(x, m)
    u_nom = np.asarray(u_nom, dtype=float).reshape(m)
    h, grad, phi = _phi_parts(gp_model, spec, cfg, x)
    a = gp_model.phs.g(x).T @ grad
    psi = float(phi + a @ u_nom)
    degenerate = bool(np.linalg.norm(a) <= DEGENERACY_TOL)
    bounds = cfg.bounds(m)
    outside_box = bounds is not None and (np.any(u_nom < bounds[0]) or np.any(u_nom > bounds[1]))

    if psi >= 0 and not outside_box:
        u, active = u_nom.copy(), False
    elif psi < 0 and degenerate:
        metrics.FILTER_STEPS.labels(outcome="degenerate").inc()
        raise DegeneracyError(
            f"barrier constraint active (psi={psi:.4g}) but the input cannot act on it"
            f" at x={x}",
            t=t,
        )
    else:
        active = psi < 0
        if active:
            u = u_nom - a * psi / (a @ a)
        else:
            u = u_nom.copy()
        if bounds is not None and (np.any(u < bounds[0]) or np.any(u > bounds[1])):
            u = _box_halfspace_projection(u_nom, a, -phi, *bounds)
            if u is None:
                raise InfeasibilityError(
                    f"no input within bounds satisfies the barrier constraint at x={x}"
                    + (f" (t={t:.6g}s)" if t is not None else "")
                )

    solution = FilterSolution(
        u=u,
        u_nom=u_nom,
        psi=psi,
        phi=phi,
        h=h,
        grad_h=grad,
        lg_h=a,
        active=active,
        degenerate=degenerate and not active,
    )
    if solution.degenerate:
        outcome = "degenerate"
    else:
        outcome = "active" if active else "inactive"
    metrics.FILTER_STEPS.labels(outcome=outcome).inc()
    if t is not None:
        log_filter_step(t, solution)
    return solution


def filter_control(model, spec, cfg, x, u_nom):
    """Input closest to u_nom that satisfies the EB-CBF constraint"""
    return solve_filter(model, spec, cfg, x, u_nom).u


def ebcbf_constraint_residual(model, spec, cfg, x, u):
    """Phi_low(x) + grad h(x)^T g(x) u, nonnegative iff u is admissible"""
    x = np.asarray(x, dtype=float)
    gp_model = require_fitted(model)
    _, grad, phi = _phi_parts(gp_model, spec, cfg, x)
    a = gp_model.phs.g(x).T @ grad
    return float(phi + a @ np.asarray(u, dtype=float).reshape(a.size))
