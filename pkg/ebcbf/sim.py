"""
Ground-truth benchmarks, integration, closed-loop rollouts and Monte-Carlo
verification of Bayesian forward invariance
"""
from collections import Counter, namedtuple
from concurrent.futures import ThreadPoolExecutor
import time

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from traitlets import Bool, Float, Integer, List, TraitError, validate
from traitlets.config import LoggingConfigurable

from . import metrics
from .barrier import h_eb, true_margin
from .errors import ConfigError, EBCBFError, InputError, NumericalError
from .gp import (
    Dataset,
    drift_joint_posterior,
    input_names,
    jittered_cholesky,
    require_fitted,
    state_names,
    write_commented_csv,
)
from .kernels import PhsStructure
from .safety_filter import solve_filter
from .utils import rng_stream, wilson_interval


class MassSpring(LoggingConfigurable):
    """Mass-spring(-damper) benchmark in canonical coordinates x = (q, p)

    H(q, p) = p^2 / (2 mass) + stiffness q^2 / 2 with J canonical,
    R = diag(0, damping) and the input acting on the momentum.
    """

    stiffness = Float(1.0, config=True, help="Spring constant k")
    mass = Float(1.0, config=True, help="Mass m")
    damping = Float(0.0, config=True, help="Viscous damping d >= 0")

    @validate("stiffness", "mass")
    def _positive(self, proposal):
        if proposal.value <= 0:
            raise TraitError(f"{proposal.trait.name} must be positive, got {proposal.value}")
        return proposal.value

    @validate("damping")
    def _valid_damping(self, proposal):
        if proposal.value < 0:
            raise TraitError(f"damping must be >= 0, got {proposal.value}")
        return proposal.value

    n = 2
    m = 1

    @property
    def J(self):
        return np.array([[0.0, 1.0], [-1.0, 0.0]])

    @property
    def R(self):
        return np.diag([0.0, self.damping])

    @property
    def G(self):
        return np.array([[0.0], [1.0]])

    def phs(self):
        """The known structure (J, R, G) handed to the GP"""
        return PhsStructure(self.n, self.m, self.J, self.R, self.G)

    def kinetic(self, Xs):
        Xs = np.atleast_2d(Xs)
        return Xs[:, 1] ** 2 / (2 * self.mass)

    def potential(self, Xs):
        Xs = np.atleast_2d(Xs)
        return 0.5 * self.stiffness * Xs[:, 0] ** 2

    def hamiltonian(self, x):
        x = np.asarray(x, dtype=float)
        return float(self.kinetic(x)[0] + self.potential(x)[0])

    def energy_components(self, Xs):
        """(T, V, H) at the rows of Xs"""
        T = self.kinetic(Xs)
        V = self.potential(Xs)
        return T, V, T + V

    def grad_hamiltonian(self, x):
        q, p = np.asarray(x, dtype=float)
        return np.array([self.stiffness * q, p / self.mass])

    def drift(self, x):
        """(J - R) grad H"""
        return (self.J - self.R) @ self.grad_hamiltonian(x)

    def input_matrix(self, x):
        return self.G

    def to_dict(self):
        return {"stiffness": self.stiffness, "mass": self.mass, "damping": self.damping}


class Simulation(LoggingConfigurable):
    """Time span, step and measurement model of simulated experiments"""

    t_start = Float(0.0, config=True, help="Start time (s)")
    t_stop = Float(20.0, config=True, help="End time (s)")

    dt = Float(
        4e-3,
        config=True,
        help="""Fixed integration step (s)""",
    )

    noise_std = Float(
        0.05,
        config=True,
        help="""Standard deviation sigma_x of the additive state noise""",
    )

    keep_probability = Float(
        0.5,
        config=True,
        help="""
        Probability with which each integration time point is kept in the
        dataset (independent Bernoulli subsampling).
        """,
    )

    seed = Integer(0, config=True, help="Seed all random streams are derived from")

    x0 = List(Float(), [1.0, 0.0], config=True, help="Initial state of the data run")

    input_amplitude = Float(
        0.0,
        config=True,
        help="""Amplitude of the sinusoidal excitation u(t) = A sin(2 pi f t)""",
    )

    input_frequency = Float(0.5, config=True, help="Frequency f of the excitation (Hz)")

    @validate("dt")
    def _valid_dt(self, proposal):
        if proposal.value <= 0:
            raise TraitError(f"dt must be positive, got {proposal.value}")
        return proposal.value

    @validate("noise_std")
    def _valid_noise(self, proposal):
        if proposal.value < 0:
            raise TraitError(f"noise_std must be >= 0, got {proposal.value}")
        return proposal.value

    @validate("keep_probability")
    def _valid_keep(self, proposal):
        if not 0 < proposal.value <= 1:
            raise TraitError(f"keep_probability must lie in (0, 1], got {proposal.value}")
        return proposal.value

    def times(self):
        if self.t_stop <= self.t_start:
            raise ConfigError(f"t_stop={self.t_stop} must exceed t_start={self.t_start}")
        steps = int(round((self.t_stop - self.t_start) / self.dt))
        return self.t_start + self.dt * np.arange(steps + 1)

    def input_signal(self, m=1):
        amplitude, frequency = self.input_amplitude, self.input_frequency

        def signal(t):
            return np.full(m, amplitude * np.sin(2 * np.pi * frequency * t))

        return signal


class StateGrid(LoggingConfigurable):
    """Rectangular state grid for posterior surfaces and drift draws"""

    lower = List(Float(), [-2.0, -2.0], config=True, help="Lower corner of the grid")
    upper = List(Float(), [2.0, 2.0], config=True, help="Upper corner of the grid")
    points = List(Integer(), [61, 61], config=True, help="Grid points per dimension")

    def axes(self):
        if not (len(self.lower) == len(self.upper) == len(self.points)):
            raise ConfigError("grid lower, upper and points must have equal lengths")
        for lo, hi, count in zip(self.lower, self.upper, self.points):
            if not lo < hi or count < 2:
                raise ConfigError(f"invalid grid axis [{lo}, {hi}] with {count} points")
        return [np.linspace(lo, hi, count) for lo, hi, count in zip(self.lower, self.upper, self.points)]

    @property
    def shape(self):
        return tuple(self.points)

    def states(self):
        """All grid states, shape (N, n), first axis varying slowest"""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.column_stack([axis.reshape(-1) for axis in mesh])

    def contains(self, x):
        x = np.asarray(x)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def to_dict(self):
        return {"lower": list(self.lower), "upper": list(self.upper), "points": list(self.points)}


def rk4_step(f, x, u, dt):
    """Classical Runge-Kutta step of dx/dt = f(x, u) with u held fixed"""
    if dt <= 0:
        raise InputError(f"dt must be positive, got {dt}")
    k1 = f(x, u)
    k2 = f(x + 0.5 * dt * k1, u)
    k3 = f(x + 0.5 * dt * k2, u)
    k4 = f(x + dt * k3, u)
    derivative = (k1 + 2 * k2 + 2 * k3 + k4) / 6
    if not np.all(np.isfinite(derivative)):
        raise NumericalError(f"non-finite derivative at x={x}")
    return x + dt * derivative


def closed_loop_field(dynamics):
    def f(x, u):
        return dynamics.drift(x) + dynamics.input_matrix(x) @ u

    return f


def simulate(system, sim_cfg, input_signal=None):
    """Noise-free trajectory of `system` on the simulation time grid

    Returns (times, states, inputs) with the input held constant over each
    step.
    """
    if input_signal is None:
        input_signal = sim_cfg.input_signal(system.m)
    times = sim_cfg.times()
    f = closed_loop_field(system)
    states = np.empty((times.size, system.n))
    inputs = np.empty((times.size, system.m))
    x = np.asarray(sim_cfg.x0, dtype=float)
    if x.size != system.n:
        raise ConfigError(f"x0 has dimension {x.size}, system has {system.n}")
    for k, t in enumerate(times):
        states[k] = x
        inputs[k] = input_signal(t)
        if k + 1 < times.size:
            x = rk4_step(f, x, inputs[k], times[k + 1] - t)
    return times, states, inputs


def generate_dataset(system, sim_cfg, input_signal=None):
    """Noisy, irregularly subsampled dataset of the true system

    Noise and the subsampling mask come from independent streams of
    ``sim_cfg.seed``.
    """
    times, states, inputs = simulate(system, sim_cfg, input_signal)
    keep = rng_stream(sim_cfg.seed, "subsample").random(times.size) < sim_cfg.keep_probability
    noise = rng_stream(sim_cfg.seed, "noise").standard_normal(states.shape)
    if not keep.any():
        raise ConfigError("no samples left after subsampling")
    noisy = states + sim_cfg.noise_std * noise
    sim_cfg.log.info("kept %i of %i samples", int(keep.sum()), times.size)
    return Dataset(times[keep], noisy[keep], inputs[keep])


class Trajectory:
    """A closed-loop rollout

    ``h_eb_values``
        barrier value at every recorded state
    ``events``
        list of (time, name) of the first crossings and terminations
    """

    def __init__(self, times, states, inputs, h_eb_values, events=None, true_margins=None):
        self.times = np.asarray(times, dtype=float)
        self.states = np.asarray(states, dtype=float)
        self.inputs = np.asarray(inputs, dtype=float).reshape(self.times.size, -1)
        self.h_eb_values = np.asarray(h_eb_values, dtype=float)
        self.events = list(events or [])
        self.true_margins = None if true_margins is None else np.asarray(true_margins, dtype=float)

    def __len__(self):
        return self.times.size

    @property
    def min_h_eb(self):
        return float(self.h_eb_values.min())

    def event_names(self):
        return [name for _, name in self.events]

    def first_event(self, name):
        for t, event in self.events:
            if event == name:
                return t
        return None

    def to_csv(self, path, comments=()):
        """Columns t, state names, input names, h_eb, event"""
        n, m = self.states.shape[1], self.inputs.shape[1]
        header = ["t"] + state_names(n) + input_names(m) + ["h_eb", "event"]
        marks = {}
        for t, name in self.events:
            marks.setdefault(int(np.argmin(np.abs(self.times - t))), []).append(name)
        rows = []
        for k in range(self.times.size):
            row = [self.times[k], *self.states[k], *self.inputs[k], self.h_eb_values[k]]
            rows.append(row + [";".join(marks.get(k, []))])
        write_commented_csv(path, header, rows, comments)


class LeftDomain(Exception):
    """Raised when a rollout leaves the domain of a gridded drift field"""


class GridDriftField:
    """Multilinear interpolation of one drift draw on a StateGrid"""

    def __init__(self, axes, values, input_matrix):
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        shape = tuple(a.size for a in self.axes)
        values = np.asarray(values, dtype=float)
        self.n = values.shape[-1]
        self.lower = np.array([a[0] for a in self.axes])
        self.upper = np.array([a[-1] for a in self.axes])
        self.interpolator = RegularGridInterpolator(
            self.axes, values.reshape(shape + (self.n,)), method="linear"
        )
        self._input_matrix = input_matrix

    def drift(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < self.lower) or np.any(x > self.upper):
            raise LeftDomain(f"state {x} left the drift grid")
        return self.interpolator(x[None])[0]

    def input_matrix(self, x):
        return self._input_matrix(x)


def rollout_closed_loop(
    dynamics,
    filter_cfg,
    x0,
    sim_cfg,
    spec,
    model,
    nominal=None,
    horizon=None,
    dt=None,
    system=None,
):
    """Integrate dx/dt = f(x) + g(x) u under the nominal or filtered input

    ``dynamics`` provides ``drift(x)`` and ``input_matrix(x)``: the true
    system or a GridDriftField. With ``filter_cfg`` None the nominal input
    is applied unfiltered; ``nominal`` overrides the nominal controller of
    ``filter_cfg``. When ``system`` is given its true energies are scored
    along the path as well.

    Events: ``barrier_crossing`` (h_EB < 0), ``true_crossing`` (true margin
    < 0) and ``left_domain`` (the rollout left a gridded drift field, which
    ends it).
    """
    model = require_fitted(model)
    dt = sim_cfg.dt if dt is None else dt
    if horizon is None:
        t0, span = sim_cfg.t_start, sim_cfg.t_stop - sim_cfg.t_start
    else:
        t0, span = 0.0, horizon
    steps = int(round(span / dt))
    if steps < 1:
        raise ConfigError(f"rollout horizon {span} is shorter than one step of {dt}")
    m = model.phs.m
    if nominal is None:
        if filter_cfg is not None:
            nominal = lambda x: filter_cfg.nominal_control(x, m)  # noqa: E731
        else:
            nominal = lambda x: np.zeros(m)  # noqa: E731
    f = closed_loop_field(dynamics)

    x = np.asarray(x0, dtype=float)
    times, states, inputs, hs, margins = [], [], [], [], []
    events = []
    tic = time.perf_counter()
    for k in range(steps + 1):
        t = t0 + k * dt
        u_nom = nominal(x)
        if filter_cfg is not None:
            solution = solve_filter(model, spec, filter_cfg, x, u_nom, t=t)
            u, h = solution.u, solution.h
        else:
            u, h = np.asarray(u_nom, dtype=float).reshape(m), h_eb(spec, model, x)
        times.append(t)
        states.append(x)
        inputs.append(u)
        hs.append(h)
        if h < 0 and "barrier_crossing" not in [e for _, e in events]:
            events.append((t, "barrier_crossing"))
        if system is not None:
            margin = true_margin(spec, system, x)
            margins.append(margin)
            if margin < 0 and "true_crossing" not in [e for _, e in events]:
                events.append((t, "true_crossing"))
        if k == steps:
            break
        try:
            x = rk4_step(f, x, u, dt)
        except LeftDomain:
            events.append((t + dt, "left_domain"))
            break
    metrics.ROLLOUT_DURATION.labels(filtered=str(filter_cfg is not None)).observe(
        time.perf_counter() - tic
    )
    return Trajectory(
        times, states, inputs, hs, events, margins if system is not None else None
    )


class DriftFieldSampler:
    """Joint Gaussian draws of the posterior drift on the points of a grid

    The joint covariance is factored once; every draw uses its own
    counter-based stream so draws do not depend on evaluation order.
    """

    def __init__(self, model, grid_states):
        self.model = require_fitted(model)
        self.grid_states = np.atleast_2d(grid_states)
        self.mean, cov = drift_joint_posterior(self.model, self.grid_states)
        _, self.factor, self.jitter = jittered_cholesky(cov, "drift field covariance")
        P, n = self.grid_states.shape[0], self.model.n
        # marginal blocks matching what the draws actually carry
        blocks = cov.reshape(P, n, P, n)[np.arange(P), :, np.arange(P), :]
        self.marginal_cov = blocks + self.jitter * np.eye(n)

    def draw(self, seed, index=0):
        z = rng_stream(seed, "drift-field", index).standard_normal(self.mean.size)
        return (self.mean + self.factor @ z).reshape(-1, self.model.n)

    def mahalanobis_radii(self, values):
        """Per-point Mahalanobis radius of a draw around the posterior mean"""
        d = values - self.mean.reshape(-1, self.model.n)
        solved = np.linalg.solve(self.marginal_cov, d[..., None])[..., 0]
        return np.sqrt(np.maximum(np.sum(d * solved, axis=1), 0.0))


def sample_posterior_drift_field(model, grid_states, seed, n_draws=1):
    """Joint posterior drift draws at the grid points, shape (n_draws, P, n)"""
    sampler = DriftFieldSampler(model, grid_states)
    return np.stack([sampler.draw(seed, i) for i in range(n_draws)])


MonteCarloResult = namedtuple(
    "MonteCarloResult",
    [
        "safe_fraction",
        "wilson_lo",
        "wilson_hi",
        "n_samples",
        "safe_count",
        "true_safe_fraction",
        "credible_fraction",
        "events",
    ],
)


class MonteCarlo(LoggingConfigurable):
    """Settings of Monte-Carlo verification runs"""

    n_samples = Integer(200, config=True, help="Number of posterior drift draws")

    horizon = Float(10.0, config=True, help="Rollout horizon per draw (s)")

    dt = Float(4e-3, config=True, help="Rollout step (s)")

    workers = Integer(
        1,
        config=True,
        help="""
        Threads rolling out draws concurrently.

        Results do not depend on the number of workers.
        """,
    )

    confidence = Float(0.95, config=True, help="Confidence of the Wilson interval")

    x0 = List(Float(), [1.2, 0.0], config=True, help="Initial state of every rollout")

    filtered = Bool(True, config=True, help="Roll out with the safety filter")

    seed = Integer(0, config=True, help="Seed of the drift draws")

    crossing_tolerance = Float(
        1e-3,
        config=True,
        help="""
        A rollout is safe while h_EB stays above -tol (1 + |h_EB(x0)|).
        """,
    )

    @validate("n_samples", "workers")
    def _at_least_one(self, proposal):
        if proposal.value < 1:
            raise TraitError(f"{proposal.trait.name} must be >= 1, got {proposal.value}")
        return proposal.value

    @validate("confidence")
    def _valid_confidence(self, proposal):
        if not 0 < proposal.value < 1:
            raise TraitError(f"confidence must lie in (0, 1), got {proposal.value}")
        return proposal.value


def _score_rollout(trajectory, tolerance, h0):
    if "left_domain" in trajectory.event_names():
        return False
    return trajectory.min_h_eb >= -tolerance * (1 + abs(h0))


def mc_safety_estimate(
    model,
    spec,
    cfg,
    x0,
    n_samples,
    horizon,
    grid=None,
    system=None,
    mc=None,
    seed=None,
    filtered=None,
):
    """Fraction of posterior drift draws whose rollout stays in S_EB

    Each draw is realized as a GridDriftField on ``grid`` (a StateGrid) and
    rolled out over ``horizon`` seconds. Rollout errors count as unsafe.
    Returns a MonteCarloResult with the Wilson interval of the safe
    fraction, the true-set safe fraction when ``system`` is given, and the
    fraction of draws that lie inside the drift credible ellipsoid at every
    grid point.
    """
    model = require_fitted(model)
    if mc is None:
        mc = MonteCarlo()
    if grid is None:
        grid = StateGrid()
    seed = mc.seed if seed is None else seed
    filtered = mc.filtered if filtered is None else filtered
    x0 = np.asarray(x0, dtype=float)
    h0 = h_eb(spec, model, x0)
    if h0 < 0:
        raise InputError(f"initial state {x0} lies outside the safe set (h_EB={h0:.4g})")

    sampler = DriftFieldSampler(model, grid.states())
    axes = grid.axes()
    radius = cfg.radius()
    m = model.phs.m

    def run(index):
        values = sampler.draw(seed, index)
        credible = bool(np.all(sampler.mahalanobis_radii(values) <= radius))
        field = GridDriftField(axes, values, model.phs.g)
        try:
            traj = rollout_closed_loop(
                field,
                cfg if filtered else None,
                x0,
                None,
                spec,
                model,
                nominal=lambda x: cfg.nominal_control(x, m),
                horizon=horizon,
                dt=mc.dt,
                system=system,
            )
        except EBCBFError as e:
            mc.log.debug("draw %i failed: %s", index, e)
            true_safe = False if system is not None else None
            return False, true_safe, credible, [type(e).__name__]
        safe = _score_rollout(traj, mc.crossing_tolerance, h0)
        true_safe = None
        if system is not None:
            true_safe = "left_domain" not in traj.event_names() and bool(
                traj.true_margins.min() >= -mc.crossing_tolerance
            )
        return safe, true_safe, credible, traj.event_names()

    if mc.workers > 1:
        with ThreadPoolExecutor(max_workers=mc.workers) as pool:
            results = list(pool.map(run, range(n_samples)))
    else:
        results = [run(i) for i in range(n_samples)]

    safe_count = sum(1 for safe, _, _, _ in results if safe)
    lo, hi = wilson_interval(safe_count, n_samples, mc.confidence)
    events = Counter(name for *_, names in results for name in names)
    true_safe_fraction = None
    if system is not None:
        true_safe_fraction = sum(1 for _, ts, _, _ in results if ts) / n_samples
    result = MonteCarloResult(
        safe_fraction=safe_count / n_samples,
        wilson_lo=lo,
        wilson_hi=hi,
        n_samples=n_samples,
        safe_count=safe_count,
        true_safe_fraction=true_safe_fraction,
        credible_fraction=sum(1 for _, _, c, _ in results if c) / n_samples,
        events=dict(sorted(events.items())),
    )
    mc.log.info(
        "%i/%i draws safe (%.3f, Wilson [%.3f, %.3f])",
        safe_count, n_samples, result.safe_fraction, lo, hi,
    )
    return result
