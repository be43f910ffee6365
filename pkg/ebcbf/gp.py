"""
Gaussian-process identification of port-Hamiltonian systems from multistep labels.

A GP prior H ~ GP(0, k_base) on the Hamiltonian induces the drift prior
f = J_R grad H with the matrix kernel k_phs. Noisy sampled states are
projected with the multistep operators into labels

    Y = A_I X~ = B_I (f(X) + g(X) U) + eps,  eps ~ N(0, A_I (sigma_x^2 I) A_I^T)

and conditioning on Y gives closed-form posteriors for the drift, for the
Hamiltonian (anchored at the origin), and for its kinetic and potential
parts. All stacked vectors are state-major (see kernels).
"""
import csv
import json
import math
import os
from collections import namedtuple

import jsonschema
import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from tornado.log import app_log
from traitlets import Bool, Float, Integer, List, TraitError, validate
from traitlets.config import LoggingConfigurable

from . import metrics
from .errors import InitializationError, InputError, NumericalError, StateError
from .kernels import (
    KernelHyperparams,
    grad1_k_base,
    hf_cross,
    hf_cross_gradient,
    k_base_matrix,
    k_phs_cross,
    k_phs_gram,
    k_phs_gram_grads,
)
from .log import log_fit_iteration
from .multistep import MultistepOperators, assemble_operators, project_labels
from .utils import git_blob_hash

HERE = os.path.dirname(os.path.abspath(__file__))

# jitter escalation, relative to the mean diagonal
JITTER_START = 1e-10
JITTER_MAX = 1e-4
# eigenvalue floor of posterior covariances, relative to the trace
EIG_FLOOR = 1e-10
# negative eigenvalues beyond this (relative to the trace) are an error
PSD_TOLERANCE = 1e-6

MODEL_FORMAT_VERSION = 1


def state_names(n):
    if n == 2:
        return ["q", "p"]
    if n % 2 == 0:
        half = n // 2
        return [f"q{i + 1}" for i in range(half)] + [f"p{i + 1}" for i in range(half)]
    return [f"x{i + 1}" for i in range(n)]


def input_names(m):
    if m == 1:
        return ["u"]
    return [f"u{i + 1}" for i in range(m)]


def read_commented_csv(path):
    """Read a CSV file, returning (comment lines, header, float rows)"""
    comments, rows = [], []
    with open(path, newline="") as f:
        lines = [line for line in f if line.strip()]
    body = []
    for line in lines:
        if line.startswith("#"):
            comments.append(line[1:].strip())
        else:
            body.append(line)
    reader = csv.reader(body)
    try:
        header = next(reader)
    except StopIteration:
        raise InputError(f"{path} has no header row")
    for row in reader:
        try:
            rows.append([float(v) if v != "" else math.nan for v in row])
        except ValueError:
            raise InputError(f"{path}: non-numeric row {row}")
    return comments, header, rows


def write_commented_csv(path, header, rows, comments=()):
    with open(path, "w", newline="") as f:
        for comment in comments:
            f.write(f"# {comment}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if not isinstance(v, str) else v for v in row])


class Dataset:
    """Time-stamped noisy states and inputs

    ``times``
        K strictly increasing timestamps in seconds
    ``states``
        K x n array of noisy states
    ``inputs``
        K x m array of inputs applied at the sample times
    """

    def __init__(self, times, states, inputs=None):
        times = np.asarray(times, dtype=float).reshape(-1)
        states = np.asarray(states, dtype=float)
        if states.ndim != 2 or states.shape[0] != times.size:
            raise InputError(
                f"states must be a K x n array with K={times.size}, got shape {states.shape}"
            )
        if inputs is None:
            inputs = np.zeros((times.size, 0))
        inputs = np.asarray(inputs, dtype=float)
        if inputs.ndim == 1:
            inputs = inputs.reshape(times.size, -1)
        if inputs.shape[0] != times.size:
            raise InputError(f"inputs must have K={times.size} rows, got {inputs.shape[0]}")
        if np.any(np.diff(times) <= 0):
            raise InputError("dataset timestamps must be strictly increasing")
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(inputs))):
            raise InputError("dataset contains non-finite values")
        self.times = times
        self.states = states
        self.inputs = inputs

    @property
    def K(self):
        return self.times.size

    @property
    def n(self):
        return self.states.shape[1]

    @property
    def m(self):
        return self.inputs.shape[1]

    def __len__(self):
        return self.K

    def subset(self, indices):
        indices = np.asarray(indices, dtype=int)
        return Dataset(self.times[indices], self.states[indices], self.inputs[indices])

    def head(self, count):
        return self.subset(np.arange(min(count, self.K)))

    def thinned(self, max_points):
        """Keep at most `max_points` samples at a uniform index stride"""
        if not max_points or self.K <= max_points:
            return self
        indices = np.unique(np.round(np.linspace(0, self.K - 1, max_points)).astype(int))
        return self.subset(indices)

    def header(self):
        return ["t"] + state_names(self.n) + input_names(self.m)

    def to_csv(self, path, comments=()):
        rows = np.column_stack([self.times, self.states, self.inputs])
        write_commented_csv(path, self.header(), rows, comments)

    @classmethod
    def from_csv(cls, path, state_dim=None):
        """Read a dataset written by `to_csv`

        The state dimension is taken from the header when not given.
        """
        _, header, rows = read_commented_csv(path)
        if not header or header[0] != "t":
            raise InputError(f"{path}: first column must be 't', got {header[:1]}")
        if state_dim is None:
            state_dim = sum(1 for name in header[1:] if not name.startswith("u"))
        data = np.asarray(rows, dtype=float).reshape(-1, len(header))
        return cls(data[:, 0], data[:, 1:1 + state_dim], data[:, 1 + state_dim:])


def jittered_cholesky(K, name="covariance"):
    """Lower Cholesky factor of a symmetrized matrix, adding jitter if needed

    The first attempt uses the matrix as is, then jitter starts at
    JITTER_START times the mean diagonal and grows tenfold up to JITTER_MAX.
    Returns (matrix actually factored, factor, jitter).
    """
    K = 0.5 * (K + K.T)
    if K.size == 0:
        return K, K.copy(), 0.0
    mean_diag = float(np.mean(np.diag(K)))
    jitter = 0.0
    while True:
        Kj = K + jitter * np.eye(K.shape[0]) if jitter else K
        try:
            L = cholesky(Kj, lower=True, check_finite=True)
        except (LinAlgError, ValueError):
            pass
        else:
            if jitter:
                metrics.JITTER_ESCALATIONS.labels(matrix=name).inc()
                app_log.warning(
                    "added jitter %.3g (%.1e x mean diagonal) to factor %s",
                    jitter, jitter / mean_diag, name,
                )
            return Kj, L, jitter
        if not np.isfinite(mean_diag) or mean_diag <= 0:
            break
        if jitter == 0.0:
            jitter = JITTER_START * mean_diag
        elif jitter < JITTER_MAX * mean_diag * (1 - 1e-9):
            jitter *= 10
        else:
            break
    raise NumericalError(
        f"{name} of size {K.shape[0]} is not positive definite even with jitter"
        f" {JITTER_MAX:g} x mean diagonal"
    )


def floor_psd(S, relative_floor=EIG_FLOOR):
    """Symmetrize a covariance and floor its eigenvalues

    Eigenvalues are raised to ``relative_floor`` times the trace; a
    ``relative_floor`` of 0 clips at zero.
    """
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    if S.ndim == 2:
        return floor_psd(S[None], relative_floor)[0]
    w, V = np.linalg.eigh(S)
    trace = np.maximum(np.trace(S, axis1=-2, axis2=-1), 0.0)
    bad = w.min(axis=-1) < -PSD_TOLERANCE * np.maximum(trace, 1e-300)
    if np.any(bad & (trace > 0)):
        raise NumericalError(
            f"posterior covariance has eigenvalue {w.min():.3g} below tolerance"
        )
    floor = (relative_floor * trace)[..., None]
    w = np.maximum(w, floor)
    return np.einsum("...ij,...j,...kj->...ik", V, w, V)


def cov_y_parts(X, hp, phs, ops, jr=None):
    """K_Y = B K_phs B^T and the projected noise covariance"""
    if jr is None:
        jr = phs.jr_batch(X)
    Kphs = k_phs_gram(X, hp, phs, jr)
    B = ops.B
    KY = np.asarray(B @ np.asarray(B @ Kphs).T)
    return KY, ops.noise_covariance(hp.observation_noise_variance), Kphs


def build_cov_y(dataset, hp, phs, ops):
    """Projected observation covariance B K_phs B^T + A (sigma_x^2 I) A^T

    The result is symmetrized and carries whatever diagonal jitter was
    needed for its Cholesky factorization to succeed.
    """
    _check_shapes(dataset, phs, ops)
    KY, noise, _ = cov_y_parts(dataset.states, hp, phs, ops)
    C, _, _ = jittered_cholesky(KY + noise, "Cov(Y)")
    return C


def _check_shapes(dataset, phs, ops):
    if dataset.n != phs.n:
        raise InputError(f"dataset state dimension {dataset.n} != PHS dimension {phs.n}")
    if dataset.m != phs.m:
        raise InputError(f"dataset input dimension {dataset.m} != PHS input dimension {phs.m}")
    if ops.A.shape[1] != dataset.K * dataset.n:
        raise InputError(
            f"operators of width {ops.A.shape[1]} do not match {dataset.K} states"
            f" of dimension {dataset.n}"
        )


def projected_residual(dataset, phs, ops):
    """r = Y - B g(X) U"""
    Y = project_labels(ops, dataset.states.reshape(-1))
    return Y - ops.B @ phs.input_term(dataset.states, dataset.inputs)


def nlml(theta, dataset, phs, ops, jr=None, residual=None):
    """Negative log marginal likelihood at log-hyperparameters `theta`"""
    return nlml_and_gradient(theta, dataset, phs, ops, jr, residual, gradient=False)[0]


def nlml_and_gradient(theta, dataset, phs, ops, jr=None, residual=None, gradient=True):
    """NLML and its gradient with respect to the log-hyperparameters

    The gradient uses 1/2 tr((C^-1 - alpha alpha^T) dC/dtheta).
    """
    hp = KernelHyperparams.from_log(theta)
    X = dataset.states
    if jr is None:
        jr = phs.jr_batch(X)
    r = projected_residual(dataset, phs, ops) if residual is None else residual
    KY, noise, _ = cov_y_parts(X, hp, phs, ops, jr)
    _, L, _ = jittered_cholesky(KY + noise, "Cov(Y)")
    alpha = cho_solve((L, True), r)
    value = 0.5 * r @ alpha + np.sum(np.log(np.diag(L))) + 0.5 * r.size * math.log(2 * math.pi)
    if not gradient:
        return value, None
    W = cho_solve((L, True), np.eye(r.size)) - np.outer(alpha, alpha)
    B = ops.B
    # Q = B^T W B, so that tr(W B dK B^T) = sum(Q * dK)
    Q = np.asarray(B.T @ np.asarray(B.T @ W).T)
    grad = np.empty_like(theta)
    grad[0] = 0.5 * np.sum(W * KY)
    hp_grads = k_phs_gram_grads(X, hp, jr)
    for i, dK in enumerate(hp_grads):
        grad[1 + i] = 0.5 * np.sum(Q * dK)
    grad[-1] = 0.5 * np.sum(W * noise)
    return value, grad


class HyperparameterOptimizer(LoggingConfigurable):
    """Adaptive-moment (Adam) minimization of the NLML in log-space"""

    learning_rate = Float(
        0.01,
        config=True,
        help="""Step size of the adaptive-moment updates on log-hyperparameters""",
    )

    iterations = Integer(
        500,
        config=True,
        help="""
        Iteration budget of the optimizer.

        0 keeps the initial hyperparameters.
        """,
    )

    beta1 = Float(0.9, config=True, help="First-moment decay rate")
    beta2 = Float(0.999, config=True, help="Second-moment decay rate")
    epsilon = Float(1e-8, config=True, help="Denominator offset of the update")

    initial_signal_std = Float(1.0, config=True, help="Initial sigma_s")

    initial_lengthscales = List(
        Float(),
        [1.0],
        config=True,
        help="""
        Initial ARD lengthscales.

        A single value is repeated for every state dimension.
        """,
    )

    initial_noise_std = Float(0.1, config=True, help="Initial observation noise std sigma_x")

    log_interval = Integer(
        50,
        config=True,
        help="""Log progress at info-level every this many iterations""",
    )

    @validate("learning_rate", "initial_signal_std", "initial_noise_std")
    def _positive(self, proposal):
        if proposal.value <= 0:
            raise TraitError(f"{proposal.trait.name} must be positive, got {proposal.value}")
        return proposal.value

    @validate("iterations")
    def _valid_iterations(self, proposal):
        if proposal.value < 0:
            raise TraitError(f"iterations must be >= 0, got {proposal.value}")
        return proposal.value

    def initial(self, n):
        ls = np.asarray(self.initial_lengthscales, dtype=float)
        if ls.size == 1:
            ls = np.full(n, ls[0])
        if ls.size != n:
            raise InputError(
                f"{ls.size} initial lengthscales given for state dimension {n}"
            )
        return KernelHyperparams.from_std(self.initial_signal_std, ls, self.initial_noise_std)

    def minimize(self, objective, theta0):
        """Run the optimizer on `objective(theta) -> (value, grad)`

        Returns (best theta, trace) where the trace lists (iteration, nlml).
        """
        theta = np.array(theta0, dtype=float)
        try:
            value, grad = objective(theta)
        except NumericalError as e:
            raise InitializationError(f"NLML cannot be evaluated at the initial point: {e}")
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            raise InitializationError(f"NLML is not finite at the initial point: {value}")
        best_value, best_theta = value, theta.copy()
        trace = [(0, float(value))]
        log_fit_iteration(0, self.iterations, value, best_value, self.log_interval, self.log)
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        for it in range(1, self.iterations + 1):
            m = self.beta1 * m + (1 - self.beta1) * grad
            v = self.beta2 * v + (1 - self.beta2) * grad ** 2
            m_hat = m / (1 - self.beta1 ** it)
            v_hat = v / (1 - self.beta2 ** it)
            theta = theta - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)
            metrics.FIT_ITERATIONS.inc()
            try:
                value, grad = objective(theta)
            except NumericalError as e:
                self.log.warning("stopping at iteration %i: %s", it, e)
                break
            if not (np.isfinite(value) and np.all(np.isfinite(grad))):
                self.log.warning("stopping at iteration %i: non-finite NLML", it)
                break
            if value < best_value:
                best_value, best_theta = value, theta.copy()
            trace.append((it, float(value)))
            log_fit_iteration(it, self.iterations, value, best_value, self.log_interval, self.log)
        return best_theta, trace


def fit_hyperparameters(dataset, phs, ops, opt_config, trace=None):
    """Fit kernel hyperparameters by minimizing the NLML

    ``opt_config`` is a HyperparameterOptimizer. When ``trace`` is a list,
    the (iteration, nlml) pairs of the run are appended to it.
    """
    if dataset is None or dataset.K == 0 or ops.window_count == 0:
        raise InputError("fitting needs a nonempty dataset with at least one multistep window")
    _check_shapes(dataset, phs, ops)
    jr = phs.jr_batch(dataset.states)
    residual = projected_residual(dataset, phs, ops)

    def objective(theta):
        return nlml_and_gradient(theta, dataset, phs, ops, jr, residual)

    theta0 = opt_config.initial(dataset.n).to_log()
    best, run_trace = opt_config.minimize(objective, theta0)
    if trace is not None:
        trace.extend(run_trace)
    hp = KernelHyperparams.from_log(best)
    app_log.info("fitted %s", hp)
    return hp


class TrainedGp:
    """Hyperparameters plus the factorizations behind all posterior queries

    ``covY_factor``
        lower Cholesky factor of Cov(Y)
    ``kgg_factor``
        lower Cholesky factor of K_gg, the joint covariance of the anchor
        H(0) and the projected labels
    ``residual``
        Y - B g(X) U
    """

    def __init__(self, dataset, hp, phs, ops, anchor_value=0.0, anchor_noise_variance=0.0):
        _check_shapes(dataset, phs, ops)
        if hp.n != phs.n:
            raise InputError(f"{hp.n} lengthscales for state dimension {phs.n}")
        self.dataset = dataset
        self.hp = hp
        self.phs = phs
        self.ops = ops
        self.anchor = (np.zeros(phs.n), float(anchor_value))
        self.anchor_noise_variance = float(anchor_noise_variance)

        X = dataset.states
        self.jr = phs.jr_batch(X)
        if ops.window_count:
            self.residual = projected_residual(dataset, phs, ops)
            KY, noise, _ = cov_y_parts(X, hp, phs, ops, self.jr)
            cov_y, self.covY_factor, self.jitter = jittered_cholesky(KY + noise, "Cov(Y)")
        else:
            self.residual = np.zeros(0)
            cov_y = np.zeros((0, 0))
            self.covY_factor = np.zeros((0, 0))
            self.jitter = 0.0
        self.alpha_f = cho_solve((self.covY_factor, True), self.residual) if self.residual.size else self.residual

        origin = self.anchor[0][None]
        k00 = hp.signal_variance + self.anchor_noise_variance
        k0f = self._hf_rows(origin)
        Kgg = np.block([[np.array([[k00]]), k0f], [k0f.T, cov_y]])
        _, self.kgg_factor, _ = jittered_cholesky(Kgg, "K_gg")
        self.y_aug = np.r_[self.anchor[1], self.residual]
        self.alpha_g = cho_solve((self.kgg_factor, True), self.y_aug)

    is_fitted = True

    @property
    def n(self):
        return self.phs.n

    @property
    def window_count(self):
        return self.ops.window_count

    def _hf_rows(self, Xs):
        """K_Hf(x, X) for every row of Xs, shape (P, l*n)"""
        if not self.ops.window_count:
            return np.zeros((len(Xs), 0))
        rows = hf_cross(Xs, self.dataset.states, self.hp, self.phs, self.jr)
        return np.asarray(self.ops.B @ rows.T).T

    def kstar_g(self, Xs):
        """K_{*g}: covariance of H at Xs with (H(0), Y), shape (P, 1 + l*n)"""
        Xs = np.atleast_2d(Xs)
        k0 = k_base_matrix(Xs, self.anchor[0], self.hp)
        return np.hstack([k0, self._hf_rows(Xs)])

    def drift_cross(self, Xs):
        """k_Y(x*) = B k_phs(X, x*) for every row of Xs, shape (l*n, P*n)"""
        Xs = np.atleast_2d(Xs)
        if not self.ops.window_count:
            return np.zeros((0, len(Xs) * self.n))
        k = k_phs_cross(self.dataset.states, Xs, self.hp, self.phs, jr1=self.jr)
        return np.asarray(self.ops.B @ k)


def require_fitted(model):
    if isinstance(model, PhsGaussianProcess):
        model = model.model
    if model is None or not getattr(model, "is_fitted", False):
        raise StateError("the GP model has not been fitted")
    return model


def _check_query(model, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.n:
        raise InputError(f"query state has dimension {x.shape[-1]}, model has {model.n}")
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite query state {x}")
    return x


def posterior_drift_batch(model, Xs):
    """Drift posterior at every row of Xs: means (P, n) and covariances (P, n, n)"""
    model = require_fitted(model)
    Xs = np.atleast_2d(_check_query(model, Xs))
    n = model.n
    P = len(Xs)
    jr_s = model.phs.jr_batch(Xs)
    # hess12 at zero separation is sigma_s^2 diag(1 / l^2)
    H = model.hp.signal_variance * np.diag(1.0 / model.hp.lengthscales ** 2)
    prior = np.einsum("pab,bc,pdc->pad", jr_s, H, jr_s)
    kY = model.drift_cross(Xs)
    if kY.shape[0] == 0:
        return np.zeros((P, n)), floor_psd(prior)
    mean = (kY.T @ model.alpha_f).reshape(P, n)
    V = solve_triangular(model.covY_factor, kY, lower=True).reshape(-1, P, n)
    cov = prior - np.einsum("rpa,rpb->pab", V, V)
    return mean, floor_psd(cov)


def posterior_drift(model, x_star):
    """Posterior mean and covariance of the PHS drift at one state"""
    mean, cov = posterior_drift_batch(model, np.asarray(x_star, dtype=float)[None])
    return mean[0], cov[0]


def drift_joint_posterior(model, Xs):
    """Joint drift posterior over all rows of Xs

    Returns the stacked mean (P*n,) and the full covariance (P*n, P*n).
    """
    model = require_fitted(model)
    Xs = np.atleast_2d(_check_query(model, Xs))
    prior = k_phs_cross(Xs, Xs, model.hp, model.phs)
    kY = model.drift_cross(Xs)
    if kY.shape[0] == 0:
        return np.zeros(prior.shape[0]), 0.5 * (prior + prior.T)
    V = solve_triangular(model.covY_factor, kY, lower=True)
    cov = prior - V.T @ V
    return kY.T @ model.alpha_f, 0.5 * (cov + cov.T)


def _hamiltonian_solve(model, Xs):
    Kg = model.kstar_g(Xs)
    mean = Kg @ model.alpha_g
    V = solve_triangular(model.kgg_factor, Kg.T, lower=True)
    return mean, V


def hamiltonian_joint(model, Xs):
    """Joint posterior of H over the rows of Xs: mean (P,), covariance (P, P)"""
    model = require_fitted(model)
    Xs = np.atleast_2d(_check_query(model, Xs))
    mean, V = _hamiltonian_solve(model, Xs)
    cov = k_base_matrix(Xs, Xs, model.hp) - V.T @ V
    return mean, 0.5 * (cov + cov.T)


def posterior_hamiltonian(model, x_star):
    """Posterior mean and variance of the anchored Hamiltonian at one state"""
    model = require_fitted(model)
    x_star = _check_query(model, x_star)
    mean, V = _hamiltonian_solve(model, x_star[None])
    var = model.hp.signal_variance - float(V[:, 0] @ V[:, 0])
    return float(mean[0]), max(var, 0.0)


def joint_energy_cov(model, x_a, x_b):
    """2 x 2 joint posterior covariance of (H(x_a), H(x_b))"""
    model = require_fitted(model)
    Xs = np.vstack([_check_query(model, x_a), _check_query(model, x_b)])
    _, cov = hamiltonian_joint(model, Xs)
    return floor_psd(cov, relative_floor=0.0)


def hamiltonian_mean_gradient(model, x_star):
    """Analytic gradient of the posterior mean of H at one state"""
    model = require_fitted(model)
    x_star = _check_query(model, x_star)
    grad = grad1_k_base(x_star, model.anchor[0], model.hp) * model.alpha_g[0]
    if model.window_count:
        J = hf_cross_gradient(x_star, model.dataset.states, model.hp, model.phs, model.jr)
        grad = grad + np.asarray(model.ops.B @ J.T).T @ model.alpha_g[1:]
    return grad


EnergyPosterior = namedtuple(
    "EnergyPosterior", ["mu_T", "var_T", "mu_V", "var_V", "mu_H", "var_H"]
)


def _split(model):
    if model.n % 2:
        raise InputError(
            f"state dimension {model.n} is odd and cannot be split into (q, p)"
        )
    return model.n // 2


def energy_posterior(model, Xs):
    """Posterior of the kinetic, potential and total energy at the rows of Xs

    V(q) = H(q, 0) and T(q, p) = H(q, p) - H(q, 0); the variance of T uses
    the joint covariance of the two Hamiltonian evaluations. Every field of
    the result is an array of length P.
    """
    model = require_fitted(model)
    Xs = np.atleast_2d(_check_query(model, Xs))
    nq = _split(model)
    P = len(Xs)
    Q0 = Xs.copy()
    Q0[:, nq:] = 0.0
    Z = np.vstack([Xs, Q0])
    mean, V = _hamiltonian_solve(model, Z)
    s2 = model.hp.signal_variance
    var = s2 - np.sum(V * V, axis=0)
    k_cross = s2 * np.exp(-0.5 * np.sum((Xs[:, nq:] / model.hp.lengthscales[nq:]) ** 2, axis=1))
    cov_x_q0 = k_cross - np.sum(V[:, :P] * V[:, P:], axis=0)
    var_H, var_V = var[:P], var[P:]
    var_T = var_H + var_V - 2 * cov_x_q0
    mu_H, mu_V = mean[:P], mean[P:]
    return EnergyPosterior(
        mu_T=mu_H - mu_V,
        var_T=np.maximum(var_T, 0.0),
        mu_V=mu_V,
        var_V=np.maximum(var_V, 0.0),
        mu_H=mu_H,
        var_H=np.maximum(var_H, 0.0),
    )


def posterior_kinetic(model, q, p):
    """Posterior mean and variance of T(q, p) = H(q, p) - H(q, 0)"""
    model = require_fitted(model)
    nq = _split(model)
    q = np.atleast_1d(np.asarray(q, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if q.size != nq or p.size != nq:
        raise InputError(f"q and p must both have dimension {nq}")
    e = energy_posterior(model, np.r_[q, p][None])
    return float(e.mu_T[0]), float(e.var_T[0])


def posterior_potential(model, q):
    """Posterior mean and variance of V(q) = H(q, 0)"""
    model = require_fitted(model)
    nq = _split(model)
    q = np.atleast_1d(np.asarray(q, dtype=float))
    if q.size != nq:
        raise InputError(f"q must have dimension {nq}")
    return posterior_hamiltonian(model, np.r_[q, np.zeros(nq)])


class PhsGaussianProcess(LoggingConfigurable):
    """Multistep PHS Gaussian process: fitting and conditioning"""

    order = Integer(
        2,
        config=True,
        help="""Order M of the variable-step Adams-Moulton projection""",
    )

    @validate("order")
    def _valid_order(self, proposal):
        if proposal.value < 1:
            raise TraitError(f"order must be >= 1, got {proposal.value}")
        return proposal.value

    gap_factor = Float(
        10.0,
        config=True,
        help="""
        Drop windows containing a step longer than this multiple of the
        median sampling step. 0 keeps every window.
        """,
    )

    anchor_value = Float(
        0.0,
        config=True,
        help="""Value H0 of the Hamiltonian at the origin""",
    )

    anchor_noise_variance = Float(
        0.0,
        config=True,
        help="""Noise variance of the anchor observation (0 anchors exactly)""",
    )

    max_training_points = Integer(
        400,
        config=True,
        help="""
        Largest number of samples used for fitting and conditioning.

        Larger datasets are thinned at a uniform index stride.
        0 uses every sample.
        """,
    )

    optimize = Bool(
        True,
        config=True,
        help="""Fit hyperparameters by marginal likelihood before conditioning""",
    )

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        self.model = None
        self.trace = []

    def training_set(self, dataset):
        return dataset.thinned(self.max_training_points)

    def operators(self, dataset):
        if dataset.K <= self.order:
            return MultistepOperators.empty(dataset.K, self.order, dataset.n)
        return assemble_operators(dataset.times, self.order, dataset.n, self.gap_factor)

    def condition(self, dataset, phs, hp):
        """Condition on a dataset at fixed hyperparameters"""
        dataset = self.training_set(dataset)
        ops = self.operators(dataset)
        self.model = TrainedGp(
            dataset, hp, phs, ops, self.anchor_value, self.anchor_noise_variance
        )
        return self.model

    def fit(self, dataset, phs, optimizer=None):
        """Fit hyperparameters (if enabled) and condition on `dataset`"""
        if optimizer is None:
            optimizer = HyperparameterOptimizer(parent=self)
        train = self.training_set(dataset)
        if train.K <= self.order:
            raise InputError(
                f"fitting needs more than M={self.order} samples, dataset has {train.K}"
            )
        ops = self.operators(train)
        self.log.info(
            "fitting on %i samples (%i windows, order %i)", train.K, ops.window_count, self.order
        )
        self.trace = []
        if self.optimize:
            hp = fit_hyperparameters(train, phs, ops, optimizer, self.trace)
        else:
            hp = optimizer.initial(train.n)
        self.model = TrainedGp(train, hp, phs, ops, self.anchor_value, self.anchor_noise_variance)
        return self.model


def _load_schema(name):
    with open(os.path.join(HERE, "file-schemas", name)) as f:
        return json.load(f)


def save_model(model, path, dataset_path, dataset_hash, gp_config=None, extra=None):
    """Write the hyperparameters, anchor and data reference of a model as JSON

    ``gp_config`` is the PhsGaussianProcess whose window and thinning
    settings produced the model. ``extra`` carries additional top-level
    entries, e.g. the system parameters needed to rebuild the PHS structure.
    """
    model = require_fitted(model)
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "hyperparameters": model.hp.to_dict(),
        "anchor": {
            "state": model.anchor[0].tolist(),
            "value": model.anchor[1],
            "noise_variance": model.anchor_noise_variance,
        },
        "order": model.ops.order,
        "state_dim": model.n,
        "input_dim": model.phs.m,
        "dataset": {"path": os.fspath(dataset_path), "hash": dataset_hash},
    }
    if gp_config is not None:
        doc["gap_factor"] = gp_config.gap_factor
        doc["max_training_points"] = gp_config.max_training_points
    doc.update(extra or {})
    jsonschema.validate(doc, _load_schema("model.json"))
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")
    return doc


def read_model_file(path):
    """Read and validate a model file, returning its JSON document"""
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise InputError(f"{path} is not valid JSON: {e}")
    try:
        jsonschema.validate(doc, _load_schema("model.json"))
    except jsonschema.ValidationError as e:
        raise InputError(f"{path} is not a valid model file: {e.message}")
    return doc


def load_model(path, phs, gp_config=None):
    """Rebuild a TrainedGp from a model file written by `save_model`

    The referenced dataset is re-read and must match the stored hash.
    ``gp_config`` is the PhsGaussianProcess that thins and projects it.
    """
    doc = read_model_file(path)
    dataset_path = doc["dataset"]["path"]
    if not os.path.isabs(dataset_path):
        dataset_path = os.path.join(os.path.dirname(os.path.abspath(path)), dataset_path)
    with open(dataset_path, "rb") as f:
        content = f.read()
    if git_blob_hash(content) != doc["dataset"]["hash"]:
        raise InputError(f"dataset {dataset_path} does not match the hash stored in {path}")
    dataset = Dataset.from_csv(dataset_path, state_dim=doc["state_dim"])
    if gp_config is None:
        gp_config = PhsGaussianProcess()
    gp_config.order = doc["order"]
    gp_config.anchor_value = doc["anchor"]["value"]
    gp_config.anchor_noise_variance = doc["anchor"]["noise_variance"]
    if "gap_factor" in doc:
        gp_config.gap_factor = doc["gap_factor"]
    if "max_training_points" in doc:
        gp_config.max_training_points = doc["max_training_points"]
    hp = KernelHyperparams.from_dict(doc["hyperparameters"])
    return gp_config.condition(dataset, phs, hp)
