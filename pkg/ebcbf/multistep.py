"""
Variable-step linear multistep operators

A window of M+1 consecutive samples t_0 < ... < t_M gives the
Adams-Moulton type relation

    x(t_M) - x(t_{M-1}) = sum_j b_j f(x(t_j))

whose weights b_j integrate every polynomial of degree <= M exactly over
[t_{M-1}, t_M]. Stacking one such relation per window gives the operators
A_I and B_I with A_I X = B_I F(X) (+ noise), X and F(X) stacked state-major.
"""
import numpy as np
import scipy.sparse as sp
from tornado.log import app_log

from .errors import InputError

# relative residual accepted for the polynomial exactness system
EXACTNESS_TOL = 1e-10


def _check_times(times):
    times = np.asarray(times, dtype=float)
    if times.ndim != 1:
        raise InputError("timestamps must be a vector")
    if not np.all(np.isfinite(times)):
        raise InputError("timestamps must be finite")
    if np.any(np.diff(times) <= 0):
        raise InputError("timestamps must be strictly increasing")
    return times


def vlmm_coefficients(times, order):
    """Coefficients (a, b) of the variable-step rule on one window

    ``times`` holds the M+1 timestamps of the window, ``order`` is M.
    """
    order = int(order)
    if order < 1:
        raise InputError(f"multistep order must be >= 1, got {order}")
    times = _check_times(times)
    if times.size != order + 1:
        raise InputError(
            f"order {order} needs exactly {order + 1} timestamps, got {times.size}"
        )
    h = times[-1] - times[-2]
    # scaled abscissae put the integration interval at [0, 1]
    tau = (times - times[-2]) / h
    powers = np.arange(order + 1)
    V = tau[None, :] ** powers[:, None]
    rhs = 1.0 / (powers + 1)
    w = np.linalg.solve(V, rhs)
    residual = np.max(np.abs(V @ w - rhs)) / max(1.0, np.max(np.abs(w)))
    if residual > EXACTNESS_TOL:
        app_log.warning(
            "multistep weights on window [%g, %g] have exactness residual %.3g",
            times[0], times[-1], residual,
        )
    a = np.zeros(order + 1)
    a[-2:] = (-1.0, 1.0)
    return a, h * w


def split_windows(times, order, gap_factor=10.0):
    """Start indices of the windows kept for a sample sequence

    A window is dropped when one of its steps exceeds ``gap_factor`` times
    the median step, so that no relation is formed across a sampling gap.
    """
    times = _check_times(times)
    order = int(order)
    if times.size <= order:
        raise InputError(
            f"need more than {order} samples for order {order}, got {times.size}"
        )
    steps = np.diff(times)
    limit = gap_factor * np.median(steps) if gap_factor else np.inf
    too_long = steps > limit
    starts = [
        i for i in range(times.size - order) if not too_long[i:i + order].any()
    ]
    dropped = times.size - order - len(starts)
    if dropped:
        app_log.info("dropped %i multistep windows spanning sampling gaps", dropped)
    return np.asarray(starts, dtype=int)


class MultistepOperators:
    """Stacked multistep operators A_I and B_I

    ``A``, ``B``
        sparse (l*n) x (K*n) matrices
    ``order``
        multistep order M
    ``starts``
        index of the first sample of every window
    """

    def __init__(self, A, B, order, starts, n_samples, state_dim):
        self.A = sp.csr_matrix(A)
        self.B = sp.csr_matrix(B)
        self.order = int(order)
        self.starts = np.asarray(starts, dtype=int)
        self.n_samples = int(n_samples)
        self.state_dim = int(state_dim)

    @property
    def window_count(self):
        return self.starts.size

    @property
    def shape(self):
        return self.A.shape

    @classmethod
    def empty(cls, n_samples, order, state_dim):
        """Operators without any window, for datasets too short to project"""
        shape = (0, n_samples * state_dim)
        return cls(sp.csr_matrix(shape), sp.csr_matrix(shape), order, [], n_samples, state_dim)

    def noise_covariance(self, noise_variance):
        """A (sigma_x^2 I_K kron I_n) A^T as a dense matrix"""
        return noise_variance * (self.A @ self.A.T).toarray()


def assemble_operators(times, order, state_dim, gap_factor=10.0):
    """Build A_I, B_I for all windows of a sample sequence"""
    times = _check_times(times)
    order = int(order)
    state_dim = int(state_dim)
    if times.size <= order:
        raise InputError(
            f"need K > M samples to assemble operators, got K={times.size}, M={order}"
        )
    starts = split_windows(times, order, gap_factor)
    K = times.size
    rows, cols, a_vals, b_vals = [], [], [], []
    for w, i in enumerate(starts):
        a, b = vlmm_coefficients(times[i:i + order + 1], order)
        rows.extend([w] * (order + 1))
        cols.extend(range(i, i + order + 1))
        a_vals.extend(a)
        b_vals.extend(b)
    shape = (starts.size, K)
    A1 = sp.csr_matrix((a_vals, (rows, cols)), shape=shape)
    B1 = sp.csr_matrix((b_vals, (rows, cols)), shape=shape)
    eye = sp.identity(state_dim, format="csr")
    return MultistepOperators(
        sp.kron(A1, eye), sp.kron(B1, eye), order, starts, K, state_dim
    )


def project_labels(ops, noisy_states):
    """Projected labels Y = A_I X~ for state-major stacked noisy states"""
    X = np.asarray(noisy_states, dtype=float).reshape(-1)
    if X.size != ops.A.shape[1]:
        raise InputError(
            f"state vector of length {X.size} does not match operator width {ops.A.shape[1]}"
        )
    return ops.A @ X
