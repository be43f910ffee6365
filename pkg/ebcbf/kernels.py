"""
Squared-exponential base kernel and the port-Hamiltonian kernels built from it.

States are stacked state-major: a set of K states x_1..x_K of dimension n
maps to the vector [x_1; ...; x_K] of length K*n, so entry k*n + i is
coordinate i of state k. Every matrix-valued kernel in this module uses the
same convention for its block rows and columns.
"""
import numpy as np

from .errors import InputError


class KernelHyperparams:
    """Hyperparameters of the ARD squared-exponential kernel

    ``signal_variance``
        sigma_s^2, in units of energy squared
    ``lengthscales``
        one lengthscale per state dimension, in state units
    ``observation_noise_variance``
        sigma_x^2 of the additive state noise, in state units squared
    """

    def __init__(self, signal_variance, lengthscales, observation_noise_variance):
        lengthscales = np.atleast_1d(np.asarray(lengthscales, dtype=float))
        if lengthscales.ndim != 1 or lengthscales.size == 0:
            raise InputError("lengthscales must be a non-empty vector")
        values = np.r_[signal_variance, lengthscales, observation_noise_variance]
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise InputError(f"hyperparameters must be finite and positive, got {values}")
        self.signal_variance = float(signal_variance)
        self.lengthscales = lengthscales
        self.observation_noise_variance = float(observation_noise_variance)

    @property
    def n(self):
        return self.lengthscales.size

    @property
    def signal_std(self):
        return np.sqrt(self.signal_variance)

    @property
    def noise_std(self):
        return np.sqrt(self.observation_noise_variance)

    def to_log(self):
        """Unconstrained parameter vector (log sigma_s^2, log l_1..l_n, log sigma_x^2)"""
        return np.r_[
            np.log(self.signal_variance),
            np.log(self.lengthscales),
            np.log(self.observation_noise_variance),
        ]

    @classmethod
    def from_log(cls, theta):
        theta = np.asarray(theta, dtype=float)
        return cls(np.exp(theta[0]), np.exp(theta[1:-1]), np.exp(theta[-1]))

    @classmethod
    def from_std(cls, signal_std, lengthscales, noise_std):
        return cls(signal_std ** 2, lengthscales, noise_std ** 2)

    def with_noise_variance(self, observation_noise_variance):
        return type(self)(self.signal_variance, self.lengthscales, observation_noise_variance)

    def with_noise_std(self, noise_std):
        return self.with_noise_variance(noise_std ** 2)

    def scaled(self, factor):
        """Copy with the signal variance multiplied by `factor`"""
        return type(self)(
            self.signal_variance * factor, self.lengthscales, self.observation_noise_variance
        )

    def to_dict(self):
        return {
            "signal_variance": self.signal_variance,
            "lengthscales": self.lengthscales.tolist(),
            "observation_noise_variance": self.observation_noise_variance,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["signal_variance"], d["lengthscales"], d["observation_noise_variance"])

    def __repr__(self):
        return (
            f"KernelHyperparams(signal_std={self.signal_std:.4g}, "
            f"lengthscales={np.array2string(self.lengthscales, precision=4)}, "
            f"noise_std={self.noise_std:.4g})"
        )


def _as_map(value, shape, name):
    """Wrap a constant matrix as a state map, or pass a callable through"""
    if value is None:
        value = np.zeros(shape)
    if callable(value):
        return value
    value = np.asarray(value, dtype=float)
    if value.shape != shape:
        raise InputError(f"{name} must have shape {shape}, got {value.shape}")
    return lambda x: value


class PhsStructure:
    """Evaluators of J(x), R(x), G(x) for a port-Hamiltonian system

    dx/dt = (J(x) - R(x)) grad H(x) + G(x) u

    J, R and G may be given as constant arrays or as callables of the state.
    """

    def __init__(self, n, m, J, R=None, G=None):
        self.n = int(n)
        self.m = int(m)
        if self.n < 1 or self.m < 0:
            raise InputError(f"invalid PHS dimensions n={n}, m={m}")
        self.J = _as_map(J, (self.n, self.n), "J")
        self.R = _as_map(R, (self.n, self.n), "R")
        self.G = _as_map(G, (self.n, self.m), "G")

    def jr(self, x):
        """J_R(x) = J(x) - R(x)"""
        x = np.asarray(x, dtype=float)
        return np.asarray(self.J(x), dtype=float) - np.asarray(self.R(x), dtype=float)

    def jr_batch(self, X):
        X = np.atleast_2d(X)
        return np.stack([self.jr(x) for x in X]) if len(X) else np.zeros((0, self.n, self.n))

    def g(self, x):
        return np.asarray(self.G(np.asarray(x, dtype=float)), dtype=float).reshape(self.n, self.m)

    def g_batch(self, X):
        X = np.atleast_2d(X)
        return np.stack([self.g(x) for x in X]) if len(X) else np.zeros((0, self.n, self.m))

    def input_term(self, X, U):
        """Stacked g(x_k) u_k, state-major, length K*n"""
        X = np.atleast_2d(X)
        U = np.asarray(U, dtype=float).reshape(len(X), self.m)
        if len(X) == 0:
            return np.zeros(0)
        return np.einsum("kij,kj->ki", self.g_batch(X), U).reshape(-1)

    def check(self, x, tol=1e-10):
        """Check skew-symmetry of J and symmetric PSD R at `x`"""
        J = np.asarray(self.J(x), dtype=float)
        R = np.asarray(self.R(x), dtype=float)
        if not np.allclose(J, -J.T, atol=tol):
            raise InputError(f"J(x) is not skew-symmetric at x={x}")
        if not np.allclose(R, R.T, atol=tol):
            raise InputError(f"R(x) is not symmetric at x={x}")
        if np.linalg.eigvalsh(R).min() < -tol:
            raise InputError(f"R(x) is not positive semi-definite at x={x}")


def _check_points(X, hp):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[-1] != hp.n:
        raise InputError(
            f"state dimension {X.shape[-1]} does not match {hp.n} lengthscales"
        )
    return X


def _check_state(x, hp):
    x = np.asarray(x, dtype=float)
    if x.shape != (hp.n,):
        raise InputError(f"expected a state of dimension {hp.n}, got shape {x.shape}")
    return x


def k_base_matrix(X1, X2, hp):
    """Gram matrix of k_base between two point sets, shape (P, Q)"""
    X1 = _check_points(X1, hp)
    X2 = _check_points(X2, hp)
    d = X1[:, None, :] - X2[None, :, :]
    r2 = np.sum((d / hp.lengthscales) ** 2, axis=-1)
    return hp.signal_variance * np.exp(-0.5 * r2)


def grad1_matrix(X1, X2, hp):
    """Gradient of k_base(x1, x2) with respect to x1, shape (P, Q, n)"""
    X1 = _check_points(X1, hp)
    X2 = _check_points(X2, hp)
    d = X1[:, None, :] - X2[None, :, :]
    k = k_base_matrix(X1, X2, hp)
    return -k[..., None] * d / hp.lengthscales ** 2


def hess12_matrix(X1, X2, hp):
    """Mixed second derivative d^2 k / dx1 dx2, shape (P, Q, n, n)"""
    X1 = _check_points(X1, hp)
    X2 = _check_points(X2, hp)
    inv_l2 = 1.0 / hp.lengthscales ** 2
    u = (X1[:, None, :] - X2[None, :, :]) * inv_l2
    k = k_base_matrix(X1, X2, hp)
    return k[..., None, None] * (np.diag(inv_l2) - u[..., :, None] * u[..., None, :])


def hess12_log_lengthscale_grads(X1, X2, hp):
    """Derivatives of hess12_matrix with respect to each log-lengthscale

    Returns an array of shape (n, P, Q, n, n).
    """
    X1 = _check_points(X1, hp)
    X2 = _check_points(X2, hp)
    n = hp.n
    inv_l2 = 1.0 / hp.lengthscales ** 2
    d = X1[:, None, :] - X2[None, :, :]
    u = d * inv_l2
    k = k_base_matrix(X1, X2, hp)[..., None, None]
    base = np.diag(inv_l2) - u[..., :, None] * u[..., None, :]
    eye = np.eye(n)
    grads = []
    for i in range(n):
        rho = (d[..., i] ** 2 * inv_l2[i])[..., None, None]
        e_u = eye[i][:, None] * u[..., None, :]
        dh = rho * base + 2 * u[..., i, None, None] * (e_u + np.swapaxes(e_u, -1, -2))
        dh[..., i, i] -= 2 * inv_l2[i]
        grads.append(k * dh)
    return np.stack(grads)


def k_base(x, x2, hp):
    """sigma_s^2 exp(-1/2 sum_i (x_i - x2_i)^2 / l_i^2)"""
    x = _check_state(x, hp)
    x2 = _check_state(x2, hp)
    return float(k_base_matrix(x, x2, hp)[0, 0])


def grad1_k_base(x, x2, hp):
    """Gradient of k_base with respect to its first argument"""
    x = _check_state(x, hp)
    x2 = _check_state(x2, hp)
    return grad1_matrix(x, x2, hp)[0, 0]


def hess12_k_base(x, x2, hp):
    """Mixed second derivative of k_base, one derivative per argument"""
    x = _check_state(x, hp)
    x2 = _check_state(x2, hp)
    return hess12_matrix(x, x2, hp)[0, 0]


def _blocks(JR1, H, JR2):
    """Assemble J_R(x_p) H_pq J_R(x_q)^T into a state-major (P*n, Q*n) matrix"""
    P, Q, n = H.shape[0], H.shape[1], H.shape[2]
    return np.einsum("pab,pqbc,qdc->paqd", JR1, H, JR2).reshape(P * n, Q * n)


def k_phs_cross(X1, X2, hp, phs, jr1=None, jr2=None):
    """Matrix-valued PHS kernel between two point sets, shape (P*n, Q*n)

    ``jr1`` and ``jr2`` may carry precomputed J_R stacks of the point sets.
    """
    X1 = _check_points(X1, hp)
    X2 = _check_points(X2, hp)
    if jr1 is None:
        jr1 = phs.jr_batch(X1)
    if jr2 is None:
        jr2 = phs.jr_batch(X2)
    return _blocks(jr1, hess12_matrix(X1, X2, hp), jr2)


def k_phs_gram(X, hp, phs, jr=None):
    """PHS Gram matrix on one point set, shape (K*n, K*n)"""
    X = _check_points(X, hp)
    if jr is None:
        jr = phs.jr_batch(X)
    return k_phs_cross(X, X, hp, phs, jr, jr)


def k_phs_gram_grads(X, hp, jr):
    """Derivatives of the PHS Gram matrix on X with respect to log-lengthscales"""
    return [_blocks(jr, dh, jr) for dh in hess12_log_lengthscale_grads(X, X, hp)]


def k_phs(x, x2, hp, phs):
    """J_R(x) hess12_k_base(x, x2) J_R(x2)^T"""
    x = _check_state(x, hp)
    x2 = _check_state(x2, hp)
    return k_phs_cross(x, x2, hp, phs)


def hf_cross(Xs, X, hp, phs, jr=None):
    """Cross-covariance of H(x*) with the drift f(x_k) at training states

    Row p holds J_R(x_k) grad_{x_k} k_base(x_k, x*_p) for k = 1..K, stacked
    state-major, so the result has shape (P, K*n). Right-multiplying by B_I^T
    gives the K_Hf block used by the Hamiltonian posterior.
    """
    Xs = _check_points(Xs, hp)
    X = _check_points(X, hp)
    if jr is None:
        jr = phs.jr_batch(X)
    if len(X) == 0:
        return np.zeros((len(Xs), 0))
    G = grad1_matrix(X, Xs, hp)
    return np.einsum("kab,kpb->pka", jr, G).reshape(len(Xs), -1)


def hf_cross_gradient(x_star, X, hp, phs, jr=None):
    """Jacobian of hf_cross(x*) with respect to x*, shape (n, K*n)"""
    x_star = _check_state(x_star, hp)
    X = _check_points(X, hp)
    if jr is None:
        jr = phs.jr_batch(X)
    if len(X) == 0:
        return np.zeros((hp.n, 0))
    H = hess12_matrix(X, x_star, hp)[:, 0]
    return np.einsum("kac,kcb->bka", jr, H).reshape(hp.n, -1)


def k_Hf_row(x, X, hp, phs, B_I):
    """K_Hf(x, X): covariance of H(x) with the projected drift labels, 1 x (l*n)"""
    x = _check_state(x, hp)
    X = _check_points(X, hp)
    if B_I.shape[1] != X.shape[0] * hp.n:
        raise InputError(
            f"operator with {B_I.shape[1]} columns does not match {X.shape[0]} states"
            f" of dimension {hp.n}"
        )
    row = hf_cross(x, X, hp, phs)
    return np.asarray((B_I @ row.T).T).reshape(1, -1)
