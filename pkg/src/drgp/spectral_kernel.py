"""Spectral-mixture covariance and its random cosine feature approximation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._backend import namespace, symmetrize

TWO_PI = 2.0 * math.pi


@dataclass
class KernelParams:
    """Hyperparameters of one GP layer.

    Parameters
    ----------
    sigma_power2 : float
        Signal variance.
    lengthscales : array, shape (Q,)
        Per-dimension length scales ``l_q``.
    periods : array, shape (Q,)
        Per-dimension period scales ``p_q``; ``np.inf`` selects the
        squared-exponential limit for that dimension exactly.
    sigma_noise2 : float
        Observation/transition noise variance.
    """

    sigma_power2: float
    lengthscales: np.ndarray
    periods: np.ndarray | None = None
    sigma_noise2: float = 0.01

    def __post_init__(self):
        xp = namespace(self.lengthscales, self.sigma_power2, self.sigma_noise2)
        self.lengthscales = xp.asarray(self.lengthscales, dtype=float).reshape(-1)
        if self.periods is None:
            self.periods = np.full(self.lengthscales.shape[0], np.inf)
        else:
            self.periods = np.asarray(self.periods, dtype=float).reshape(-1)
        if self.periods.shape != self.lengthscales.shape:
            raise ValueError("periods and lengthscales must have the same length")
        if np.any(self.periods <= 0):
            raise ValueError("period scales must be positive (np.inf for the SE limit)")
        if xp is np:
            if not self.sigma_power2 > 0 or not self.sigma_noise2 > 0:
                raise ValueError("variances must be strictly positive")
            if np.any(self.lengthscales <= 0):
                raise ValueError("length scales must be strictly positive")

    @property
    def Q(self) -> int:
        return int(self.lengthscales.shape[0])

    @property
    def se_mask(self) -> np.ndarray:
        """True where ``p_q`` is infinite (no periodic term in that dimension)."""
        return np.isinf(self.periods)

    @property
    def frequency_offset(self) -> np.ndarray:
        """``2*pi/p_q``, exactly zero on SE dimensions."""
        out = np.zeros(self.Q)
        finite = ~self.se_mask
        out[finite] = TWO_PI / self.periods[finite]
        return out


@dataclass
class SpectralBasis:
    """Spectral points ``Z``, pseudo-inputs ``U`` and phases ``b``.

    In the variational-spectrum mode ``Z`` holds the spectral means.
    """

    Z: np.ndarray
    U: np.ndarray
    b: np.ndarray
    M: int = field(init=False)

    def __post_init__(self):
        xp = namespace(self.Z, self.U, self.b)
        self.Z = xp.atleast_2d(xp.asarray(self.Z, dtype=float))
        self.U = xp.atleast_2d(xp.asarray(self.U, dtype=float))
        self.b = xp.asarray(self.b, dtype=float).reshape(-1)
        M = self.Z.shape[0]
        if self.U.shape[0] != M or self.b.shape[0] != M:
            raise ValueError(
                f"Z, U and b need equal row counts, got {self.Z.shape[0]}, "
                f"{self.U.shape[0]}, {self.b.shape[0]}"
            )
        if self.Z.shape[1] != self.U.shape[1]:
            raise ValueError("Z and U must share the input dimension")
        if xp is np and (np.any(self.b < 0) or np.any(self.b >= TWO_PI)):
            raise ValueError("phases b must lie in [0, 2 pi)")
        self.M = int(M)

    @property
    def Q(self) -> int:
        return int(self.Z.shape[1])

    @classmethod
    def sample(cls, M, Q, rng, U=None):
        """Draw ``z ~ N(0, I)`` and ``b ~ Unif[0, 2pi)``; ``U`` defaults to zeros."""
        Z = rng.standard_normal((M, Q))
        b = rng.uniform(0.0, TWO_PI, size=M)
        if U is None:
            U = np.zeros((M, Q))
        return cls(Z=Z, U=U, b=b)


def _check_dim(Q_in, params: KernelParams, what="input"):
    if Q_in != params.Q:
        raise ValueError(f"{what} dimension {Q_in} does not match kernel dimension {params.Q}")


def sm_covariance(x, x2, params: KernelParams) -> float:
    """Spectral-mixture covariance of two points.

    ``sigma_power2 * exp(-sum tau^2 / (2 l^2)) * cos(sum 2 pi tau / p)``
    with ``tau = x - x2``; dimensions with ``p = inf`` contribute no
    cosine term.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    x2 = np.asarray(x2, dtype=float).reshape(-1)
    if x.shape != x2.shape:
        raise ValueError(f"point dimensions differ: {x.shape[0]} vs {x2.shape[0]}")
    _check_dim(x.shape[0], params)
    tau = x - x2
    sq = np.sum(tau**2 / (2.0 * params.lengthscales**2))
    arg = np.sum(params.frequency_offset * tau)
    return float(params.sigma_power2 * math.exp(-sq) * math.cos(arg))


def gram(X, X2, params: KernelParams):
    """Covariance matrix ``K[i, j] = k(X[i], X2[j])``; symmetrised when ``X2 is X``."""
    xp = namespace(X, X2, params.lengthscales, params.sigma_power2)
    same = X2 is X
    X = xp.atleast_2d(X)
    X2 = xp.atleast_2d(X2)
    _check_dim(X.shape[1], params)
    _check_dim(X2.shape[1], params, "second input")
    tau = X[:, None, :] - X2[None, :, :]
    sq = xp.sum((tau / params.lengthscales) ** 2, axis=-1)
    K = params.sigma_power2 * xp.exp(-0.5 * sq)
    w = params.frequency_offset
    if np.any(w != 0):
        K = K * xp.cos(tau @ w)
    if same:
        K = symmetrize(xp, K)
    return K


def spectral_frequencies(Z, params: KernelParams):
    """Angular frequencies ``2 pi (L^-1 z + p)`` with ``L = diag(2 pi l)``.

    This simplifies to ``z / l + 2 pi / p``.
    """
    return Z / params.lengthscales + params.frequency_offset


def feature_map(X, basis: SpectralBasis, params: KernelParams):
    """Random cosine features ``Phi`` with ``Phi @ Phi.T ~ K``.

    ``Phi[n, m] = sqrt(2 sigma_power2 / M) cos(w_m . (x_n - u_m) + b_m)``
    where ``w_m`` are the angular spectral frequencies.
    """
    xp = namespace(X, basis.Z, basis.U, basis.b, params.lengthscales, params.sigma_power2)
    X = xp.atleast_2d(X)
    _check_dim(X.shape[1], params)
    _check_dim(basis.Q, params, "basis")
    W = spectral_frequencies(basis.Z, params)
    phase = basis.b - xp.sum(W * basis.U, axis=1)
    amp = xp.sqrt(2.0 * params.sigma_power2 / basis.M)
    return amp * xp.cos(X @ W.T + phase)
