"""Closed-form expectations of the cosine feature map under Gaussian inputs.

Notation used throughout: the angular frequency of feature ``m`` is
``w_m = z_m / l + 2 pi / p``. With a variational spectral posterior
``z_m ~ N(alpha_m, beta_m)`` this frequency is Gaussian with mean
``alpha_m / l + 2 pi / p`` and diagonal variance ``beta_m / l**2``.
Inputs are ``h_n ~ N(mu_n, diag(lam_n))``; ``lam_n = 0`` is a
deterministic input.

All statistics reduce to one primitive, the expectation

    E_h[ exp(-1/2 sum_q S_q (h_q - c_q)^2) cos(a . h + phase) ]

which for diagonal Gaussians factorises over dimensions. It is evaluated
in log-magnitude / argument form, written so that ``lam = 0`` and
``S = 0`` are regular points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._backend import chunked_sum, namespace, symmetrize
from .spectral_kernel import TWO_PI, KernelParams, SpectralBasis, feature_map, spectral_frequencies

BETA_FLOOR = 1e-12
_CHUNK_BUDGET = 2_000_000


@dataclass
class GaussianInputs:
    """Diagonal Gaussian inputs: means ``mu`` and variances ``lam``, both (N, Q)."""

    mu: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        xp = namespace(self.mu, self.lam)
        self.mu = xp.atleast_2d(xp.asarray(self.mu, dtype=float))
        self.lam = xp.atleast_2d(xp.asarray(self.lam, dtype=float))
        if self.mu.shape != self.lam.shape:
            raise ValueError(f"mu {self.mu.shape} and lam {self.lam.shape} differ in shape")
        if xp is np and np.any(self.lam < 0):
            raise ValueError("input variances must be nonnegative")

    @classmethod
    def deterministic(cls, X):
        xp = namespace(X)
        X = xp.atleast_2d(xp.asarray(X, dtype=float))
        return cls(X, xp.zeros_like(X))

    @property
    def N(self) -> int:
        return int(self.mu.shape[0])

    @property
    def Q(self) -> int:
        return int(self.mu.shape[1])

    def rows(self, start, stop) -> "GaussianInputs":
        return GaussianInputs(self.mu[start:stop], self.lam[start:stop])


@dataclass
class GaussianSpectral:
    """Factorised spectral posterior ``z_m ~ N(alpha_m, diag(beta_m))``, both (M, Q)."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        xp = namespace(self.alpha, self.beta)
        self.alpha = xp.atleast_2d(xp.asarray(self.alpha, dtype=float))
        self.beta = xp.atleast_2d(xp.asarray(self.beta, dtype=float))
        if self.alpha.shape != self.beta.shape:
            raise ValueError("alpha and beta must have the same shape")
        if xp is np and np.any(self.beta <= 0):
            raise ValueError("spectral variances beta must be strictly positive")


@dataclass
class PsiStats:
    psi0: float
    psi1: np.ndarray
    psi2: np.ndarray
    psi_reg: np.ndarray | None = None


def _check(inputs: GaussianInputs, basis: SpectralBasis, params: KernelParams, spectral=None):
    if inputs.Q != params.Q:
        raise ValueError(f"input dimension {inputs.Q} does not match kernel dimension {params.Q}")
    if basis.Q != params.Q:
        raise ValueError(f"basis dimension {basis.Q} does not match kernel dimension {params.Q}")
    if spectral is not None and spectral.alpha.shape != (basis.M, basis.Q):
        raise ValueError(
            f"spectral posterior shape {spectral.alpha.shape} does not match basis {(basis.M, basis.Q)}"
        )


def _chunk(per_point: int) -> int:
    return max(1, _CHUNK_BUDGET // max(1, per_point))


def _damped_cos(xp, mu, lam, S, center, a, phase):
    """Log-magnitude and argument of the Gaussian-damped cosine expectation.

    Arrays broadcast against each other; the last axis is the input
    dimension and is summed out.
    """
    den = 1.0 + S * lam
    logmag = -0.5 * xp.sum(xp.log1p(S * lam) + S * (mu - center) ** 2 / den + a**2 * lam / den, axis=-1)
    arg = xp.sum(a * (lam * S * center + mu) / den, axis=-1) + phase
    return logmag, arg


def psi0(n_points: int, params: KernelParams) -> float:
    """Trace of the expected kernel matrix, ``n_points * sigma_power2``."""
    if n_points < 0:
        raise ValueError("n_points must be nonnegative")
    return n_points * params.sigma_power2


def psi1_ss(inputs: GaussianInputs, basis: SpectralBasis, params: KernelParams):
    """``E[Phi]`` over uncertain inputs with fixed spectral points, shape (N, M)."""
    _check(inputs, basis, params)
    xp = namespace(inputs.mu, inputs.lam, basis.Z, basis.U, basis.b, params.lengthscales)
    W = spectral_frequencies(basis.Z, params)
    phase = basis.b - xp.sum(W * basis.U, axis=1)
    amp = xp.sqrt(2.0 * params.sigma_power2 / basis.M)
    return amp * xp.exp(-0.5 * inputs.lam @ (W**2).T) * xp.cos(inputs.mu @ W.T + phase)


def psi2_ss(inputs: GaussianInputs, basis: SpectralBasis, params: KernelParams):
    """``sum_n E[phi_n phi_n^T]`` with fixed spectral points, shape (M, M).

    Uses ``cos(A) cos(B) = (cos(A - B) + cos(A + B)) / 2``; the exponents
    are assembled from matrix products so memory is O(N M^2), not O(N M^2 Q).
    """
    _check(inputs, basis, params)
    xp = namespace(inputs.mu, inputs.lam, basis.Z, basis.U, basis.b, params.lengthscales)
    W = spectral_frequencies(basis.Z, params)
    phase = basis.b - xp.sum(W * basis.U, axis=1)
    M = basis.M

    def block(start, stop):
        mu = inputs.mu[start:stop]
        lam = inputs.lam[start:stop]
        s = lam @ (W**2).T
        theta = mu @ W.T + phase
        c = (lam[:, None, :] * W[None, :, :]) @ W.T
        base = -0.5 * (s[:, :, None] + s[:, None, :])
        diff = xp.exp(base + c) * xp.cos(theta[:, :, None] - theta[:, None, :])
        plus = xp.exp(base - c) * xp.cos(theta[:, :, None] + theta[:, None, :])
        return xp.sum(diff + plus, axis=0)

    total = chunked_sum(block, inputs.N, _chunk(M * M), xp)
    if total is None:
        return xp.zeros((M, M))
    return symmetrize(xp, params.sigma_power2 / M * total)


def _vss_terms(spectral: GaussianSpectral, basis: SpectralBasis, params: KernelParams, xp):
    W = spectral_frequencies(spectral.alpha, params)
    Bv = spectral.beta / params.lengthscales**2
    phase = basis.b - xp.sum(W * basis.U, axis=1)
    return W, Bv, phase


def psi1_vss(inputs: GaussianInputs, spectral: GaussianSpectral, basis: SpectralBasis, params: KernelParams):
    """``E[Phi]`` over uncertain inputs and Gaussian spectral points, shape (N, M)."""
    _check(inputs, basis, params, spectral)
    xp = namespace(inputs.mu, inputs.lam, spectral.alpha, spectral.beta, basis.U, basis.b, params.lengthscales)
    W, Bv, phase = _vss_terms(spectral, basis, params, xp)
    logmag, arg = _damped_cos(
        xp,
        inputs.mu[:, None, :],
        inputs.lam[:, None, :],
        Bv[None],
        basis.U[None],
        W[None],
        phase[None],
    )
    amp = xp.sqrt(2.0 * params.sigma_power2 / basis.M)
    return amp * xp.exp(logmag) * xp.cos(arg)


def psi2_vss(inputs: GaussianInputs, spectral: GaussianSpectral, basis: SpectralBasis, params: KernelParams):
    """``sum_n E[phi_n phi_n^T]`` under Gaussian spectral points, shape (M, M).

    Off-diagonal entries use independent draws of ``z_m`` and ``z_m'``;
    the diagonal uses the same draw twice (``E[cos^2]``) via its own
    formula rather than a limit of the off-diagonal one.
    """
    _check(inputs, basis, params, spectral)
    xp = namespace(inputs.mu, inputs.lam, spectral.alpha, spectral.beta, basis.U, basis.b, params.lengthscales)
    W, Bv, phase = _vss_terms(spectral, basis, params, xp)
    M, Q = basis.M, basis.Q
    U = basis.U

    S = Bv[:, None, :] + Bv[None, :, :]
    center = (Bv[:, None, :] * U[:, None, :] + Bv[None, :, :] * U[None, :, :]) / S
    env = -0.5 * xp.sum(Bv[:, None, :] * Bv[None, :, :] / S * (U[:, None, :] - U[None, :, :]) ** 2, axis=-1)
    a_minus = W[:, None, :] - W[None, :, :]
    a_plus = W[:, None, :] + W[None, :, :]
    ph_minus = phase[:, None] - phase[None, :]
    ph_plus = phase[:, None] + phase[None, :]
    eye = xp.eye(M, dtype=bool)

    def block(start, stop):
        mu = inputs.mu[start:stop, None, None, :]
        lam = inputs.lam[start:stop, None, None, :]
        den = 1.0 + S[None] * lam
        common = -0.5 * xp.sum(xp.log1p(S[None] * lam) + S[None] * (mu - center[None]) ** 2 / den, axis=-1)
        g = (lam * S[None] * center[None] + mu) / den
        lam_den = lam / den
        t_minus = xp.exp(common - 0.5 * xp.sum(a_minus**2 * lam_den, axis=-1)) * xp.cos(
            xp.sum(a_minus * g, axis=-1) + ph_minus
        )
        t_plus = xp.exp(common - 0.5 * xp.sum(a_plus**2 * lam_den, axis=-1)) * xp.cos(
            xp.sum(a_plus * g, axis=-1) + ph_plus
        )
        off = xp.exp(env)[None] * (t_minus + t_plus)
        lm, arg = _damped_cos(
            xp,
            inputs.mu[start:stop, None, :],
            inputs.lam[start:stop, None, :],
            4.0 * Bv[None],
            U[None],
            2.0 * W[None],
            2.0 * phase[None],
        )
        diag = 1.0 + xp.exp(lm) * xp.cos(arg)
        full = xp.where(eye[None], 0.0, off) + diag[:, :, None] * eye[None]
        return xp.sum(full, axis=0)

    total = chunked_sum(block, inputs.N, _chunk(8 * M * M * Q), xp)
    if total is None:
        return xp.zeros((M, M))
    return symmetrize(xp, params.sigma_power2 / M * total)


def psi_reg(inputs: GaussianInputs, basis: SpectralBasis, params: KernelParams):
    """``sum_n E[k(u_m, h_n) k(h_n, u_m')]``, the expected ``K_MN K_NM``, shape (M, M).

    The product of two kernel values is a Gaussian bump centred at the
    pseudo-input midpoint times a cosine pair; every exponent is a
    quadratic form, so the sum is assembled from matrix products.
    """
    _check(inputs, basis, params)
    xp = namespace(inputs.mu, inputs.lam, basis.U, params.lengthscales, params.sigma_power2)
    U = basis.U
    M = basis.M
    inv_l2 = 1.0 / params.lengthscales**2
    S = 2.0 * inv_l2
    omega = params.frequency_offset
    periodic = bool(np.any(omega != 0))
    diffU = U[:, None, :] - U[None, :, :]
    env = -0.25 * xp.sum(diffU**2 * inv_l2, axis=-1)
    Uw = U @ omega

    def block(start, stop):
        mu = inputs.mu[start:stop]
        lam = inputs.lam[start:stop]
        den = 1.0 + S * lam
        w = S / den
        P = (w * mu) @ U.T
        R = w @ (U**2).T
        T = (w[:, None, :] * U[None, :, :]) @ U.T
        quad = xp.sum(w * mu**2, axis=1)[:, None, None] - (P[:, :, None] + P[:, None, :]) + 0.25 * (
            R[:, :, None] + R[:, None, :] + 2.0 * T
        )
        common = -0.5 * xp.sum(xp.log1p(S * lam), axis=1)[:, None, None] - 0.5 * quad + env[None]
        if not periodic:
            return 2.0 * xp.sum(xp.exp(common), axis=0)
        arg_minus = Uw[None, :] - Uw[:, None]
        damp = xp.exp(-2.0 * xp.sum(omega**2 * lam / den, axis=1))
        V = (omega * lam * S / den) @ U.T
        base = 2.0 * xp.sum(omega * mu / den, axis=1)
        arg_plus = V[:, :, None] + V[:, None, :] + base[:, None, None] - Uw[None, :, None] - Uw[None, None, :]
        terms = xp.cos(arg_minus)[None] + damp[:, None, None] * xp.cos(arg_plus)
        return xp.sum(xp.exp(common) * terms, axis=0)

    total = chunked_sum(block, inputs.N, _chunk(4 * M * M), xp)
    if total is None:
        return xp.zeros((M, M))
    return symmetrize(xp, 0.5 * params.sigma_power2**2 * total)


def compute_psi(
    inputs: GaussianInputs,
    basis: SpectralBasis,
    params: KernelParams,
    spectral: GaussianSpectral | None = None,
    with_reg: bool = False,
) -> PsiStats:
    """All statistics for one layer; ``spectral=None`` selects the fixed-spectrum forms."""
    if spectral is None:
        p1 = psi1_ss(inputs, basis, params)
        p2 = psi2_ss(inputs, basis, params)
    else:
        p1 = psi1_vss(inputs, spectral, basis, params)
        p2 = psi2_vss(inputs, spectral, basis, params)
    reg = psi_reg(inputs, basis, params) if with_reg else None
    return PsiStats(psi0=psi0(inputs.N, params), psi1=p1, psi2=p2, psi_reg=reg)


_MC_KINDS = ("psi1", "psi2", "psi_reg")


def mc_oracle(
    inputs: GaussianInputs,
    spectral: GaussianSpectral | None,
    basis: SpectralBasis,
    params: KernelParams,
    which: str,
    samples: int = 100_000,
    seed: int = 0,
    batch: int = 50_000,
):
    """Monte Carlo estimate of ``psi1``, ``psi2`` or ``psi_reg`` with standard errors.

    Inputs are sampled per point and, when ``spectral`` is given, the
    spectral points are sampled jointly per draw (one ``z_m`` per feature,
    shared across points). ``psi2``/``psi_reg`` estimates are sums over
    points of per-draw products, so their standard errors are those of
    the summed quantity.

    Returns
    -------
    mean, se : ndarray
        Estimate and per-entry standard error, same shape as the statistic.
    """
    if which not in _MC_KINDS:
        raise ValueError(f"unsupported statistic {which!r}; choose from {_MC_KINDS}")
    if samples < 1000:
        raise ValueError("mc_oracle needs at least 1000 samples")
    _check(inputs, basis, params, spectral)
    rng = np.random.default_rng(seed)
    mu, lam = np.asarray(inputs.mu), np.asarray(inputs.lam)
    N, Q = mu.shape
    M = basis.M
    amp = np.sqrt(2.0 * params.sigma_power2 / M)
    acc = acc2 = None
    done = 0
    while done < samples:
        S = min(batch, samples - done)
        h = mu[None] + np.sqrt(lam)[None] * rng.standard_normal((S, N, Q))
        if which == "psi_reg":
            K = _batched_kernel(h, basis.U, params)
            val = np.einsum("snm,snk->smk", K, K)
        else:
            if spectral is None:
                W = np.broadcast_to(spectral_frequencies(basis.Z, params), (S, M, Q))
            else:
                z = spectral.alpha[None] + np.sqrt(spectral.beta)[None] * rng.standard_normal((S, M, Q))
                W = z / params.lengthscales + params.frequency_offset
            phase = basis.b[None] - np.sum(W * basis.U[None], axis=2)
            Phi = amp * np.cos(np.einsum("snq,smq->snm", h, W) + phase[:, None, :])
            val = Phi if which == "psi1" else np.einsum("snm,snk->smk", Phi, Phi)
        s1 = val.sum(axis=0)
        s2 = (val**2).sum(axis=0)
        acc = s1 if acc is None else acc + s1
        acc2 = s2 if acc2 is None else acc2 + s2
        done += S
    mean = acc / samples
    var = np.maximum(acc2 / samples - mean**2, 0.0) * samples / (samples - 1)
    return mean, np.sqrt(var / samples)


def _batched_kernel(h, U, params: KernelParams):
    tau = h[:, :, None, :] - U[None, None, :, :]
    K = params.sigma_power2 * np.exp(-0.5 * np.sum((tau / params.lengthscales) ** 2, axis=-1))
    w = params.frequency_offset
    if np.any(w != 0):
        K = K * np.cos(tau @ w)
    return K


def feature_collapse(inputs: GaussianInputs, basis: SpectralBasis, params: KernelParams):
    """Plain features at the input means; what every statistic reduces to at zero variance."""
    return feature_map(inputs.mu, basis, params)


def random_instance(rng, max_N=5, max_M=4, max_Q=3):
    """Small random problem for oracle checks: inputs, spectral posterior, basis, kernel."""
    N, M, Q = (int(rng.integers(1, k + 1)) for k in (max_N, max_M, max_Q))
    periods = np.where(rng.uniform(size=Q) < 0.3, rng.uniform(2.0, 5.0, Q), np.inf)
    params = KernelParams(float(rng.uniform(0.5, 2.0)), rng.uniform(0.5, 2.0, Q), periods, 0.1)
    basis = SpectralBasis(rng.standard_normal((M, Q)), 0.5 * rng.standard_normal((M, Q)), rng.uniform(0, TWO_PI, M))
    inputs = GaussianInputs(rng.standard_normal((N, Q)), rng.uniform(0.01, 0.5, (N, Q)))
    spectral = GaussianSpectral(rng.standard_normal((M, Q)), rng.uniform(0.01, 0.5, (M, Q)))
    return inputs, spectral, basis, params


def z_scores(closed, mean, se):
    """``(closed - mean) / se`` with exact agreement at zero standard error mapped to 0."""
    diff = np.asarray(closed) - mean
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(np.abs(diff) < 1e-12, 0.0, np.inf))
    return z


BATTERY = ("psi1_ss", "psi2_ss", "psi1_vss", "psi2_vss", "psi_reg")


def validation_battery(seed: int = 0, instances: int = 20, samples: int = 1_000_000, keep_z: bool = False) -> dict:
    """Closed forms against :func:`mc_oracle` on random small instances.

    Returns a JSON-ready report with the largest ``|z|`` per statistic and
    instance; ``passed`` is true when every ``|z| <= 3``. With ``keep_z``
    the report also lists every entry's z-score under ``"z"``.
    """
    if instances < 1:
        raise ValueError("instances must be >= 1")
    rng = np.random.default_rng(seed)
    rows = []
    overall = {k: 0.0 for k in BATTERY}
    all_z = {k: [] for k in BATTERY}
    for i in range(instances):
        inputs, spectral, basis, params = random_instance(rng)
        closed = {
            "psi1_ss": (psi1_ss(inputs, basis, params), None, "psi1"),
            "psi2_ss": (psi2_ss(inputs, basis, params), None, "psi2"),
            "psi1_vss": (psi1_vss(inputs, spectral, basis, params), spectral, "psi1"),
            "psi2_vss": (psi2_vss(inputs, spectral, basis, params), spectral, "psi2"),
            "psi_reg": (psi_reg(inputs, basis, params), None, "psi_reg"),
        }
        row = {"instance": i, "N": inputs.N, "M": basis.M, "Q": basis.Q}
        for j, (key, (value, spec, which)) in enumerate(closed.items()):
            mean, se = mc_oracle(inputs, spec, basis, params, which, samples, seed=seed * 1000 + 10 * i + j)
            z = z_scores(value, mean, se)
            all_z[key].extend(np.asarray(z, dtype=float).ravel().tolist())
            zmax = float(np.max(np.abs(z)))
            row[key] = zmax
            overall[key] = max(overall[key], zmax)
        rows.append(row)
    report = {
        "seed": seed,
        "instances": instances,
        "samples": samples,
        "max_abs_z": overall,
        "passed": bool(max(overall.values()) <= 3.0),
        "rows": rows,
    }
    if keep_z:
        report["z"] = all_z
    return report


__all__ = [
    "BETA_FLOOR",
    "GaussianInputs",
    "GaussianSpectral",
    "PsiStats",
    "compute_psi",
    "mc_oracle",
    "psi0",
    "psi1_ss",
    "psi1_vss",
    "psi2_ss",
    "psi2_vss",
    "psi_reg",
    "validation_battery",
]
