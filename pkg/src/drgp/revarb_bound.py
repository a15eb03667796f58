"""Layered evidence lower bounds for the deep recurrent model.

Each layer contributes a Gaussian regression term with the feature
weights integrated out analytically (the "collapsed" form), or, for
explicit weight posteriors ``N(m, s)``, the uncollapsed form. Hidden
layers add the entropy of their state posteriors and a standard-normal
prior on the initial window; variational-spectrum variants subtract the
KL divergence of the spectral posteriors.

Per-layer data enter only through additive sums over target rows
(:class:`LayerSums`), so the same code serves the serial bound and the
sharded evaluation in :mod:`drgp.parallel_bound`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._backend import chol_logdet, jitter_cholesky, namespace, solve_triangular, symmetrize
from .psi_statistics import GaussianSpectral, psi1_ss, psi1_vss, psi2_ss, psi2_vss, psi_reg
from .recurrent_state import RecurrentModel, assemble_regressors, layer_targets
from .spectral_kernel import gram

LOG_2PI = math.log(2.0 * math.pi)
K_JITTER = 1e-6


@dataclass
class BoundValue:
    """Bound and its decomposition: ``total = sum(per_layer) - kl_spectral - kl_states``."""

    total: float
    per_layer: list
    kl_spectral: float
    kl_states: float

    def __post_init__(self):
        if namespace(self.total) is np:
            recon = float(sum(self.per_layer)) - self.kl_spectral - self.kl_states
            if not np.isclose(recon, self.total, rtol=1e-10, atol=1e-10):
                raise ValueError("bound components do not add up to the total")

    @classmethod
    def assemble(cls, per_layer, kl_spectral, kl_states):
        total = sum(per_layer) - kl_spectral - kl_states
        if namespace(total) is np:
            return cls(float(total), [float(v) for v in per_layer], float(kl_spectral), float(kl_states))
        return cls(total, list(per_layer), kl_spectral, kl_states)


@dataclass
class LayerBoundWork:
    """Matrices factorised while finishing one layer."""

    A: np.ndarray
    chol_A: np.ndarray
    K: np.ndarray | None = None
    chol_K: np.ndarray | None = None


@dataclass
class LayerSums:
    """Additive per-row statistics of one layer over a set of target rows.

    ``c = Psi1^T t``, ``tt = sum(t^2) + sum(var(t))``, ``entropy`` is the
    Gaussian entropy of the target states (zero for the output layer).
    """

    c: np.ndarray
    psi2: np.ndarray
    psi_reg: np.ndarray | None
    tt: float
    count: int
    entropy: float

    def __add__(self, other: "LayerSums") -> "LayerSums":
        reg = None if self.psi_reg is None else self.psi_reg + other.psi_reg
        return LayerSums(
            self.c + other.c,
            self.psi2 + other.psi2,
            reg,
            self.tt + other.tt,
            self.count + other.count,
            self.entropy + other.entropy,
        )


def kl_spectral(spectral: GaussianSpectral):
    """KL divergence from ``N(alpha, diag(beta))`` to ``N(0, I)`` summed over features."""
    xp = namespace(spectral.alpha, spectral.beta)
    if xp is np and np.any(spectral.beta <= 0):
        raise ValueError("spectral variances beta must be strictly positive")
    a, b = spectral.alpha, spectral.beta
    return 0.5 * xp.sum(b + a**2) - 0.5 * xp.sum(xp.log(b)) - 0.5 * a.size


def _entropy(xp, lam):
    return xp.sum(0.5 * xp.log(2.0 * math.pi * lam) + 0.5)


def state_terms(model: RecurrentModel, layer: int):
    """Entropy of all states of a hidden layer plus the log prior of its initial window."""
    if not 1 <= layer <= model.L:
        raise ValueError(f"state terms exist only for hidden layers 1..{model.L}, got {layer}")
    var = model.layers[layer - 1].var
    xp = namespace(var.state_mu, var.state_lam)
    H_h = model.config.H_h
    mu0, lam0 = var.state_mu[:H_h], var.state_lam[:H_h]
    prior = xp.sum(-0.5 * LOG_2PI - 0.5 * (lam0 + mu0**2))
    return _entropy(xp, var.state_lam) + prior


def _window_terms(model: RecurrentModel, layer: int):
    """State terms of the initial window only; target-state entropy travels in ``LayerSums``."""
    var = model.layers[layer - 1].var
    xp = namespace(var.state_mu, var.state_lam)
    H_h = model.config.H_h
    mu0, lam0 = var.state_mu[:H_h], var.state_lam[:H_h]
    return _entropy(xp, lam0) + xp.sum(-0.5 * LOG_2PI - 0.5 * (lam0 + mu0**2))


def layer_sums(model: RecurrentModel, layer: int, rows=None, X=None) -> LayerSums:
    """Sufficient statistics of ``layer`` over target rows ``rows = (start, stop)``."""
    lay = model.layers[layer - 1]
    inputs = assemble_regressors(model, X, layer)
    t, t_lam = layer_targets(model, layer)
    if rows is not None:
        start, stop = rows
        inputs = inputs.rows(start, stop)
        t, t_lam = t[start:stop], t_lam[start:stop]
    xp = namespace(inputs.mu, t, lay.params.lengthscales, lay.basis.Z, lay.basis.U)
    if model.vss:
        p1 = psi1_vss(inputs, lay.var.spectral, lay.basis, lay.params)
        p2 = psi2_vss(inputs, lay.var.spectral, lay.basis, lay.params)
    else:
        p1 = psi1_ss(inputs, lay.basis, lay.params)
        p2 = psi2_ss(inputs, lay.basis, lay.params)
    reg = psi_reg(inputs, lay.basis, lay.params) if model.ip_kind else None
    entropy = _entropy(xp, t_lam) if layer <= model.L else 0.0
    return LayerSums(
        c=p1.T @ t,
        psi2=p2,
        psi_reg=reg,
        tt=xp.sum(t**2) + xp.sum(t_lam),
        count=int(t.shape[0]),
        entropy=entropy,
    )


def layer_work(sums: LayerSums, model: RecurrentModel, layer: int) -> LayerBoundWork:
    """Form and factorise ``A`` (and ``K_MM`` for inducing-point variants)."""
    lay = model.layers[layer - 1]
    xp = namespace(sums.psi2, lay.params.sigma_noise2)
    M = sums.psi2.shape[0]
    s2 = lay.params.sigma_noise2
    K = chol_K = None
    if model.ip_kind:
        K = gram(lay.basis.U, lay.basis.U, lay.params)
        chol_K, _ = jitter_cholesky(K, f"K_MM of layer {layer}", start=K_JITTER)
    A = sums.psi2 + s2 * (K if model.ip_kind == 2 else xp.eye(M))
    chol_A, _ = jitter_cholesky(A, f"A of layer {layer}", start=0.0)
    return LayerBoundWork(symmetrize(xp, A), chol_A, K, chol_K)


def trace_kinv(xp, chol_K, B):
    """``tr(K^-1 B)`` for symmetric ``B`` via the Cholesky factor of ``K``."""
    P = solve_triangular(xp, chol_K, B, lower=True)
    P = solve_triangular(xp, chol_K, P.T, lower=True)
    return xp.trace(P)


def collapsed_layer_term(sums: LayerSums, model: RecurrentModel, layer: int, work: LayerBoundWork | None = None):
    """Data term of one layer with the optimal weight posterior substituted."""
    lay = model.layers[layer - 1]
    work = layer_work(sums, model, layer) if work is None else work
    xp = namespace(sums.c, sums.psi2, lay.params.sigma_noise2)
    s2 = lay.params.sigma_noise2
    n, M = sums.count, sums.psi2.shape[0]
    v = solve_triangular(xp, work.chol_A, sums.c, lower=True)
    value = (
        -0.5 * (n - M) * xp.log(s2)
        - 0.5 * n * LOG_2PI
        - 0.5 * sums.tt / s2
        + 0.5 * xp.sum(v**2) / s2
        - 0.5 * chol_logdet(xp, work.chol_A)
    )
    if model.ip_kind:
        value = value - 0.5 * n * lay.params.sigma_power2 / s2 + 0.5 * trace_kinv(xp, work.chol_K, sums.psi_reg) / s2
        if model.ip_kind == 2:
            value = value + 0.5 * chol_logdet(xp, work.chol_K)
    return value


def _as_2d_cov(xp, s, M):
    s = xp.asarray(s)
    return xp.diag(s) if s.ndim == 1 else s


def explicit_layer_term(sums: LayerSums, model: RecurrentModel, layer: int, m, s):
    """Data term of one layer under an explicit weight posterior ``N(m, s)``, prior ``N(0, I)``."""
    lay = model.layers[layer - 1]
    xp = namespace(sums.c, sums.psi2, m, s, lay.params.sigma_noise2)
    s2 = lay.params.sigma_noise2
    n, M = sums.count, sums.psi2.shape[0]
    S = _as_2d_cov(xp, s, M)
    if xp is np:
        if S.shape != (M, M) or np.asarray(m).shape != (M,):
            raise ValueError(f"weight posterior must have m of length {M} and s of size {M}")
        if np.ndim(s) == 1 and np.any(np.asarray(s) <= 0):
            raise ValueError("weight variances s must be strictly positive")
        chol_S, _ = jitter_cholesky(S, f"weight covariance of layer {layer}", start=0.0)
    else:
        chol_S, _ = jitter_cholesky(S, "weight covariance", start=0.0)
    fit = (
        -0.5 * n * (LOG_2PI + xp.log(s2))
        - 0.5 * sums.tt / s2
        + sums.c @ m / s2
        - 0.5 * (xp.sum(sums.psi2 * S) + m @ sums.psi2 @ m) / s2
    )
    kl_a = 0.5 * (xp.trace(S) + m @ m - M - chol_logdet(xp, chol_S))
    return fit - kl_a


def optimal_weights(sums: LayerSums, model: RecurrentModel, layer: int, work: LayerBoundWork | None = None):
    """Mean ``A^-1 c`` and covariance ``sigma^2 A^-1`` of the optimal weight posterior."""
    lay = model.layers[layer - 1]
    work = layer_work(sums, model, layer) if work is None else work
    xp = namespace(sums.c, work.chol_A)
    M = sums.psi2.shape[0]
    Linv = solve_triangular(xp, work.chol_A, xp.eye(M), lower=True)
    Ainv = Linv.T @ Linv
    m = Ainv @ sums.c
    return m, symmetrize(xp, lay.params.sigma_noise2 * Ainv)


def finish(sums_per_layer: list[LayerSums], model: RecurrentModel, explicit: bool = False) -> BoundValue:
    """Assemble the full bound from per-layer sums over all target rows."""
    if len(sums_per_layer) != model.L + 1:
        raise ValueError("need one LayerSums per layer")
    per_layer = []
    for l, sums in enumerate(sums_per_layer, start=1):
        if sums.count != model.n_hat:
            raise ValueError(f"layer {l} sums cover {sums.count} rows, expected {model.n_hat}")
        if explicit:
            var = model.layers[l - 1].var
            per_layer.append(explicit_layer_term(sums, model, l, var.weights_m, var.weights_s))
        else:
            per_layer.append(collapsed_layer_term(sums, model, l))
    kl_spec = 0.0
    if model.vss:
        for layer in model.layers:
            kl_spec = kl_spec + kl_spectral(layer.var.spectral)
    states = 0.0
    for l in range(1, model.L + 1):
        states = states + sums_per_layer[l - 1].entropy + _window_terms(model, l)
    return BoundValue.assemble(per_layer, kl_spec, -states)


def _with_data(model: RecurrentModel, y, X) -> RecurrentModel:
    if y is None and X is None:
        return model
    out = model.copy()
    if y is not None:
        out.y = np.asarray(y, dtype=float).reshape(-1)
    if X is not None:
        out.X = np.asarray(X, dtype=float).reshape(out.y.shape[0], -1)
    if out.y.shape[0] != model.N:
        raise ValueError("replacement data must keep the training length")
    return out


def evidence_bound(model: RecurrentModel, y=None, X=None) -> BoundValue:
    """Collapsed bound of the model's own variant."""
    model = _with_data(model, y, X)
    return finish([layer_sums(model, l) for l in range(1, model.L + 2)], model)


def bound_ss_vss_opt(model: RecurrentModel, y=None, X=None) -> BoundValue:
    if model.ip_kind:
        raise ValueError(f"variant {model.variant} is an inducing-point variant; use bound_ip_opt")
    return evidence_bound(model, y, X)


def bound_ip_opt(model: RecurrentModel, y=None, X=None, variant: str | None = None) -> BoundValue:
    if not model.ip_kind:
        raise ValueError(f"variant {model.variant} has no inducing-point terms")
    if variant is not None and not model.variant.endswith(variant):
        raise ValueError(f"model variant {model.variant} does not match {variant}")
    return evidence_bound(model, y, X)


def bound_explicit_weights(model: RecurrentModel, y=None, X=None) -> BoundValue:
    """Uncollapsed bound using ``weights_m``/``weights_s`` of every layer (SS/VSS only)."""
    if model.ip_kind:
        raise ValueError("explicit weight posteriors are only supported for SS and VSS variants")
    for l, layer in enumerate(model.layers, start=1):
        if layer.var.weights_m is None or layer.var.weights_s is None:
            raise ValueError(f"layer {l} has no explicit weight posterior")
    model = _with_data(model, y, X)
    return finish([layer_sums(model, l) for l in range(1, model.L + 2)], model, explicit=True)


def set_optimal_weights(model: RecurrentModel) -> RecurrentModel:
    """Copy of ``model`` with each layer's weight posterior set to the collapsed optimum."""
    out = model.copy()
    for l in range(1, out.L + 2):
        m, s = optimal_weights(layer_sums(out, l), out, l)
        out.layers[l - 1].var.weights_m = np.asarray(m)
        out.layers[l - 1].var.weights_s = np.asarray(s)
    return out


__all__ = [
    "BoundValue",
    "LayerBoundWork",
    "LayerSums",
    "bound_explicit_weights",
    "bound_ip_opt",
    "bound_ss_vss_opt",
    "collapsed_layer_term",
    "evidence_bound",
    "explicit_layer_term",
    "finish",
    "kl_spectral",
    "layer_sums",
    "layer_work",
    "optimal_weights",
    "set_optimal_weights",
    "state_terms",
]
