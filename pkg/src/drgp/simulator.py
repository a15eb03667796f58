"""Free simulation with moment propagation through the layers.

Each layer's prediction at a Gaussian input uses the optimal weight
posterior of the collapsed bound. The predicted mean and variance of a
hidden layer become the Gaussian input of the next layer and, through
the lag window, of the next time step.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from ._backend import jitter_cholesky
from .psi_statistics import GaussianInputs, psi1_ss, psi1_vss, psi2_ss, psi2_vss, psi_reg
from .recurrent_state import RecurrentModel
from .revarb_bound import K_JITTER, layer_sums, optimal_weights, trace_kinv
from .spectral_kernel import gram

log = logging.getLogger(__name__)

CLAMP_TOL = 1e-10
MAX_CLAMP_RATE = 1e-3


@dataclass
class PredictiveMoments:
    mean: float
    variance: float
    clamped: bool = False


@dataclass
class LayerPosterior:
    """Weight posterior ``N(m, s)`` of one layer, plus ``K_MM`` factor for inducing-point variants."""

    m: np.ndarray
    s: np.ndarray
    chol_K: np.ndarray | None = None


def layer_posteriors(model: RecurrentModel, use_explicit: bool = False) -> list[LayerPosterior]:
    """Posterior of every layer; by default the optimum of the collapsed bound."""
    out = []
    for l, layer in enumerate(model.layers, start=1):
        var = layer.var
        if use_explicit:
            if var.weights_m is None or var.weights_s is None:
                raise ValueError(f"layer {l} has no explicit weight posterior")
            s = np.asarray(var.weights_s)
            m, s = np.asarray(var.weights_m), np.diag(s) if s.ndim == 1 else s
        else:
            m, s = optimal_weights(layer_sums(model, l), model, l)
        chol_K = None
        if model.ip_kind:
            chol_K, _ = jitter_cholesky(gram(layer.basis.U, layer.basis.U, layer.params), f"K_MM of layer {l}", K_JITTER)
        out.append(LayerPosterior(np.asarray(m), np.asarray(s), chol_K))
    return out


def predict_layer(model: RecurrentModel, layer: int, hstar_mu, hstar_lam, posterior: LayerPosterior | None = None):
    """Predictive mean and variance of the latent function of ``layer`` at one Gaussian input.

    ``variance = m^T (Psi2 - Psi1^T Psi1) m + tr(s Psi2)``, plus
    ``Psi0 - tr(K^-1 Psi_reg)`` for inducing-point variants. Noise is not
    included.
    """
    if not 1 <= layer <= model.L + 1:
        raise ValueError(f"layer must be in 1..{model.L + 1}, got {layer}")
    lay = model.layers[layer - 1]
    mu = np.asarray(hstar_mu, dtype=float).reshape(-1)
    lam = np.asarray(hstar_lam, dtype=float).reshape(-1)
    if mu.shape[0] != lay.params.Q or lam.shape != mu.shape:
        raise ValueError(f"layer {layer} expects {lay.params.Q}-dimensional inputs, got {mu.shape[0]}/{lam.shape[0]}")
    if posterior is None:
        posterior = layer_posteriors(model)[layer - 1]
    inputs = GaussianInputs(mu[None], lam[None])
    if model.vss:
        p1 = psi1_vss(inputs, lay.var.spectral, lay.basis, lay.params)[0]
        p2 = psi2_vss(inputs, lay.var.spectral, lay.basis, lay.params)
    else:
        p1 = psi1_ss(inputs, lay.basis, lay.params)[0]
        p2 = psi2_ss(inputs, lay.basis, lay.params)
    m, s = posterior.m, posterior.s
    mean = float(p1 @ m)
    var = float(m @ (p2 - np.outer(p1, p1)) @ m + np.sum(s * p2))
    if model.ip_kind:
        reg = psi_reg(inputs, lay.basis, lay.params)
        var += float(lay.params.sigma_power2 - trace_kinv(np, posterior.chol_K, reg))
    clamped = False
    if var < 0:
        if var < -CLAMP_TOL:
            log.warning("layer %d: negative predictive variance %.3g clamped to 0", layer, var)
        var, clamped = 0.0, True
    return PredictiveMoments(mean, var, clamped)


@dataclass
class SimulationTrace:
    """Per-step output and hidden-state moments of a free simulation."""

    y_mean: np.ndarray
    y_var: np.ndarray
    y_var_noise: np.ndarray
    h_mean: np.ndarray
    h_var: np.ndarray
    clamped: int = 0
    predictions: int = 0
    warm_start: str = "train_tail"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.y_mean.shape[0])

    @property
    def clamp_rate(self) -> float:
        return self.clamped / max(1, self.predictions)

    def to_csv(self, path, y_true=None, denormalize=None):
        """Columns ``t, y_true, y_mean, y_var, y_var_noise, h1_mean, h1_var, ...``.

        ``denormalize`` maps ``(mean, var)`` of the output to the original scale.
        """
        mean, var, varn = self.y_mean, self.y_var, self.y_var_noise
        if denormalize is not None:
            mean, var = denormalize(mean, var)
            _, varn = denormalize(self.y_mean, self.y_var_noise)
        L = self.h_mean.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            header = ["t", "y_true", "y_mean", "y_var", "y_var_noise"]
            for l in range(1, L + 1):
                header += [f"h{l}_mean", f"h{l}_var"]
            w.writerow(header)
            for t in range(len(self)):
                row = [t, "" if y_true is None else _num(y_true[t]), _num(mean[t]), _num(var[t]), _num(varn[t])]
                for l in range(L):
                    row += [_num(self.h_mean[t, l]), _num(self.h_var[t, l])]
                w.writerow(row)


def _num(v) -> str:
    return repr(float(v))


def free_simulate(
    model: RecurrentModel,
    X_test,
    warm_start: str = "train_tail",
    propagate_noise: bool = True,
    posteriors: list[LayerPosterior] | None = None,
) -> SimulationTrace:
    """Simulate the output for every row of ``X_test`` without observing outputs.

    ``warm_start="train_tail"`` continues the training series: the lag
    windows start from the last training states and inputs.
    ``"train_head"`` replays the training series from its initial window,
    so ``X_test`` should then be the training inputs from time ``H_x`` on.
    ``"zeros"`` starts from zero states and inputs (standalone series).
    With ``propagate_noise`` the hidden-state variance passed on is the
    latent variance plus the layer noise.
    """
    X_test = np.asarray(X_test, dtype=float)
    if X_test.ndim == 1:
        X_test = X_test[:, None]
    if X_test.shape[1] != model.Q_x:
        raise ValueError(f"X_test has {X_test.shape[1]} input columns, model expects Q_x={model.Q_x}")
    H_x, H_h, L = model.config.H_x, model.config.H_h, model.L
    if posteriors is None:
        posteriors = layer_posteriors(model)
    if warm_start == "train_tail":
        x_hist = [row.copy() for row in model.X[-H_x:]]
        windows = [
            [list(np.asarray(model.layers[l].var.state_mu)[-H_h:]), list(np.asarray(model.layers[l].var.state_lam)[-H_h:])]
            for l in range(L)
        ]
    elif warm_start == "train_head":
        x_hist = [row.copy() for row in model.X[:H_x]]
        windows = [
            [list(np.asarray(model.layers[l].var.state_mu)[:H_h]), list(np.asarray(model.layers[l].var.state_lam)[:H_h])]
            for l in range(L)
        ]
    elif warm_start == "zeros":
        x_hist = [np.zeros(model.Q_x) for _ in range(H_x)]
        windows = [[[0.0] * H_h, [0.0] * H_h] for _ in range(L)]
    else:
        raise ValueError("warm_start must be 'train_tail', 'train_head' or 'zeros'")

    T = X_test.shape[0]
    y_mean, y_var, y_var_noise = np.zeros(T), np.zeros(T), np.zeros(T)
    h_mean, h_var = np.zeros((T, L)), np.zeros((T, L))
    clamped = predictions = 0

    def recent(window):
        mu, lam = window
        return mu[::-1], lam[::-1]

    for t in range(T):
        x_lags = np.concatenate(x_hist[::-1])
        for l in range(1, L + 1):
            own_mu, own_lam = recent(windows[l - 1])
            if l == 1:
                mu = np.concatenate([own_mu, x_lags])
                lam = np.concatenate([own_lam, np.zeros_like(x_lags)])
            else:
                below_mu, below_lam = recent(windows[l - 2])
                mu = np.concatenate([own_mu, below_mu])
                lam = np.concatenate([own_lam, below_lam])
            pm = predict_layer(model, l, mu, lam, posteriors[l - 1])
            predictions += 1
            clamped += pm.clamped
            v = pm.variance + (float(model.layers[l - 1].params.sigma_noise2) if propagate_noise else 0.0)
            if not (np.isfinite(pm.mean) and np.isfinite(v)):
                raise FloatingPointError(f"non-finite moments at step {t}, layer {l}")
            windows[l - 1][0] = windows[l - 1][0][1:] + [pm.mean]
            windows[l - 1][1] = windows[l - 1][1][1:] + [v]
            h_mean[t, l - 1], h_var[t, l - 1] = pm.mean, v
        out_mu, out_lam = recent(windows[L - 1])
        pm = predict_layer(model, L + 1, out_mu, out_lam, posteriors[L])
        predictions += 1
        clamped += pm.clamped
        if not (np.isfinite(pm.mean) and np.isfinite(pm.variance)):
            raise FloatingPointError(f"non-finite output moments at step {t}")
        y_mean[t], y_var[t] = pm.mean, pm.variance
        y_var_noise[t] = pm.variance + float(model.layers[L].params.sigma_noise2)
        x_hist = x_hist[1:] + [X_test[t]]

    trace = SimulationTrace(y_mean, y_var, y_var_noise, h_mean, h_var, clamped, predictions, warm_start)
    if trace.clamp_rate > MAX_CLAMP_RATE:
        raise RuntimeError(f"variance clamp rate {trace.clamp_rate:.3%} exceeds {MAX_CLAMP_RATE:.1%}")
    return trace


def rmse(sim_mean, y_true, denormalizer=None) -> float:
    """Root mean squared error, optionally after mapping both series through ``denormalizer``."""
    a = np.asarray(sim_mean, dtype=float).reshape(-1)
    b = np.asarray(y_true, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if denormalizer is not None:
        a, b = denormalizer(a), denormalizer(b)
    return float(np.sqrt(np.mean((a - b) ** 2)))
