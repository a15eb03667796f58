"""Deep recurrent model container and regressor-window assembly.

Time indices are 0-based. With ``N`` observations the targets are the
times ``H_x .. N-1`` (``n_hat = N - H_x`` of them). Every hidden layer
keeps a Gaussian state for the times ``H_x - H_h .. N-1``: the first
``H_h`` entries form the initial window, which only appears as lagged
input and carries a standard-normal prior; the remaining ``n_hat``
entries are the layer targets.

Regressor rows for target time ``i``::

    layer 1        [h1_{i-1} .. h1_{i-H_h},  x_{i-1} .. x_{i-H_x}]
    layer l <= L   [hl_{i-1} .. hl_{i-H_h},  h(l-1)_i .. h(l-1)_{i-H_h+1}]
    output L+1     [hL_i .. hL_{i-H_h+1}]
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ._backend import namespace
from .psi_statistics import GaussianInputs, GaussianSpectral
from .spectral_kernel import TWO_PI, KernelParams, SpectralBasis

VARIANTS = ("SS", "VSS", "SS-IP-1", "VSS-IP-1", "SS-IP-2", "VSS-IP-2")
SCHEMA = "drgp-model/1"


def parse_variant(variant: str) -> tuple[bool, int]:
    """Return ``(variational_spectrum, ip_kind)`` with ``ip_kind`` in {0, 1, 2}."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown bound variant {variant!r}; choose from {VARIANTS}")
    vss = variant.startswith("VSS")
    ip = int(variant[-1]) if "IP" in variant else 0
    return vss, ip


@dataclass(frozen=True)
class WindowConfig:
    """Lag counts and depth; ``L`` is the number of hidden layers."""

    H_x: int
    H_h: int
    L: int

    def __post_init__(self):
        for name in ("H_x", "H_h", "L"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")

    def n_hat(self, N: int) -> int:
        return N - self.H_x

    def n_states(self, N: int) -> int:
        return N - self.H_x + self.H_h

    def input_dims(self, Q_x: int) -> list[int]:
        """Regressor dimension of every layer, hidden layers first, output last."""
        return [self.H_h + self.H_x * Q_x] + [2 * self.H_h] * (self.L - 1) + [self.H_h]


@dataclass
class ModelConfig:
    """Everything needed to build a fresh model."""

    variant: str = "SS"
    L: int = 1
    M: int = 50
    H_x: int = 1
    H_h: int = 1
    lengthscale_init: str = "sqrt"
    inducing_init: str = "subset"
    state_noise: float = 0.01
    state_lam: float = 0.01
    beta_init: float = 1e-3
    sigma_noise: float = 0.1
    sigma_power: float = 1.0

    def __post_init__(self):
        parse_variant(self.variant)
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.lengthscale_init not in ("sqrt", "range"):
            raise ValueError("lengthscale_init must be 'sqrt' or 'range'")
        if self.inducing_init not in ("subset", "zeros"):
            raise ValueError("inducing_init must be 'subset' or 'zeros'")
        if self.state_lam <= 0 or self.beta_init <= 0:
            raise ValueError("state_lam and beta_init must be positive")

    @property
    def window(self) -> WindowConfig:
        return WindowConfig(self.H_x, self.H_h, self.L)


@dataclass
class LayerVariational:
    """Variational quantities of one layer; the output layer has no states."""

    state_mu: np.ndarray | None = None
    state_lam: np.ndarray | None = None
    spectral: GaussianSpectral | None = None
    weights_m: np.ndarray | None = None
    weights_s: np.ndarray | None = None

    def __post_init__(self):
        if (self.state_mu is None) != (self.state_lam is None):
            raise ValueError("state means and variances must be given together")
        if self.state_lam is not None:
            xp = namespace(self.state_mu, self.state_lam)
            self.state_mu = xp.asarray(self.state_mu, dtype=float).reshape(-1)
            self.state_lam = xp.asarray(self.state_lam, dtype=float).reshape(-1)
            if self.state_mu.shape != self.state_lam.shape:
                raise ValueError("state means and variances differ in length")
            if xp is np and np.any(self.state_lam <= 0):
                raise ValueError("state variances must be strictly positive")


@dataclass
class Layer:
    params: KernelParams
    basis: SpectralBasis
    var: LayerVariational = field(default_factory=LayerVariational)


@dataclass
class RecurrentModel:
    """``L`` hidden layers plus one output layer, with the training series."""

    config: WindowConfig
    layers: list[Layer]
    variant: str
    y: np.ndarray
    X: np.ndarray
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        parse_variant(self.variant)
        xp = namespace(self.y, self.X)
        self.y = xp.asarray(self.y, dtype=float).reshape(-1)
        self.X = xp.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"X has {self.X.shape[0]} rows but y has {self.y.shape[0]}")
        if len(self.layers) != self.config.L + 1:
            raise ValueError(f"expected {self.config.L + 1} layers, got {len(self.layers)}")
        dims = self.config.input_dims(self.Q_x)
        for l, (layer, Q) in enumerate(zip(self.layers, dims), start=1):
            if layer.params.Q != Q or layer.basis.Q != Q:
                raise ValueError(f"layer {l} has input dimension {layer.params.Q}, expected {Q}")

    @property
    def L(self) -> int:
        return self.config.L

    @property
    def N(self) -> int:
        return int(self.y.shape[0])

    @property
    def n_hat(self) -> int:
        return self.config.n_hat(self.N)

    @property
    def Q_x(self) -> int:
        return int(self.X.shape[1])

    @property
    def M(self) -> int:
        return self.layers[0].basis.M

    @property
    def vss(self) -> bool:
        return parse_variant(self.variant)[0]

    @property
    def ip_kind(self) -> int:
        return parse_variant(self.variant)[1]

    def copy(self) -> "RecurrentModel":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        return model_to_dict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _check_layer(model: RecurrentModel, layer: int):
    if not 1 <= layer <= model.L + 1:
        raise ValueError(f"layer must be in 1..{model.L + 1}, got {layer}")


def _states(model: RecurrentModel, l: int):
    var = model.layers[l - 1].var
    if var.state_mu is None:
        raise ValueError(f"hidden layer {l} has no latent states")
    expected = model.config.n_states(model.N)
    if var.state_mu.shape[0] != expected:
        raise ValueError(f"layer {l} holds {var.state_mu.shape[0]} states, expected {expected}")
    return var.state_mu, var.state_lam


def assemble_regressors(model: RecurrentModel, X=None, layer: int = 1) -> GaussianInputs:
    """Regressor means and variances of ``layer`` (1-based, ``L+1`` is the output).

    Exogenous columns are deterministic and get variance 0.
    """
    _check_layer(model, layer)
    X = model.X if X is None else namespace(X).asarray(X, dtype=float).reshape(model.N, -1)
    xpx = namespace(X)
    H_x, H_h, n = model.config.H_x, model.config.H_h, model.n_hat
    cols_mu, cols_lam = [], []

    def lagged(mu, lam, lags):
        for k in lags:
            cols_mu.append(mu[H_h - k : H_h - k + n])
            cols_lam.append(lam[H_h - k : H_h - k + n])

    if layer <= model.L:
        mu, lam = _states(model, layer)
        lagged(mu, lam, range(1, H_h + 1))
    if layer == 1:
        xp = namespace(*cols_mu, X)
        mu = xp.stack(cols_mu, axis=1)
        lam = xp.stack(cols_lam, axis=1)
        xcols = xpx.concatenate([X[H_x - k : H_x - k + n] for k in range(1, H_x + 1)], axis=1)
        return GaussianInputs(
            xp.concatenate([mu, xp.asarray(xcols)], axis=1),
            xp.concatenate([lam, xp.zeros_like(xp.asarray(xcols))], axis=1),
        )
    mu_b, lam_b = _states(model, layer - 1)
    lagged(mu_b, lam_b, range(0, H_h))
    xp = namespace(*cols_mu)
    return GaussianInputs(xp.stack(cols_mu, axis=1), xp.stack(cols_lam, axis=1))


def layer_targets(model: RecurrentModel, layer: int):
    """Target means and variances of ``layer``; the output layer targets ``y`` exactly."""
    _check_layer(model, layer)
    H_h = model.config.H_h
    if layer <= model.L:
        mu, lam = _states(model, layer)
        return mu[H_h:], lam[H_h:]
    t = model.y[model.config.H_x :]
    return t, namespace(t).zeros_like(t)


def init_model(y, X, config: ModelConfig, seed: int = 0) -> RecurrentModel:
    """Build a model from data with the standard initialisation.

    Noise and signal amplitudes start at ``sigma_noise``/``sigma_power``,
    latent states at ``y`` plus Gaussian noise of scale ``state_noise``,
    spectral points at ``N(0, I)``, phases uniform and length scales from
    the range (or its square root) of each regressor column.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    win = config.window
    N = y.shape[0]
    if N <= win.H_x:
        raise ValueError(f"need more than H_x={win.H_x} observations, got {N}")
    if X.shape[0] != N:
        raise ValueError(f"X has {X.shape[0]} rows but y has {N}")
    rng = np.random.default_rng(seed)
    vss, ip = parse_variant(config.variant)
    dims = win.input_dims(X.shape[1])
    M = config.M

    times = np.arange(win.H_x - win.H_h, N)
    base = y[np.clip(times, 0, N - 1)]
    layers = []
    for l in range(1, win.L + 2):
        var = LayerVariational()
        if l <= win.L:
            var = LayerVariational(
                state_mu=base + config.state_noise * rng.standard_normal(base.shape[0]),
                state_lam=np.full(base.shape[0], config.state_lam),
            )
        Q = dims[l - 1]
        params = KernelParams(config.sigma_power**2, np.ones(Q), None, config.sigma_noise**2)
        basis = SpectralBasis(np.zeros((M, Q)), np.zeros((M, Q)), np.zeros(M))
        layers.append(Layer(params, basis, var))
    model = RecurrentModel(win, layers, config.variant, y, X, seed=seed, meta={"model_config": asdict(config)})

    for l, layer in enumerate(model.layers, start=1):
        H = np.asarray(assemble_regressors(model, layer=l).mu)
        span = H.max(axis=0) - H.min(axis=0)
        span = np.where(span > 0, span, 1.0)
        layer.params.lengthscales = np.sqrt(span) if config.lengthscale_init == "sqrt" else span
        Q = H.shape[1]
        Z = rng.standard_normal((M, Q))
        b = rng.uniform(0.0, TWO_PI, size=M)
        if config.inducing_init == "subset" or ip:
            rows = rng.choice(H.shape[0], size=M, replace=M > H.shape[0])
            U = H[rows].copy()
        else:
            U = np.zeros((M, Q))
        layer.basis = SpectralBasis(Z, U, b)
        if vss:
            layer.var.spectral = GaussianSpectral(Z.copy(), np.full((M, Q), config.beta_init))
    return model


def _arr(a):
    return None if a is None else np.asarray(a, dtype=float).tolist()


def model_to_dict(model: RecurrentModel) -> dict:
    """JSON-ready dictionary; infinite periods are stored as ``null``."""
    layers = []
    for layer in model.layers:
        p, bs, v = layer.params, layer.basis, layer.var
        layers.append(
            {
                "sigma_power2": float(p.sigma_power2),
                "sigma_noise2": float(p.sigma_noise2),
                "lengthscales": _arr(p.lengthscales),
                "periods": [None if np.isinf(q) else float(q) for q in p.periods],
                "Z": _arr(bs.Z),
                "U": _arr(bs.U),
                "b": _arr(bs.b),
                "state_mu": _arr(v.state_mu),
                "state_lam": _arr(v.state_lam),
                "alpha": None if v.spectral is None else _arr(v.spectral.alpha),
                "beta": None if v.spectral is None else _arr(v.spectral.beta),
                "weights_m": _arr(v.weights_m),
                "weights_s": _arr(v.weights_s),
            }
        )
    return {
        "schema": SCHEMA,
        "variant": model.variant,
        "window": asdict(model.config),
        "seed": model.seed,
        "meta": model.meta,
        "y": _arr(model.y),
        "X": _arr(model.X),
        "layers": layers,
    }


def _opt(a):
    return None if a is None else np.asarray(a, dtype=float)


def model_from_dict(d: dict) -> RecurrentModel:
    if d.get("schema") != SCHEMA:
        raise ValueError(f"unsupported model schema {d.get('schema')!r}")
    layers = []
    for ld in d["layers"]:
        periods = np.array([np.inf if q is None else q for q in ld["periods"]], dtype=float)
        params = KernelParams(ld["sigma_power2"], np.asarray(ld["lengthscales"]), periods, ld["sigma_noise2"])
        basis = SpectralBasis(np.asarray(ld["Z"]), np.asarray(ld["U"]), np.asarray(ld["b"]))
        spectral = None if ld["alpha"] is None else GaussianSpectral(np.asarray(ld["alpha"]), np.asarray(ld["beta"]))
        var = LayerVariational(
            _opt(ld["state_mu"]), _opt(ld["state_lam"]), spectral, _opt(ld["weights_m"]), _opt(ld["weights_s"])
        )
        layers.append(Layer(params, basis, var))
    X = np.asarray(d["X"], dtype=float).reshape(len(d["y"]), -1)
    return RecurrentModel(
        WindowConfig(**d["window"]), layers, d["variant"], np.asarray(d["y"]), X, d.get("seed"), d.get("meta", {})
    )


def load_model(path) -> RecurrentModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
