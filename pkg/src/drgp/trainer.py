"""Bound maximisation with positivity transforms, staged freezing and restarts.

Gradients come from JAX reverse-mode differentiation of the same bound
code used for evaluation (the numerics dispatch on the array type), in
float64. Optimisation uses SciPy's L-BFGS-B or a small Adam loop.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.optimize

from .psi_statistics import BETA_FLOOR, GaussianSpectral
from .recurrent_state import Layer, LayerVariational, ModelConfig, RecurrentModel, init_model
from .revarb_bound import evidence_bound
from .spectral_kernel import TWO_PI, KernelParams, SpectralBasis

log = logging.getLogger(__name__)

POSITIVE_FLOOR = 1e-10
GROUPS = ("sigma_noise2", "sigma_power2", "lengthscales", "Z", "U", "b", "beta", "state_mu", "state_lam")
POSITIVE = {"sigma_noise2", "sigma_power2", "lengthscales", "beta", "state_lam"}
FREEZABLE = ("sigma_noise2", "sigma_power2", "Z", "U", "b", "beta")


def _jax():
    import jax

    jax.config.update("jax_enable_x64", True)
    return jax


@dataclass(frozen=True)
class Transform:
    """``value = floor + softplus(x)**2`` and its inverse."""

    floor: float = 0.0

    def forward(self, x, xp=np):
        return self.floor + xp.logaddexp(0.0, x) ** 2

    def inverse(self, value):
        value = np.asarray(value, dtype=float)
        if np.any(value <= self.floor):
            raise ValueError(f"value must exceed the floor {self.floor}")
        y = np.sqrt(value - self.floor)
        return y + np.log(-np.expm1(-y))


def transform_for(group: str) -> Transform:
    return Transform(BETA_FLOOR if group == "beta" else POSITIVE_FLOOR)


@dataclass
class TrainConfig:
    """Optimisation settings; ``freeze`` lists parameter groups held fixed throughout."""

    max_iters: int = 100
    restarts: int = 5
    stage1_iters: int = 20
    stage1_freeze: tuple = ("sigma_noise2", "sigma_power2")
    freeze: tuple = ("b", "beta")
    optimizer: str = "quasi-newton"
    learning_rate: float = 0.01
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    log_csv: str | None = None

    def __post_init__(self):
        self.stage1_freeze = tuple(self.stage1_freeze)
        self.freeze = tuple(self.freeze)
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.max_iters < 0 or self.stage1_iters < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.stage1_iters > self.max_iters:
            raise ValueError("stage1_iters cannot exceed max_iters")
        if self.optimizer not in ("quasi-newton", "adam"):
            raise ValueError("optimizer must be 'quasi-newton' or 'adam'")
        for g in self.freeze + self.stage1_freeze:
            if g not in FREEZABLE:
                raise ValueError(f"cannot freeze unknown group {g!r}; choose from {FREEZABLE}")


@dataclass
class IndexEntry:
    layer: int
    group: str
    start: int
    stop: int
    shape: tuple

    def name(self, offset: int) -> str:
        idx = np.unravel_index(offset - self.start, self.shape) if self.shape else ()
        return f"layer{self.layer}.{self.group}{list(map(int, idx))}"


@dataclass
class ParameterMap:
    entries: list[IndexEntry]
    size: int

    def name_of(self, i: int) -> str:
        for e in self.entries:
            if e.start <= i < e.stop:
                return e.name(i)
        raise IndexError(i)

    def names(self) -> list[str]:
        return [self.name_of(i) for i in range(self.size)]


def _group_value(model: RecurrentModel, l: int, group: str):
    lay = model.layers[l - 1]
    if group == "sigma_noise2":
        return lay.params.sigma_noise2
    if group == "sigma_power2":
        return lay.params.sigma_power2
    if group == "lengthscales":
        return lay.params.lengthscales
    if group == "Z":
        return lay.var.spectral.alpha if model.vss else lay.basis.Z
    if group == "U":
        return lay.basis.U
    if group == "b":
        return lay.basis.b
    if group == "beta":
        return lay.var.spectral.beta if model.vss else None
    if group == "state_mu":
        return lay.var.state_mu
    if group == "state_lam":
        return lay.var.state_lam
    raise KeyError(group)


def pack_parameters(model: RecurrentModel, freeze=()) -> tuple[np.ndarray, ParameterMap]:
    """Flatten free parameters in a fixed order; positive ones in transformed coordinates."""
    parts, entries, pos = [], [], 0
    for l in range(1, model.L + 2):
        for group in GROUPS:
            if group in freeze:
                continue
            value = _group_value(model, l, group)
            if value is None:
                continue
            arr = np.asarray(value, dtype=float)
            flat = arr.reshape(-1)
            if group in POSITIVE:
                flat = transform_for(group).inverse(flat)
            entries.append(IndexEntry(l, group, pos, pos + flat.size, arr.shape))
            parts.append(flat)
            pos += flat.size
    vec = np.concatenate(parts) if parts else np.zeros(0)
    return vec, ParameterMap(entries, pos)


def unpack_parameters(vec, pmap: ParameterMap, template: RecurrentModel) -> RecurrentModel:
    """Model with the free parameters taken from ``vec`` and the rest from ``template``.

    Works for NumPy and JAX vectors; JAX input yields a model whose free
    parameters are traced arrays.
    """
    xp = np
    if type(vec).__module__.startswith(("jax", "jaxlib")):
        import jax.numpy as xp
    values = {}
    for e in pmap.entries:
        v = vec[e.start : e.stop]
        if e.group in POSITIVE:
            v = transform_for(e.group).forward(v, xp)
        if e.group == "b":
            v = xp.mod(v, TWO_PI)
        values[(e.layer, e.group)] = v.reshape(e.shape) if e.shape else v.reshape(())
    layers = []
    for l, old in enumerate(template.layers, start=1):

        def get(group, current):
            return values.get((l, group), current)

        p, bs, var = old.params, old.basis, old.var
        params = KernelParams(
            get("sigma_power2", p.sigma_power2), get("lengthscales", p.lengthscales), p.periods, get("sigma_noise2", p.sigma_noise2)
        )
        spectral = None
        if template.vss:
            alpha = get("Z", var.spectral.alpha)
            spectral = GaussianSpectral(alpha, get("beta", var.spectral.beta))
            Z = alpha
        else:
            Z = get("Z", bs.Z)
        basis = SpectralBasis(Z, get("U", bs.U), get("b", bs.b))
        new_var = LayerVariational(
            get("state_mu", var.state_mu), get("state_lam", var.state_lam), spectral, var.weights_m, var.weights_s
        )
        layers.append(Layer(params, basis, new_var))
    return RecurrentModel(template.config, layers, template.variant, template.y, template.X, template.seed, dict(template.meta))


_COMPILED: dict = {}


def _structure_key(model: RecurrentModel, freeze: tuple) -> tuple:
    """Everything the traced bound depends on besides array values."""
    periods = tuple(tuple(float(q) for q in np.asarray(layer.params.periods)) for layer in model.layers)
    return (model.variant, model.config, model.N, model.Q_x, model.M, tuple(freeze), periods)


def _compiled_bound(template: RecurrentModel, freeze: tuple):
    """Jitted ``(free, full, y, X) -> (bound, d bound / d free)``, shared by models of one structure.

    ``full`` packs every group of the model, so frozen values and data are
    traced arguments rather than constants and restarts reuse the compile.
    """
    key = _structure_key(template, freeze)
    fn = _COMPILED.get(key)
    if fn is None:
        jax = _jax()
        _, pmap = pack_parameters(template, freeze)
        _, full_pmap = pack_parameters(template)
        skeleton = template.copy()

        def bound(vec, full, y, X):
            base = RecurrentModel(skeleton.config, skeleton.layers, skeleton.variant, y, X)
            base = unpack_parameters(full, full_pmap, base)
            return evidence_bound(unpack_parameters(vec, pmap, base)).total

        fn = jax.jit(jax.value_and_grad(bound))
        _COMPILED[key] = fn
    return fn


class Objective:
    """Bound and gradient on the packed vector; compiles once per model structure."""

    def __init__(self, template: RecurrentModel, freeze=()):
        self.template = template
        self.freeze = tuple(freeze)
        self.x0, self.pmap = pack_parameters(template, self.freeze)
        import jax.numpy as jnp

        self._full = jnp.asarray(pack_parameters(template)[0])
        self._y = jnp.asarray(template.y)
        self._X = jnp.asarray(template.X)
        self._vg = _compiled_bound(template, self.freeze)

    def value_and_grad(self, x):
        import jax.numpy as jnp

        v, g = self._vg(jnp.asarray(x, dtype=jnp.float64), self._full, self._y, self._X)
        return float(v), np.asarray(g, dtype=float)

    def model(self, x) -> RecurrentModel:
        return unpack_parameters(np.asarray(x, dtype=float), self.pmap, self.template)


def gradient(model: RecurrentModel, freeze=()) -> tuple[np.ndarray, ParameterMap]:
    """Gradient of the model's bound w.r.t. its packed free parameters.

    Raises
    ------
    FloatingPointError
        If any entry is non-finite; the message names the parameters.
    """
    obj = Objective(model, freeze)
    _, g = obj.value_and_grad(obj.x0)
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        names = ", ".join(obj.pmap.name_of(int(i)) for i in bad[:10])
        raise FloatingPointError(f"non-finite gradient for {names}")
    return g, obj.pmap


@dataclass
class TraceRow:
    iteration: int
    bound: float
    grad_norm: float
    wall_time: float


@dataclass
class RestartRecord:
    index: int
    seed: int
    status: str
    initial_bound: float
    final_bound: float
    trace: list[TraceRow] = field(default_factory=list)
    model: RecurrentModel | None = None
    message: str = ""


@dataclass
class TrainResult:
    model: RecurrentModel
    trace: list[TraceRow]
    restarts: list[RestartRecord]
    best_index: int


class _NonFinite(RuntimeError):
    pass


def _run_stage(obj: Objective, x, iters, config: TrainConfig, trace, t0, on_iter):
    """Optimise for ``iters`` iterations from ``x``; appends accepted iterates to ``trace``."""
    if iters <= 0 or x.size == 0:
        return x

    def f(z):
        v, g = obj.value_and_grad(z)
        if not np.isfinite(v) or not np.all(np.isfinite(g)):
            raise _NonFinite("non-finite bound or gradient")
        return -v, -g

    if config.optimizer == "adam":
        m = np.zeros_like(x)
        s = np.zeros_like(x)
        b1, b2, eps = 0.9, 0.999, 1e-8
        for k in range(1, iters + 1):
            v, g = f(x)
            m = b1 * m + (1 - b1) * g
            s = b2 * s + (1 - b2) * g**2
            x = x - config.learning_rate * (m / (1 - b1**k)) / (np.sqrt(s / (1 - b2**k)) + eps)
            v, g = f(x)
            trace.append(TraceRow(trace[-1].iteration + 1, -v, float(np.linalg.norm(g)), time.perf_counter() - t0))
            on_iter(x, trace[-1], {"adam_m": m.tolist(), "adam_s": s.tolist()})
        return x

    last = {}

    def fun(z):
        v, g = f(z)
        last["x"], last["g"] = np.array(z), g
        return v, g

    def callback(intermediate_result):
        z = intermediate_result.x
        g = last["g"] if np.array_equal(last.get("x"), z) else obj.value_and_grad(z)[1]
        row = TraceRow(
            trace[-1].iteration + 1, -float(intermediate_result.fun), float(np.linalg.norm(g)), time.perf_counter() - t0
        )
        trace.append(row)
        on_iter(z, row, {})

    res = scipy.optimize.minimize(
        fun, x, jac=True, method="L-BFGS-B", callback=callback, options={"maxiter": iters, "maxcor": 20}
    )
    return np.asarray(res.x, dtype=float)


def train_model(model: RecurrentModel, config: TrainConfig, index: int = 0) -> RestartRecord:
    """Optimise one initialised model through both stages."""
    t0 = time.perf_counter()
    freeze2 = config.freeze
    freeze1 = tuple(dict.fromkeys(config.freeze + config.stage1_freeze))
    obj = Objective(model, freeze1 if config.stage1_iters > 0 else freeze2)
    v0, g0 = obj.value_and_grad(obj.x0)
    trace = [TraceRow(0, v0, float(np.linalg.norm(g0)), time.perf_counter() - t0)]
    rec = RestartRecord(index, int(model.seed or 0), "ok", v0, v0, trace, model)
    if not np.isfinite(v0):
        rec.status, rec.message = "aborted", "non-finite initial bound"
        return rec
    if config.max_iters == 0:
        return rec

    def on_iter(x, row, state):
        k = config.checkpoint_every
        if config.checkpoint_dir and k and row.iteration % k == 0:
            _checkpoint(config.checkpoint_dir, index, row, current.model(x), x, state)

    try:
        current = obj
        x = obj.x0
        if config.stage1_iters > 0:
            x = _run_stage(obj, x, config.stage1_iters, config, trace, t0, on_iter)
            stage1_model = obj.model(x)
            current = Objective(stage1_model, freeze2)
            x = current.x0
        x = _run_stage(current, x, config.max_iters - config.stage1_iters, config, trace, t0, on_iter)
        rec.model = current.model(x)
        rec.final_bound = current.value_and_grad(x)[0]
    except _NonFinite as exc:
        rec.status, rec.message = "aborted", str(exc)
        log.warning("restart %d aborted: %s", index, exc)
    return rec


def _checkpoint(directory, index, row: TraceRow, model: RecurrentModel, x, state):
    os.makedirs(directory, exist_ok=True)
    stem = os.path.join(directory, f"restart{index}_iter{row.iteration:05d}")
    model.to_json(stem + "_model.json")
    with open(stem + "_optimizer.json", "w") as fh:
        json.dump({"iteration": row.iteration, "bound": row.bound, "x": np.asarray(x).tolist(), **state}, fh)


def write_trace_csv(path, trace: list[TraceRow]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "bound", "grad_norm", "wall_time"])
        for r in trace:
            w.writerow([r.iteration, repr(r.bound), repr(r.grad_norm), f"{r.wall_time:.6f}"])


def train(y, X, model_config: ModelConfig, config: TrainConfig) -> TrainResult:
    """Best-of-restarts training; restart ``r`` initialises with seed ``config.seed + r``.

    The winner has the largest final bound, ties going to the lowest
    restart index. Restarts hitting non-finite values are recorded as
    aborted and skipped.
    """
    records = []
    for r in range(config.restarts):
        model = init_model(y, X, model_config, seed=config.seed + r)
        rec = train_model(model, config, r)
        log.info("restart %d: %s, bound %.6g -> %.6g", r, rec.status, rec.initial_bound, rec.final_bound)
        records.append(rec)
    ok = [r for r in records if r.status == "ok" and np.isfinite(r.final_bound)]
    if not ok:
        raise RuntimeError("every restart was aborted: " + "; ".join(r.message for r in records))
    best = max(ok, key=lambda r: (r.final_bound, -r.index))
    if config.log_csv:
        write_trace_csv(config.log_csv, best.trace)
    return TrainResult(best.model, best.trace, records, best.index)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
