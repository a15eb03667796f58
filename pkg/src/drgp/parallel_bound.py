"""Sharded bound evaluation by additive per-row partial sums.

Every data-dependent quantity of the bound is a sum over target rows, so
disjoint shards of target times can be evaluated independently from a
read-only model snapshot and combined afterwards. The finish step only
factorises ``M x M`` matrices, so its cost does not grow with the data.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .recurrent_state import RecurrentModel
from .revarb_bound import BoundValue, LayerSums, _with_data, finish, layer_sums

PARTIALS_SCHEMA = "drgp-partials/1"


@dataclass
class PartialSums:
    """Per-layer sums over the target times ``start .. stop-1`` (0-based series times)."""

    start: int
    stop: int
    layers: list[LayerSums]

    def to_dict(self) -> dict:
        def enc(s: LayerSums):
            return {
                "c": np.asarray(s.c).tolist(),
                "psi2": np.asarray(s.psi2).tolist(),
                "psi_reg": None if s.psi_reg is None else np.asarray(s.psi_reg).tolist(),
                "tt": float(s.tt),
                "count": int(s.count),
                "entropy": float(s.entropy),
            }

        return {"schema": PARTIALS_SCHEMA, "start": self.start, "stop": self.stop, "layers": [enc(s) for s in self.layers]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "PartialSums":
        if d.get("schema") != PARTIALS_SCHEMA:
            raise ValueError(f"unsupported partial-sum schema {d.get('schema')!r}")
        layers = [
            LayerSums(
                np.asarray(s["c"], dtype=float),
                np.asarray(s["psi2"], dtype=float),
                None if s["psi_reg"] is None else np.asarray(s["psi_reg"], dtype=float),
                s["tt"],
                s["count"],
                s["entropy"],
            )
            for s in d["layers"]
        ]
        return cls(d["start"], d["stop"], layers)

    @classmethod
    def from_json(cls, text: str) -> "PartialSums":
        return cls.from_dict(json.loads(text))


def shard_ranges(model: RecurrentModel, shards: int) -> list[tuple[int, int]]:
    """Split the target times ``H_x .. N-1`` into ``shards`` contiguous ranges."""
    if shards < 1:
        raise ValueError("shards must be >= 1")
    edges = np.linspace(model.config.H_x, model.N, shards + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def shard_evaluate(model: RecurrentModel, y=None, X=None, shard: tuple[int, int] | None = None) -> PartialSums:
    """Partial sums of every layer over the target times in ``shard``."""
    model = _with_data(model, y, X)
    H_x = model.config.H_x
    start, stop = (H_x, model.N) if shard is None else (int(shard[0]), int(shard[1]))
    if not H_x <= start <= stop <= model.N:
        raise ValueError(f"shard {start}..{stop} outside target times {H_x}..{model.N}")
    rows = (start - H_x, stop - H_x)
    return PartialSums(start, stop, [layer_sums(model, l, rows) for l in range(1, model.L + 2)])


def _tree_sum(items):
    items = list(items)
    while len(items) > 1:
        nxt = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


def reduce_partials(partials: list[PartialSums], model: RecurrentModel) -> list[LayerSums]:
    """Pairwise sum of shard partials after checking they tile the target times exactly."""
    if not partials:
        raise ValueError("no partial sums to reduce")
    ordered = sorted(partials, key=lambda p: (p.start, p.stop))
    pos = model.config.H_x
    for p in ordered:
        if p.start < pos:
            raise ValueError(f"shard {p.start}..{p.stop} overlaps a previous shard")
        if p.start > pos:
            raise ValueError(f"target times {pos}..{p.start} are not covered by any shard")
        pos = p.stop
    if pos != model.N:
        raise ValueError(f"target times {pos}..{model.N} are not covered by any shard")
    return [_tree_sum(p.layers[l] for p in ordered) for l in range(model.L + 1)]


def reduce_and_finish(partials: list[PartialSums], model: RecurrentModel) -> BoundValue:
    return finish(reduce_partials(partials, model), model)


def sharded_bound(model: RecurrentModel, shards: int = 2, workers: int = 1) -> BoundValue:
    """Bound evaluated shard by shard on a thread pool, then reduced."""
    ranges = shard_ranges(model, shards)
    if workers <= 1:
        partials = [shard_evaluate(model, shard=r) for r in ranges]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(lambda r: shard_evaluate(model, shard=r), ranges))
    return reduce_and_finish(partials, model)


def time_phases(model: RecurrentModel, workers: int, shards: int | None = None, repeats: int = 3) -> tuple[float, float]:
    """Best-of-``repeats`` wall times (ms) of the shard phase and the finish phase."""
    shards = workers if shards is None else shards
    ranges = shard_ranges(model, shards)
    shard_ms = finish_ms = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        if workers <= 1:
            partials = [shard_evaluate(model, shard=r) for r in ranges]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                partials = list(pool.map(lambda r: shard_evaluate(model, shard=r), ranges))
        t1 = time.perf_counter()
        reduce_and_finish(partials, model)
        t2 = time.perf_counter()
        shard_ms = min(shard_ms, 1e3 * (t1 - t0))
        finish_ms = min(finish_ms, 1e3 * (t2 - t1))
    return shard_ms, finish_ms


def benchmark(workers_list=(1, 2), n_list=(1000, 10000), M: int = 50, seed: int = 0, repeats: int = 3) -> list[dict]:
    """Timing rows ``{workers, n_hat, shard_ms, finish_ms}`` on synthetic sine-drive data."""
    from .dataset_io import make_toy
    from .recurrent_state import ModelConfig, init_model

    rows = []
    for n_hat in n_list:
        ds = make_toy("sine_drive", N=n_hat + 1, seed=seed)
        model = init_model(ds.y, ds.X, ModelConfig(variant="SS", L=1, M=M, H_x=1, H_h=1), seed=seed)
        for w in workers_list:
            shard_ms, finish_ms = time_phases(model, w, repeats=repeats)
            rows.append({"workers": int(w), "n_hat": int(model.n_hat), "shard_ms": shard_ms, "finish_ms": finish_ms})
    return rows
