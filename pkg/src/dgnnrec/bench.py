"""Scaling benchmark: propagation-layer cost vs edge count and unit count.

The per-layer work is dominated by mixing memory-unit transforms over
edges, so doubling either the edge count or the number of units should
at most double the time (ratio <= 2.5 with measurement slack).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .model import EdgeCache, FULL_VARIANT, ModelParams, layer_step
from .seeding import PARAM_INIT, rng_for
from .synthetic import make_random_graph


@dataclass
class BenchRow:
    label: str
    num_edges: int
    memory_units: int
    seconds: float
    ratio: float  # vs previous row of the same sweep; nan for the first


def time_layer_step(graph, dim: int = 16, memory_units: int = 8,
                    reps: int = 5, seed: int = 0) -> float:
    """Median wall-clock seconds of one propagation layer."""
    params = ModelParams.init(graph.num_nodes, dim, memory_units, 1,
                              rng_for(seed, PARAM_INIT))
    cache = EdgeCache(graph)
    layer_step(params.embeddings, graph, params, 0, FULL_VARIANT, cache)  # warmup
    samples = []
    for _ in range(reps):
        started = time.perf_counter()
        layer_step(params.embeddings, graph, params, 0, FULL_VARIANT, cache)
        samples.append(time.perf_counter() - started)
    return float(np.median(samples))


def _graph_with_edges(num_interactions: int, seed: int):
    g = make_random_graph(num_users=1500, num_items=2500, num_relations=50,
                          num_interactions=num_interactions,
                          num_social=num_interactions // 4,
                          num_item_relations=num_interactions // 8,
                          seed=seed)
    total = 2 * (g.ui.num_edges + g.ir.num_edges) + g.uu.num_edges
    return g, total


def scaling_table(base_edges: int = 30000, dim: int = 16, memory_units: int = 8,
                  reps: int = 5, seed: int = 0) -> list[BenchRow]:
    """Two sweeps: |E| doubling at fixed M, then M doubling at fixed |E|."""
    rows: list[BenchRow] = []
    prev = None
    for mult in (1, 2, 4):
        g, total = _graph_with_edges(base_edges * mult, seed)
        secs = time_layer_step(g, dim, memory_units, reps, seed)
        rows.append(BenchRow(f"edges x{mult}", total, memory_units, secs,
                             secs / prev if prev else float("nan")))
        prev = secs
    g, total = _graph_with_edges(base_edges, seed)
    prev = None
    for units in (memory_units // 2, memory_units, memory_units * 2):
        secs = time_layer_step(g, dim, units, reps, seed)
        rows.append(BenchRow(f"units {units}", total, units, secs,
                             secs / prev if prev else float("nan")))
        prev = secs
    return rows


def format_bench_table(rows: list[BenchRow]) -> str:
    out = [f"{'sweep':<12s} {'edges':>8s} {'M':>4s} {'seconds':>10s} {'ratio':>7s}"]
    for r in rows:
        ratio = f"{r.ratio:.2f}" if np.isfinite(r.ratio) else "-"
        out.append(f"{r.label:<12s} {r.num_edges:>8d} {r.memory_units:>4d} "
                   f"{r.seconds:>10.5f} {ratio:>7s}")
    return "\n".join(out) + "\n"
