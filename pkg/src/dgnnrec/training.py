"""Pairwise ranking optimization: BPR loss, epoch loop, checkpoints.

A batch runs one full-graph forward, scores its sampled triplets, and
takes a single Adam step on the mean pairwise loss plus weight decay
over the whole parameter vector. Per-epoch RNG streams are derived from
(seed, epoch), so resuming from a checkpoint mid-run reproduces the
loss trajectory of an uninterrupted run exactly.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .hetgraph import HeteroGraph, sample_bpr_batch
from .model import (EdgeCache, EdgeType, FULL_VARIANT, ModelParams,
                    ModelVariant, _scatter_to_source, backward, forward,
                    recalibrated_users)
from .seeding import PARAM_INIT, TRIPLETS, rng_for


@dataclass(frozen=True)
class TrainingConfig:
    dim: int = 16
    layers: int = 2
    memory_units: int = 8
    lr: float = 0.01
    batch_size: int = 2048
    reg: float = 1e-4
    epochs: int = 80
    seed: int = 0

    def __post_init__(self):
        # lr/reg/epochs of 0 are allowed for no-op diagnostics runs.
        if self.dim < 1 or self.layers < 0 or self.memory_units < 1:
            raise ValueError("dim and memory_units must be >= 1, layers >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.lr < 0 or self.reg < 0:
            raise ValueError("lr and reg must be non-negative")


# ---------------------------------------------------------------------------
# objective


def bpr_loss(score_pos, score_neg, params: ModelParams | None = None, reg: float = 0.0):
    """-log sigmoid(pos - neg) + reg * ||theta||^2, overflow-safe."""
    core = np.logaddexp(0.0, -(np.asarray(score_pos, dtype=np.float64)
                               - np.asarray(score_neg, dtype=np.float64)))
    if reg and params is not None:
        vec = params.to_vector()
        core = core + reg * float(vec @ vec)
    return float(core) if np.ndim(core) == 0 else core


def _triplet_scores(hstar: np.ndarray, q_users: np.ndarray, num_users: int,
                    users: np.ndarray, pos: np.ndarray, neg: np.ndarray):
    qp = q_users[users]
    s_pos = np.einsum("nd,nd->n", qp, hstar[num_users + pos])
    s_neg = np.einsum("nd,nd->n", qp, hstar[num_users + neg])
    return s_pos, s_neg, qp


def bpr_batch_loss(graph: HeteroGraph, params: ModelParams,
                   users, pos, neg, reg: float,
                   variant: ModelVariant = FULL_VARIANT,
                   edge_cache: EdgeCache | None = None) -> float:
    """Forward-only objective value for a fixed triplet batch."""
    cache = edge_cache if edge_cache is not None else EdgeCache(graph)
    state = forward(graph, params, variant, cache)
    q_users = recalibrated_users(state.hstar, graph, variant, cache)
    s_pos, s_neg, _ = _triplet_scores(state.hstar, q_users, graph.num_users, users, pos, neg)
    core = float(np.logaddexp(0.0, -(s_pos - s_neg)).mean())
    vec = params.to_vector()
    return core + reg * float(vec @ vec)


def bpr_batch_grad(graph: HeteroGraph, params: ModelParams,
                   users, pos, neg, reg: float,
                   variant: ModelVariant = FULL_VARIANT,
                   edge_cache: EdgeCache | None = None):
    """(loss, flat gradient) of the batch objective; exact analytical backward."""
    cache = edge_cache if edge_cache is not None else EdgeCache(graph)
    users = np.asarray(users, dtype=np.int64)
    pos = np.asarray(pos, dtype=np.int64)
    neg = np.asarray(neg, dtype=np.int64)
    num_users = graph.num_users

    state = forward(graph, params, variant, cache)
    hstar = state.hstar
    q_users = recalibrated_users(hstar, graph, variant, cache)
    s_pos, s_neg, qp = _triplet_scores(hstar, q_users, num_users, users, pos, neg)
    margin = s_pos - s_neg
    vec = params.to_vector()
    loss = float(np.logaddexp(0.0, -margin).mean()) + reg * float(vec @ vec)

    # d(mean softplus(-margin))/d margin = -sigmoid(-margin)/B
    g_margin = -de.sigmoid(-margin) / margin.size
    d_hstar = np.zeros_like(hstar)
    d_q = np.zeros((num_users, hstar.shape[1]))
    np.add.at(d_q, users, g_margin[:, None] * (hstar[num_users + pos] - hstar[num_users + neg]))
    np.add.at(d_hstar, num_users + pos, g_margin[:, None] * qp)
    np.add.at(d_hstar, num_users + neg, -g_margin[:, None] * qp)

    if variant.recalibration:
        # q_u = H*[u] + (sum_neighbors + H*[u]) / (deg_u + 1)
        w = d_q / (graph.uu.degrees() + 1.0)[:, None]
        d_hstar[:num_users] += d_q + w
        te = cache.edges[EdgeType.UU]
        if te.num_edges:
            d_hstar[:num_users] += _scatter_to_source(w[te.tgt_ids], te)
    else:
        d_hstar[:num_users] += d_q

    grads = backward(graph, params, state, d_hstar, variant, cache)
    return loss, grads.to_vector() + (2.0 * reg) * vec


# ---------------------------------------------------------------------------
# epoch loop


def train_epoch(graph: HeteroGraph, params: ModelParams, config: TrainingConfig,
                rng: np.random.Generator, adam_state: de.AdamState | None = None,
                variant: ModelVariant = FULL_VARIANT,
                edge_cache: EdgeCache | None = None):
    """ceil(|Y|/batch) batches of sampled triplets, one Adam step each.

    Returns (params, adam_state, mean batch loss); inputs are not mutated.
    """
    cache = edge_cache if edge_cache is not None else EdgeCache(graph)
    if adam_state is None:
        adam_state = de.AdamState.zeros(params.num_params)
    num_batches = max(1, math.ceil(graph.num_interactions / config.batch_size))
    losses = []
    for batch_no in range(num_batches):
        users, pos, neg = sample_bpr_batch(graph, rng, config.batch_size)
        loss, grad = bpr_batch_grad(graph, params, users, pos, neg, config.reg, variant, cache)
        if not np.isfinite(loss):
            raise de.NonFiniteError(
                f"non-finite loss in batch {batch_no}; "
                f"parameter norm {float(np.linalg.norm(params.to_vector())):.6g}")
        new_vec, adam_state = de.adam_step(params.to_vector(), grad, adam_state, config.lr)
        params = params.with_vector(new_vec)
        losses.append(loss)
    return params, adam_state, float(np.mean(losses))


def train_model(train_graph: HeteroGraph, config: TrainingConfig,
                variant: ModelVariant = FULL_VARIANT,
                initial: ModelParams | None = None,
                initial_adam: de.AdamState | None = None,
                start_epoch: int = 0,
                on_epoch=None):
    """Full training run; per-epoch RNG derives from (seed, epoch number).

    ``on_epoch(epoch, params, mean_loss, seconds)`` fires after each epoch.
    Returns (params, adam_state, list of mean epoch losses).
    """
    if initial is not None:
        params = initial
    else:
        params = ModelParams.init(train_graph.num_nodes, config.dim, config.memory_units,
                                  config.layers, rng_for(config.seed, PARAM_INIT))
    adam_state = initial_adam if initial_adam is not None else de.AdamState.zeros(params.num_params)
    cache = EdgeCache(train_graph)
    losses = []
    for epoch in range(start_epoch + 1, config.epochs + 1):
        rng = rng_for(config.seed, TRIPLETS, epoch)
        started = time.perf_counter()
        try:
            params, adam_state, mean_loss = train_epoch(
                train_graph, params, config, rng, adam_state, variant, cache)
        except de.NonFiniteError as exc:
            raise de.NonFiniteError(f"epoch {epoch}: {exc}") from None
        losses.append(mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, params, mean_loss, time.perf_counter() - started)
    return params, adam_state, losses


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"DGNNCKPT"
CHECKPOINT_VERSION = 1
_FLAG_ADAM = 1
_HEADER = struct.Struct("<8s9Idd")  # magic, version, I, J, R, d, L, M, flags, epoch, loss, ln_eps
_ADAM_HEADER = struct.Struct("<Iddd")  # step, beta1, beta2, eps


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    adam_state: de.AdamState | None
    num_users: int
    num_items: int
    num_relations: int
    epoch: int
    loss: float


def save_checkpoint(path, params: ModelParams, num_users: int, num_items: int,
                    num_relations: int, adam_state: de.AdamState | None = None,
                    epoch: int = 0, loss: float = float("nan")) -> None:
    """Binary little-endian dump; see README for the exact layout."""
    if params.num_nodes != num_users + num_items + num_relations:
        raise CheckpointError("params do not cover num_users + num_items + num_relations nodes")
    flags = _FLAG_ADAM if adam_state is not None else 0
    chunks = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                           num_users, num_items, num_relations,
                           params.dim, params.num_layers, params.num_units,
                           flags, epoch, loss, params.ln_eps)]
    for _, arr in params._arrays():
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    if adam_state is not None:
        if adam_state.m.shape != (params.num_params,):
            raise CheckpointError("adam state does not match the flat parameter vector")
        chunks.append(_ADAM_HEADER.pack(adam_state.step, adam_state.beta1,
                                        adam_state.beta2, adam_state.eps))
        chunks.append(np.ascontiguousarray(adam_state.m, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(adam_state.v, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def _empty_params(num_nodes: int, dim: int, num_units: int, num_layers: int,
                  ln_eps: float) -> ModelParams:
    from .model import MemoryBank
    banks = tuple(MemoryBank.zeros(et, num_units, dim) for et in EdgeType)
    return ModelParams(np.zeros((num_nodes, dim)), banks,
                       np.zeros((num_layers, dim)), np.zeros((num_layers, dim)), ln_eps)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise CheckpointTruncatedError(f"{path}: {len(data)} bytes is shorter than the header")
    magic, version, n_users, n_items, n_rel, dim, layers, units, flags, epoch, loss, ln_eps = \
        _HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {version}")

    offset = _HEADER.size

    def take(count: int) -> np.ndarray:
        nonlocal offset
        nbytes = count * 8
        if offset + nbytes > len(data):
            raise CheckpointTruncatedError(f"{path}: truncated at byte {offset}")
        out = np.frombuffer(data, dtype="<f8", count=count, offset=offset).copy()
        offset += nbytes
        return out

    params = _empty_params(n_users + n_items + n_rel, dim, units, layers, ln_eps)
    for _, arr in params._arrays():
        arr[...] = take(arr.size).reshape(arr.shape)

    adam_state = None
    if flags & _FLAG_ADAM:
        if offset + _ADAM_HEADER.size > len(data):
            raise CheckpointTruncatedError(f"{path}: truncated in optimizer block")
        step, beta1, beta2, eps = _ADAM_HEADER.unpack_from(data, offset)
        offset += _ADAM_HEADER.size
        m = take(params.num_params)
        v = take(params.num_params)
        adam_state = de.AdamState(m, v, step, beta1, beta2, eps)
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return Checkpoint(params, adam_state, n_users, n_items, n_rel, epoch, loss)


# ---------------------------------------------------------------------------
# gradient verification of the full objective


@dataclass
class GradCheckCase:
    dim: int
    memory_units: int
    layers: int
    report: de.FiniteDiffReport
    group_errors: dict


@dataclass
class GradCheckResult:
    cases: list
    tol: float

    @property
    def max_rel_err(self) -> float:
        return max(c.report.max_rel_err for c in self.cases)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def worst_by_group(self) -> dict:
        worst: dict = {}
        for case in self.cases:
            for name, err in case.group_errors.items():
                worst[name] = max(worst.get(name, 0.0), err)
        return worst


def _random_instance(dim: int, num_units: int, num_layers: int, seed: int):
    from .hetgraph import build_graph
    rng = rng_for(seed, PARAM_INIT, dim, num_units, num_layers)
    n_users, n_items, n_rel = 5, 6, 3
    # Cover every node with at least one edge so no aggregation row is
    # exactly zero (zero rows sit on activation kinks, where central
    # differences are undefined).
    interactions = {(u, u % n_items) for u in range(n_users)}
    interactions.add((0, 5))
    for u in range(n_users):
        interactions.add((u, int(rng.integers(n_items))))
    social = {(0, 1), (1, 2), (3, 4), (2, 4)}
    item_rel = {(j, j % n_rel) for j in range(n_items)}
    for j in range(n_items):
        item_rel.add((j, int(rng.integers(n_rel))))
    graph = build_graph(sorted(interactions), sorted(social), sorted(item_rel),
                        n_users, n_items, n_rel)
    params = ModelParams.init(graph.num_nodes, dim, num_units, num_layers, rng)
    # Test at fan-scale keys (init keeps them small) so the attention path
    # is exercised away from zero, and with a soft normalization floor so
    # 1/sqrt(var+eps) cannot amplify perturbations past the kink margin.
    for bank in params.banks:
        bank.keys *= 20.0
    params.ln_eps = 1e-2
    users, pos, neg = sample_bpr_batch(graph, rng, 3)
    return graph, params, (users, pos, neg)


def _kink_margin(graph, params, variant) -> float:
    """Smallest |pre-activation| anywhere in the forward pass.

    Central differences are only meaningful where the objective is
    differentiable; instances whose activations sit on a leaky_relu kink
    are rejected and redrawn.
    """
    state = forward(graph, params, variant)
    margin = np.inf
    for step, cache in enumerate(state.step_caches):
        for pre in list(cache.att_pre.values()) + list(cache.self_pre.values()):
            if pre is not None and pre.size:
                margin = min(margin, float(np.min(np.abs(pre))))
        if variant.layer_norm:
            y = de.layer_normalize(cache.agg, params.ln_scale[step],
                                   params.ln_shift[step], params.ln_eps)
        else:
            y = cache.agg
        margin = min(margin, float(np.min(np.abs(y))))
    return margin


def check_model_gradients(dims=(2, 4, 8), memory_units=(1, 2, 4), layers=(0, 1, 2),
                          seed: int = 0, h: float = 1e-5, tol: float = 1e-4,
                          reg: float = 1e-3, variant: ModelVariant = FULL_VARIANT,
                          kink_margin: float = 1e-4) -> GradCheckResult:
    """Check analytical gradients of the batch objective on a (d, M, L) grid."""
    cases = []
    for dim in dims:
        for units in memory_units:
            for num_layers in layers:
                attempt = 0
                while True:
                    graph, params, triplets = _random_instance(
                        dim, units, num_layers, seed + 1000 * attempt)
                    if _kink_margin(graph, params, variant) >= kink_margin:
                        break
                    attempt += 1
                    if attempt > 100:
                        raise RuntimeError("could not draw a kink-free instance")
                cache = EdgeCache(graph)
                users, pos, neg = triplets
                _, grad = bpr_batch_grad(graph, params, users, pos, neg, reg, variant, cache)

                def objective(vec, _p=params, _g=graph, _c=cache, _t=triplets):
                    return bpr_batch_loss(_g, _p.with_vector(vec), _t[0], _t[1], _t[2],
                                          reg, variant, _c)

                vec = params.to_vector()
                numeric = np.empty_like(vec)
                work = vec.copy()
                for i in range(vec.size):
                    orig = work[i]
                    work[i] = orig + h
                    fp = objective(work)
                    work[i] = orig - h
                    fm = objective(work)
                    work[i] = orig
                    if not (np.isfinite(fp) and np.isfinite(fm)):
                        raise de.NonFiniteError(f"non-finite objective at coordinate {i}")
                    numeric[i] = (fp - fm) / (2.0 * h)
                denom = np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), 1e-5)
                err = np.abs(grad - numeric) / denom
                worst = int(np.argmax(err))
                report = de.FiniteDiffReport(float(err[worst]), worst, vec.size, tol)
                group_errors = {name: float(err[sl].max())
                                for name, sl in params.group_slices() if sl.stop > sl.start}
                cases.append(GradCheckCase(dim, units, num_layers, report, group_errors))
    return GradCheckResult(cases, tol)
