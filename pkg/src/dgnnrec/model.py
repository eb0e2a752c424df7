"""Memory-augmented heterogeneous message passing over the typed graph.

Node layout is one global embedding table: users first, then items, then
meta relation nodes. Each edge type (including the per-type self loops)
owns a memory bank of (transform, key, bias) units; a message on an edge
mixes the bank's transforms with attention conditioned on the *target*
node's embedding and applies the mixture to the *source* embedding:

    message(t <- s) = (sum_m eta_m(t) W_m) x_s,
    eta_m(t) = leaky_relu(<x_t, k_m> + b_m)

Attention weights are deliberately unnormalized (no softmax) and may be
negative. Per layer, each node averages incoming messages over the total
typed-neighbor count, is layer-normalized and activated, and adds a
self-loop message through its type's own bank. The final representation
layer-normalizes the concatenation of all per-layer embeddings.

``forward`` computes everything vectorized per edge type; ``backward``
walks the same schedule in reverse with analytical gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import diffengine as de
from .hetgraph import HeteroGraph

DEFAULT_LN_EPS = 1e-6


class EdgeType(IntEnum):
    """Fixed order: checkpoints and parameter vectors serialize banks this way."""

    UU = 0            # user <- user (social)
    UI = 1            # user <- item
    IU = 2            # item <- user
    IR = 3            # item <- relation node
    RI = 4            # relation node <- item
    SELF_USER = 5
    SELF_ITEM = 6
    SELF_RELATION = 7


MESSAGE_TYPES = (EdgeType.UU, EdgeType.UI, EdgeType.IU, EdgeType.IR, EdgeType.RI)
SELF_TYPES = (EdgeType.SELF_USER, EdgeType.SELF_ITEM, EdgeType.SELF_RELATION)


@dataclass(frozen=True)
class ModelVariant:
    """Structural switches used by the ablation harness.

    memory_attention=False forces eta=1 for every unit (use with M=1);
    layer_norm=False drops the per-layer normalization but keeps the
    activation and self loop; recalibration=False scores without the
    social-neighbor average.
    """

    memory_attention: bool = True
    layer_norm: bool = True
    recalibration: bool = True


FULL_VARIANT = ModelVariant()


@dataclass
class MemoryBank:
    edge_type: EdgeType
    transforms: np.ndarray  # (M, d, d)
    keys: np.ndarray        # (M, d)
    biases: np.ndarray      # (M,)

    @property
    def num_units(self) -> int:
        return self.transforms.shape[0]

    @property
    def dim(self) -> int:
        return self.transforms.shape[1]

    @classmethod
    def init(cls, edge_type: EdgeType, num_units: int, dim: int,
             rng: np.random.Generator) -> "MemoryBank":
        # Keys start two orders below fan scale: unit gates open near-neutral,
        # so early propagation is not modulated by random attention noise.
        a_w = np.sqrt(6.0 / (dim + dim))
        a_k = 0.05 * np.sqrt(6.0 / (dim + 1))
        return cls(edge_type,
                   rng.uniform(-a_w, a_w, size=(num_units, dim, dim)),
                   rng.uniform(-a_k, a_k, size=(num_units, dim)),
                   np.zeros(num_units))

    @classmethod
    def zeros(cls, edge_type: EdgeType, num_units: int, dim: int) -> "MemoryBank":
        return cls(edge_type, np.zeros((num_units, dim, dim)),
                   np.zeros((num_units, dim)), np.zeros(num_units))


@dataclass
class ModelParams:
    """All trainable state: layer-0 embeddings, 8 banks, per-layer LN affine."""

    embeddings: np.ndarray           # (I+J+R, d)
    banks: tuple                     # len 8, indexed by EdgeType
    ln_scale: np.ndarray             # (L, d), omega_1 per propagation layer
    ln_shift: np.ndarray             # (L, d), omega_2 per propagation layer
    ln_eps: float = DEFAULT_LN_EPS

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def num_nodes(self) -> int:
        return self.embeddings.shape[0]

    @property
    def num_layers(self) -> int:
        return self.ln_scale.shape[0]

    @property
    def num_units(self) -> int:
        return self.banks[0].num_units

    @classmethod
    def init(cls, num_nodes: int, dim: int, num_units: int, num_layers: int,
             rng: np.random.Generator, ln_eps: float = DEFAULT_LN_EPS) -> "ModelParams":
        # Draw order is part of the reproducibility contract:
        # embeddings, then banks in EdgeType order, then nothing (LN is 1/0).
        a_e = np.sqrt(6.0 / (dim + dim))
        emb = rng.uniform(-a_e, a_e, size=(num_nodes, dim))
        banks = tuple(MemoryBank.init(et, num_units, dim, rng) for et in EdgeType)
        return cls(emb, banks,
                   np.ones((num_layers, dim)), np.zeros((num_layers, dim)), ln_eps)

    def zeros_like(self) -> "ModelParams":
        return ModelParams(
            np.zeros_like(self.embeddings),
            tuple(MemoryBank.zeros(b.edge_type, b.num_units, b.dim) for b in self.banks),
            np.zeros_like(self.ln_scale), np.zeros_like(self.ln_shift), self.ln_eps)

    def _arrays(self):
        """(name, array) in canonical order; drives vectors and checkpoints."""
        yield "embeddings", self.embeddings
        for bank in self.banks:
            tag = bank.edge_type.name.lower()
            yield f"bank.{tag}.transforms", bank.transforms
            yield f"bank.{tag}.keys", bank.keys
            yield f"bank.{tag}.biases", bank.biases
        for layer in range(self.num_layers):
            yield f"ln.{layer}.scale", self.ln_scale[layer]
            yield f"ln.{layer}.shift", self.ln_shift[layer]

    def group_slices(self) -> list[tuple[str, slice]]:
        out, start = [], 0
        for name, arr in self._arrays():
            out.append((name, slice(start, start + arr.size)))
            start += arr.size
        return out

    @property
    def num_params(self) -> int:
        return sum(arr.size for _, arr in self._arrays())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for _, arr in self._arrays()])

    def with_vector(self, vec: np.ndarray) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.num_params,):
            raise de.ShapeError(f"parameter vector has {vec.size} entries, expected {self.num_params}")
        out = self.zeros_like()
        start = 0
        for _, arr in out._arrays():
            arr[...] = vec[start:start + arr.size].reshape(arr.shape)
            start += arr.size
        return out


# ---------------------------------------------------------------------------
# edge tensors derived from the graph (built once, reused across layers)


@dataclass
class _TypedEdges:
    tgt_offset: int
    src_offset: int
    n_tgt: int
    n_src: int
    tgt_indptr: np.ndarray  # CSR over targets (edges sorted by target)
    tgt_ids: np.ndarray     # (E,) local target per edge
    src_ids: np.ndarray     # (E,) local source per edge
    src_order: np.ndarray   # permutation sorting edges by source
    src_indptr: np.ndarray  # CSR over sources after that permutation

    @property
    def num_edges(self) -> int:
        return self.src_ids.size


def _typed_edges(adj, tgt_offset, src_offset, n_tgt, n_src) -> _TypedEdges:
    tgt_ids = np.repeat(np.arange(n_tgt, dtype=np.int64), adj.degrees())
    src_ids = adj.indices.astype(np.int64, copy=True)
    order = np.argsort(src_ids, kind="stable")
    src_indptr = np.zeros(n_src + 1, dtype=np.int64)
    np.cumsum(np.bincount(src_ids, minlength=n_src), out=src_indptr[1:])
    return _TypedEdges(tgt_offset, src_offset, n_tgt, n_src,
                       adj.indptr.astype(np.int64, copy=True), tgt_ids, src_ids,
                       order, src_indptr)


class EdgeCache:
    """Per-edge-type index arrays plus aggregation denominators."""

    def __init__(self, graph: HeteroGraph):
        I, J, R = graph.num_users, graph.num_items, graph.num_relations
        self.num_users, self.num_items, self.num_relations = I, J, R
        self.slices = {
            EdgeType.SELF_USER: slice(0, I),
            EdgeType.SELF_ITEM: slice(I, I + J),
            EdgeType.SELF_RELATION: slice(I + J, I + J + R),
        }
        self.edges = {
            EdgeType.UU: _typed_edges(graph.uu, 0, 0, I, I),
            EdgeType.UI: _typed_edges(graph.ui, 0, I, I, J),
            EdgeType.IU: _typed_edges(graph.iu, I, 0, J, I),
            EdgeType.IR: _typed_edges(graph.ir, I, I + J, J, R),
            EdgeType.RI: _typed_edges(graph.ri, I + J, I, R, J),
        }
        denom = np.zeros(I + J + R)
        denom[0:I] = graph.uu.degrees() + graph.ui.degrees()
        denom[I:I + J] = graph.iu.degrees() + graph.ir.degrees()
        denom[I + J:] = graph.ri.degrees()
        self.node_denom = denom


def _segment_sum(values: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    """Row sums of CSR-ordered per-edge values; empty rows give zeros."""
    out = np.zeros((indptr.size - 1, values.shape[1]))
    nz = np.flatnonzero(np.diff(indptr) > 0)
    if nz.size:
        out[nz] = np.add.reduceat(values, indptr[nz], axis=0)
    return out


# ---------------------------------------------------------------------------
# single-node operations (reference API; the batched path lives in layer_step)


def memory_attention(target_emb: np.ndarray, bank: MemoryBank) -> np.ndarray:
    """Unnormalized unit weights eta_m = leaky_relu(<x_t, k_m> + b_m)."""
    target_emb = np.asarray(target_emb, dtype=np.float64)
    if target_emb.shape != (bank.dim,):
        raise de.ShapeError(f"target embedding shape {target_emb.shape} != ({bank.dim},)")
    return de.leaky_relu(bank.keys @ target_emb + bank.biases)


def encode_message(target_emb: np.ndarray, source_emb: np.ndarray,
                   bank: MemoryBank, variant: ModelVariant = FULL_VARIANT) -> np.ndarray:
    """(sum_m eta_m(target) W_m) @ source; attention on target, transform on source."""
    source_emb = np.asarray(source_emb, dtype=np.float64)
    if variant.memory_attention:
        eta = memory_attention(target_emb, bank)
    else:
        eta = np.ones(bank.num_units)
    mixed = np.tensordot(eta, bank.transforms, axes=1)
    return mixed @ source_emb


def _mean_messages(target: int, emb: np.ndarray, neighborhoods, variant) -> np.ndarray:
    total = np.zeros(emb.shape[1])
    count = 0
    for bank, offset, neighbors in neighborhoods:
        for nb in neighbors:
            total += encode_message(emb[target], emb[offset + int(nb)], bank, variant)
            count += 1
    # Isolated nodes aggregate to zero; the self loop keeps them alive.
    return total / count if count else total


def aggregate_user(u: int, emb: np.ndarray, graph: HeteroGraph, banks,
                   variant: ModelVariant = FULL_VARIANT) -> np.ndarray:
    """Mean of social and item messages, denominator |N_S(u)| + |N_Y(u)|."""
    return _mean_messages(u, emb, [
        (banks[EdgeType.UU], 0, graph.uu.neighbors(u)),
        (banks[EdgeType.UI], graph.num_users, graph.ui.neighbors(u)),
    ], variant)


def aggregate_item(v: int, emb: np.ndarray, graph: HeteroGraph, banks,
                   variant: ModelVariant = FULL_VARIANT) -> np.ndarray:
    """Mean of user and relation-node messages, denominator |N_Y(v)| + |N_T(v)|."""
    return _mean_messages(graph.num_users + v, emb, [
        (banks[EdgeType.IU], 0, graph.iu.neighbors(v)),
        (banks[EdgeType.IR], graph.num_users + graph.num_items, graph.ir.neighbors(v)),
    ], variant)


def aggregate_relation(r: int, emb: np.ndarray, graph: HeteroGraph, banks,
                       variant: ModelVariant = FULL_VARIANT) -> np.ndarray:
    """Mean of connected-item messages."""
    return _mean_messages(graph.num_users + graph.num_items + r, emb, [
        (banks[EdgeType.RI], graph.num_users, graph.ri.neighbors(r)),
    ], variant)


# ---------------------------------------------------------------------------
# vectorized layer


@dataclass
class _StepCache:
    agg: np.ndarray                     # post-division aggregation (LN input)
    att_pre: dict                       # EdgeType -> (n_tgt, M) pre-activations
    self_pre: dict                      # EdgeType -> (n_type, M)


def _batch_attention(rows: np.ndarray, bank: MemoryBank, variant: ModelVariant):
    if not variant.memory_attention:
        return np.ones((rows.shape[0], bank.num_units)), None
    pre = rows @ bank.keys.T + bank.biases
    return de.leaky_relu(pre), pre


def _batch_transformed(rows: np.ndarray, bank: MemoryBank) -> np.ndarray:
    # (M, n, d): transformed source embeddings per unit.
    return np.stack([rows @ bank.transforms[m].T for m in range(bank.num_units)])


def layer_step(emb: np.ndarray, graph: HeteroGraph, params: ModelParams, step: int,
               variant: ModelVariant = FULL_VARIANT, edge_cache: EdgeCache | None = None,
               _record: list | None = None) -> np.ndarray:
    """One propagation layer: aggregate, normalize, activate, add self loop."""
    cache = edge_cache if edge_cache is not None else EdgeCache(graph)
    agg = np.zeros_like(emb)
    att_pre: dict = {}
    for et in MESSAGE_TYPES:
        te = cache.edges[et]
        if te.num_edges == 0:
            continue
        bank = params.banks[et]
        tgt_rows = emb[te.tgt_offset:te.tgt_offset + te.n_tgt]
        src_rows = emb[te.src_offset:te.src_offset + te.n_src]
        att, pre = _batch_attention(tgt_rows, bank, variant)
        att_pre[et] = pre
        trans = _batch_transformed(src_rows, bank)
        att_e = att[te.tgt_ids]
        msg = np.zeros((te.num_edges, emb.shape[1]))
        for m in range(bank.num_units):
            msg += att_e[:, m, None] * trans[m][te.src_ids]
        agg[te.tgt_offset:te.tgt_offset + te.n_tgt] += _segment_sum(msg, te.tgt_indptr)
    denom = cache.node_denom[:, None]
    np.divide(agg, denom, out=agg, where=denom > 0)

    if variant.layer_norm:
        y = de.layer_normalize(agg, params.ln_scale[step], params.ln_shift[step], params.ln_eps)
    else:
        y = agg
    out = de.leaky_relu(y)

    self_pre: dict = {}
    for et in SELF_TYPES:
        sl = cache.slices[et]
        rows = emb[sl]
        if rows.shape[0] == 0:
            continue
        bank = params.banks[et]
        att, pre = _batch_attention(rows, bank, variant)
        self_pre[et] = pre
        trans = _batch_transformed(rows, bank)
        for m in range(bank.num_units):
            out[sl] += att[:, m, None] * trans[m]
    if _record is not None:
        _record.append(_StepCache(agg, att_pre, self_pre))
    return out


@dataclass
class LayerState:
    """Per-layer embeddings H^(0)..H^(L) and the normalized concatenation H*."""

    layers: list[np.ndarray]
    hstar: np.ndarray
    final_inv_std: np.ndarray = field(repr=False, default=None)
    step_caches: list = field(repr=False, default_factory=list)

    @property
    def num_layers(self) -> int:
        return len(self.layers) - 1


def final_embeddings(layers, eps: float = DEFAULT_LN_EPS):
    """Layer-normalize the per-node concatenation (fixed scale 1, shift 0)."""
    conc = layers[0] if len(layers) == 1 else np.concatenate(layers, axis=1)
    mu = conc.mean(axis=1, keepdims=True)
    var = conc.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return (conc - mu) * inv, inv


def forward(graph: HeteroGraph, params: ModelParams,
            variant: ModelVariant = FULL_VARIANT,
            edge_cache: EdgeCache | None = None) -> LayerState:
    """Run all propagation layers from the initial embeddings, then H*."""
    if params.num_nodes != graph.num_nodes:
        raise de.ShapeError(
            f"params cover {params.num_nodes} nodes but graph has {graph.num_nodes}")
    cache = edge_cache if edge_cache is not None else EdgeCache(graph)
    records: list = []
    layers = [params.embeddings]
    for step in range(params.num_layers):
        layers.append(layer_step(layers[-1], graph, params, step, variant, cache, records))
    hstar, inv = final_embeddings(layers, params.ln_eps)
    return LayerState(layers, hstar, inv, records)


# ---------------------------------------------------------------------------
# scoring


def recalibrate(u: int, hstar: np.ndarray, graph: HeteroGraph) -> np.ndarray:
    """Social average (sum of neighbor rows + own row) / (deg + 1)."""
    neighbors = graph.uu.neighbors(u)
    total = hstar[u].copy()
    for nb in neighbors:
        total += hstar[int(nb)]
    return total / (neighbors.size + 1)


def recalibrated_users(hstar: np.ndarray, graph: HeteroGraph,
                       variant: ModelVariant = FULL_VARIANT,
                       edge_cache: EdgeCache | None = None) -> np.ndarray:
    """Per-user scoring vector q_u = H*[u] + tau(H*[u]) for all users at once."""
    users = hstar[:graph.num_users]
    if not variant.recalibration:
        return users.copy()
    te = (edge_cache.edges[EdgeType.UU] if edge_cache is not None
          else EdgeCache(graph).edges[EdgeType.UU])
    neigh = _segment_sum(users[te.src_ids], te.tgt_indptr)
    deg = graph.uu.degrees()[:, None]
    return users + (neigh + users) / (deg + 1.0)


def predict(u: int, v: int, hstar: np.ndarray, graph: HeteroGraph,
            variant: ModelVariant = FULL_VARIANT) -> float:
    """Preference score xi(u, v); v is a type-local item id."""
    item_row = hstar[graph.num_users + v]
    if variant.recalibration:
        q = hstar[u] + recalibrate(u, hstar, graph)
    else:
        q = hstar[u]
    return float(q @ item_row)


# ---------------------------------------------------------------------------
# backward


def _scatter_to_source(values: np.ndarray, te: _TypedEdges) -> np.ndarray:
    return _segment_sum(values[te.src_order], te.src_indptr)


def _step_backward(d_out: np.ndarray, emb: np.ndarray, scache: _StepCache,
                   params: ModelParams, step: int, variant: ModelVariant,
                   cache: EdgeCache, grads: ModelParams) -> np.ndarray:
    """Backward of one layer_step; returns gradient w.r.t. the layer input."""
    d_emb = np.zeros_like(emb)

    # Self-loop path.
    for et in SELF_TYPES:
        sl = cache.slices[et]
        rows = emb[sl]
        if rows.shape[0] == 0:
            continue
        bank, gbank = params.banks[et], grads.banks[et]
        g = d_out[sl]
        pre = scache.self_pre.get(et)
        att = de.leaky_relu(pre) if pre is not None else np.ones((rows.shape[0], bank.num_units))
        trans = _batch_transformed(rows, bank)
        d_att = np.empty_like(att)
        for m in range(bank.num_units):
            d_att[:, m] = np.einsum("nd,nd->n", g, trans[m])
            d_trans_rows = att[:, m, None] * g
            gbank.transforms[m] += d_trans_rows.T @ rows
            d_emb[sl] += d_trans_rows @ bank.transforms[m]
        if pre is not None:
            d_pre = d_att * de.leaky_relu_grad(pre)
            gbank.keys += d_pre.T @ rows
            gbank.biases += d_pre.sum(axis=0)
            d_emb[sl] += d_pre @ bank.keys

    # Activation and normalization path.
    if variant.layer_norm:
        y = de.layer_normalize(scache.agg, params.ln_scale[step], params.ln_shift[step],
                               params.ln_eps)
        d_y = d_out * de.leaky_relu_grad(y)
        d_agg, d_scale, d_shift = de.layer_normalize_backward(
            scache.agg, params.ln_scale[step], params.ln_eps, d_y)
        grads.ln_scale[step] += d_scale
        grads.ln_shift[step] += d_shift
    else:
        d_agg = d_out * de.leaky_relu_grad(scache.agg)

    denom = cache.node_denom[:, None]
    d_msum = np.zeros_like(d_agg)
    np.divide(d_agg, denom, out=d_msum, where=denom > 0)

    # Message path per edge type.
    for et in MESSAGE_TYPES:
        te = cache.edges[et]
        if te.num_edges == 0:
            continue
        bank, gbank = params.banks[et], grads.banks[et]
        tgt_rows = emb[te.tgt_offset:te.tgt_offset + te.n_tgt]
        src_rows = emb[te.src_offset:te.src_offset + te.n_src]
        pre = scache.att_pre.get(et)
        att = (de.leaky_relu(pre) if pre is not None
               else np.ones((te.n_tgt, bank.num_units)))
        trans = _batch_transformed(src_rows, bank)
        d_msg = d_msum[te.tgt_offset:te.tgt_offset + te.n_tgt][te.tgt_ids]
        att_e = att[te.tgt_ids]
        d_att_e = np.empty((te.num_edges, bank.num_units))
        for m in range(bank.num_units):
            d_att_e[:, m] = np.einsum("ed,ed->e", d_msg, trans[m][te.src_ids])
            d_trans_src = _scatter_to_source(att_e[:, m, None] * d_msg, te)
            gbank.transforms[m] += d_trans_src.T @ src_rows
            d_emb[te.src_offset:te.src_offset + te.n_src] += d_trans_src @ bank.transforms[m]
        if pre is not None:
            d_att = _segment_sum(d_att_e, te.tgt_indptr)
            d_pre = d_att * de.leaky_relu_grad(pre)
            gbank.keys += d_pre.T @ tgt_rows
            gbank.biases += d_pre.sum(axis=0)
            d_emb[te.tgt_offset:te.tgt_offset + te.n_tgt] += d_pre @ bank.keys
    return d_emb


def backward(graph: HeteroGraph, params: ModelParams, state: LayerState,
             d_hstar: np.ndarray, variant: ModelVariant = FULL_VARIANT,
             edge_cache: EdgeCache | None = None) -> ModelParams:
    """Gradients of a scalar loss w.r.t. every parameter, given dL/dH*."""
    cache = edge_cache if edge_cache is not None else EdgeCache(graph)
    grads = params.zeros_like()
    num_layers = state.num_layers
    d = params.dim

    # Final normalization backward; H* itself is the normalized vector.
    g = np.asarray(d_hstar, dtype=np.float64)
    inv = state.final_inv_std
    d_conc = inv * (g - g.mean(axis=1, keepdims=True)
                    - state.hstar * (g * state.hstar).mean(axis=1, keepdims=True))
    d_layers = [d_conc[:, l * d:(l + 1) * d].copy() for l in range(num_layers + 1)]

    for step in reversed(range(num_layers)):
        d_layers[step] += _step_backward(
            d_layers[step + 1], state.layers[step], state.step_caches[step],
            params, step, variant, cache, grads)
    grads.embeddings += d_layers[0]
    return grads
