"""Collaborative heterogeneous graph over users, items and relation nodes.

The graph unifies three binary relations: user-item interactions,
user-user social ties (kept symmetric, no self-loops) and item to
meta-relation-node links. Adjacency is CSR with sorted, deduplicated
neighbor lists and is frozen after construction, so a built graph can be
shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .seeding import NEGATIVES, SPLIT, rng_for

EDGE_KINDS = ("interaction", "social", "item_relation")
NUM_EVAL_NEGATIVES = 100


class EdgeFileError(ValueError):
    """Malformed edge file; carries the 1-based offending line number."""

    def __init__(self, msg: str, line: int):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class GraphBuildError(ValueError):
    pass


class SplitError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# adjacency


@dataclass(frozen=True)
class Adjacency:
    """CSR adjacency for one edge direction; rows sorted and duplicate-free."""

    indptr: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        self.indptr.setflags(write=False)
        self.indices.setflags(write=False)

    @classmethod
    def from_pairs(cls, pairs: np.ndarray, num_rows: int) -> "Adjacency":
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if pairs.shape[0]:
            pairs = np.unique(pairs, axis=0)
        counts = np.bincount(pairs[:, 0], minlength=num_rows)
        indptr = np.zeros(num_rows + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return cls(indptr, pairs[:, 1].copy())

    @property
    def num_rows(self) -> int:
        return self.indptr.size - 1

    @property
    def num_edges(self) -> int:
        return self.indices.size

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def contains(self, i: int, j: int) -> bool:
        row = self.neighbors(i)
        k = np.searchsorted(row, j)
        return k < row.size and row[k] == j

    def pairs(self) -> np.ndarray:
        src = np.repeat(np.arange(self.num_rows, dtype=np.int64), self.degrees())
        return np.column_stack([src, self.indices])


def _reverse_pairs(pairs: np.ndarray) -> np.ndarray:
    return pairs[:, ::-1] if pairs.size else pairs.reshape(-1, 2)


# ---------------------------------------------------------------------------
# the graph


@dataclass(frozen=True)
class HeteroGraph:
    num_users: int
    num_items: int
    num_relations: int
    ui: Adjacency  # user -> items
    iu: Adjacency  # item -> users
    uu: Adjacency  # user -> users, symmetric
    ir: Adjacency  # item -> relation nodes
    ri: Adjacency  # relation node -> items

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items + self.num_relations

    @property
    def num_interactions(self) -> int:
        return self.ui.num_edges

    def interaction_pairs(self) -> np.ndarray:
        return self.ui.pairs()

    def social_pairs(self) -> np.ndarray:
        """Directed pairs; both orientations of every tie are present."""
        return self.uu.pairs()

    def item_relation_pairs(self) -> np.ndarray:
        return self.ir.pairs()

    def interaction_keys(self) -> np.ndarray:
        """Sorted u*J+item keys for O(log E) membership tests."""
        pairs = self.ui.pairs()
        return pairs[:, 0] * self.num_items + pairs[:, 1]

    def has_interaction(self, user: int, item: int) -> bool:
        return self.ui.contains(user, item)

    def validate(self) -> None:
        """Re-check every structural invariant; raises GraphBuildError."""
        for name, adj, n_src, n_dst in (
            ("ui", self.ui, self.num_users, self.num_items),
            ("iu", self.iu, self.num_items, self.num_users),
            ("uu", self.uu, self.num_users, self.num_users),
            ("ir", self.ir, self.num_items, self.num_relations),
            ("ri", self.ri, self.num_relations, self.num_items),
        ):
            if adj.num_rows != n_src:
                raise GraphBuildError(f"{name}: row count {adj.num_rows} != {n_src}")
            if adj.indices.size and (adj.indices.min() < 0 or adj.indices.max() >= n_dst):
                raise GraphBuildError(f"{name}: neighbor id out of range")
            for i in range(n_src):
                row = adj.neighbors(i)
                if row.size > 1 and np.any(np.diff(row) <= 0):
                    raise GraphBuildError(f"{name}: row {i} not strictly ascending")
        uu_pairs = self.uu.pairs()
        if uu_pairs.size and np.any(uu_pairs[:, 0] == uu_pairs[:, 1]):
            raise GraphBuildError("uu: self-loop present")
        for name, fwd, rev in (("ui/iu", self.ui, self.iu),
                               ("ir/ri", self.ir, self.ri),
                               ("uu/uu", self.uu, self.uu)):
            a = fwd.pairs()
            b = _reverse_pairs(rev.pairs())
            if a.shape != b.shape or (a.size and not np.array_equal(
                    a[np.lexsort((a[:, 1], a[:, 0]))], b[np.lexsort((b[:, 1], b[:, 0]))])):
                raise GraphBuildError(f"{name}: directions inconsistent")


# ---------------------------------------------------------------------------
# ingestion


def load_edge_file(path, kind: str) -> list[tuple[int, int]]:
    """Parse a `src<TAB>dst` edge file; '#' lines and blank lines ignored.

    Returns sorted, deduplicated pairs. Malformed lines and negative ids
    raise EdgeFileError with the offending line number.
    """
    if kind not in EDGE_KINDS:
        raise ValueError(f"unknown edge kind {kind!r}, expected one of {EDGE_KINDS}")
    edges = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise EdgeFileError(f"expected 'src<TAB>dst' in {kind} file, got {line!r}", lineno)
            try:
                src, dst = int(parts[0]), int(parts[1])
            except ValueError:
                raise EdgeFileError(f"non-integer id in {line!r}", lineno) from None
            if src < 0 or dst < 0:
                raise EdgeFileError(f"negative id in {line!r}", lineno)
            edges.add((src, dst))
    return sorted(edges)


def _check_range(pairs: np.ndarray, n_src: int, n_dst: int, label: str) -> None:
    if not pairs.size:
        return
    bad = (pairs[:, 0] < 0) | (pairs[:, 0] >= n_src) | (pairs[:, 1] < 0) | (pairs[:, 1] >= n_dst)
    if np.any(bad):
        u, v = pairs[np.flatnonzero(bad)[0]]
        raise GraphBuildError(f"{label} edge ({u}, {v}) out of range ({n_src} x {n_dst})")


def _as_pairs(edges) -> np.ndarray:
    arr = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
    return arr.reshape(-1, 2)


def build_graph(interactions, social, item_relations,
                num_users: int, num_items: int, num_relations: int) -> HeteroGraph:
    """Assemble the immutable graph; social ties are symmetrized here."""
    if min(num_users, num_items, num_relations) < 0:
        raise GraphBuildError("node counts must be non-negative")
    ui_pairs = _as_pairs(interactions)
    uu_pairs = _as_pairs(social)
    ir_pairs = _as_pairs(item_relations)
    _check_range(ui_pairs, num_users, num_items, "interaction")
    _check_range(uu_pairs, num_users, num_users, "social")
    _check_range(ir_pairs, num_items, num_relations, "item_relation")
    if uu_pairs.size and np.any(uu_pairs[:, 0] == uu_pairs[:, 1]):
        u = uu_pairs[np.flatnonzero(uu_pairs[:, 0] == uu_pairs[:, 1])[0], 0]
        raise GraphBuildError(f"social edge ({u}, {u}) is a self-loop")
    if uu_pairs.size:
        uu_pairs = np.vstack([uu_pairs, _reverse_pairs(uu_pairs)])
    return HeteroGraph(
        num_users=num_users, num_items=num_items, num_relations=num_relations,
        ui=Adjacency.from_pairs(ui_pairs, num_users),
        iu=Adjacency.from_pairs(_reverse_pairs(ui_pairs), num_items),
        uu=Adjacency.from_pairs(uu_pairs, num_users),
        ir=Adjacency.from_pairs(ir_pairs, num_items),
        ri=Adjacency.from_pairs(_reverse_pairs(ir_pairs), num_relations),
    )


# ---------------------------------------------------------------------------
# leave-one-out split


@dataclass(frozen=True)
class Split:
    """Train graph plus held-out positives and their fixed eval negatives."""

    train_graph: HeteroGraph
    test_users: np.ndarray       # (M,)
    test_items: np.ndarray       # (M,)
    eval_negatives: np.ndarray   # (M, NUM_EVAL_NEGATIVES)
    num_skipped: int
    seed: int

    def __post_init__(self):
        for a in (self.test_users, self.test_items, self.eval_negatives):
            a.setflags(write=False)

    @property
    def test_positives(self) -> list[tuple[int, int]]:
        return list(zip(self.test_users.tolist(), self.test_items.tolist()))


def split_leave_one_out(graph: HeteroGraph, seed: int,
                        num_negatives: int = NUM_EVAL_NEGATIVES) -> Split:
    """Hold out one uniformly chosen interaction per user with >= 2.

    Users with a single interaction stay train-only and are counted in
    ``num_skipped``. Negatives are drawn once per test user from items the
    user never interacted with (train or test) and are fixed thereafter.
    """
    deg = graph.ui.degrees()
    eligible = np.flatnonzero(deg >= 2)
    num_skipped = int(np.count_nonzero(deg == 1))
    if eligible.size == 0:
        raise SplitError("no user has >= 2 interactions; nothing to hold out")

    hold_rng = rng_for(seed, SPLIT)
    picks = np.floor(hold_rng.random(eligible.size) * deg[eligible]).astype(np.int64)
    held_pos = graph.ui.indptr[eligible] + picks
    held_items = graph.ui.indices[held_pos]

    keep = np.ones(graph.ui.num_edges, dtype=bool)
    keep[held_pos] = False
    all_pairs = graph.interaction_pairs()
    train_graph = replace(
        graph,
        ui=Adjacency.from_pairs(all_pairs[keep], graph.num_users),
        iu=Adjacency.from_pairs(_reverse_pairs(all_pairs[keep]), graph.num_items),
    )

    neg_rng = rng_for(seed, NEGATIVES)
    negatives = np.empty((eligible.size, num_negatives), dtype=np.int64)
    for row, u in enumerate(eligible):
        interacted = set(graph.ui.neighbors(u).tolist())
        if graph.num_items - len(interacted) < num_negatives:
            raise SplitError(
                f"user {u} interacted with {len(interacted)} of {graph.num_items} items; "
                f"cannot draw {num_negatives} negatives")
        seen = set(interacted)
        chosen: list[int] = []
        while len(chosen) < num_negatives:
            for cand in neg_rng.integers(0, graph.num_items, size=128).tolist():
                if cand not in seen:
                    seen.add(cand)
                    chosen.append(cand)
                    if len(chosen) == num_negatives:
                        break
        negatives[row] = chosen

    return Split(train_graph, eligible.astype(np.int64), held_items.astype(np.int64),
                 negatives, num_skipped, int(seed))


# ---------------------------------------------------------------------------
# split manifest (text, one test user per line)

_MANIFEST_HEADER = "# dgnnrec split manifest v1"


def save_split_manifest(split: Split, path) -> None:
    lines = [_MANIFEST_HEADER,
             f"seed\t{split.seed}",
             f"skipped\t{split.num_skipped}"]
    for u, item, negs in zip(split.test_users, split.test_items, split.eval_negatives):
        lines.append(f"{u}\t{item}\t{','.join(str(n) for n in negs)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_split_manifest(path, graph: HeteroGraph) -> Split:
    """Rebuild a Split against ``graph`` (the full, unsplit graph)."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    body = [ln for ln in text if ln and not ln.startswith("#")]
    try:
        meta = dict(ln.split("\t", 1) for ln in body[:2])
    except ValueError:
        raise SplitError(f"{path}: malformed header") from None
    if "seed" not in meta or "skipped" not in meta:
        raise SplitError(f"{path}: missing seed/skipped header lines")
    users, items, negs = [], [], []
    for ln in body[2:]:
        u, item, neg_csv = ln.split("\t")
        users.append(int(u))
        items.append(int(item))
        row = [int(x) for x in neg_csv.split(",")]
        if len(row) != NUM_EVAL_NEGATIVES:
            raise SplitError(f"{path}: user {u} has {len(row)} negatives, expected {NUM_EVAL_NEGATIVES}")
        negs.append(row)
    users_a = np.asarray(users, dtype=np.int64)
    items_a = np.asarray(items, dtype=np.int64)
    all_pairs = graph.interaction_pairs()
    held_keys = users_a * graph.num_items + items_a
    all_keys = all_pairs[:, 0] * graph.num_items + all_pairs[:, 1]
    keep = ~np.isin(all_keys, held_keys)
    train_graph = replace(
        graph,
        ui=Adjacency.from_pairs(all_pairs[keep], graph.num_users),
        iu=Adjacency.from_pairs(_reverse_pairs(all_pairs[keep]), graph.num_items),
    )
    return Split(train_graph, users_a, items_a,
                 np.asarray(negs, dtype=np.int64).reshape(len(users), NUM_EVAL_NEGATIVES),
                 int(meta["skipped"]), int(meta["seed"]))


# ---------------------------------------------------------------------------
# BPR triplet sampling


def _edge_user(graph: HeteroGraph, edge_index: int) -> int:
    return int(np.searchsorted(graph.ui.indptr, edge_index, side="right") - 1)


def sample_bpr_triplet(train_graph: HeteroGraph, rng: np.random.Generator,
                       max_item_tries: int = 100, max_edge_tries: int = 50):
    """Uniform observed edge (u, j+), negative j- by rejection.

    If a user turns out to interact with every sampled candidate the edge
    is resampled; after ``max_edge_tries`` edges a SamplingError is raised.
    """
    num_edges = train_graph.num_interactions
    if num_edges == 0:
        raise SamplingError("graph has no interactions to sample from")
    for _ in range(max_edge_tries):
        e = int(rng.integers(num_edges))
        u = _edge_user(train_graph, e)
        pos = int(train_graph.ui.indices[e])
        for _ in range(max_item_tries):
            cand = int(rng.integers(train_graph.num_items))
            if not train_graph.has_interaction(u, cand):
                return u, pos, cand
    raise SamplingError("exhausted retry budget; users appear to interact with all items")


def sample_bpr_batch(train_graph: HeteroGraph, rng: np.random.Generator, size: int,
                     max_rounds: int = 200):
    """Vectorized batch with the same per-triplet distribution as above."""
    num_edges = train_graph.num_interactions
    if num_edges == 0:
        raise SamplingError("graph has no interactions to sample from")
    keys = train_graph.interaction_keys()
    J = train_graph.num_items

    edges = rng.integers(0, num_edges, size=size)
    users = np.searchsorted(train_graph.ui.indptr, edges, side="right") - 1
    pos = train_graph.ui.indices[edges]
    neg = np.empty(size, dtype=np.int64)
    pending = np.arange(size)
    for round_no in range(max_rounds):
        cand = rng.integers(0, J, size=pending.size)
        key = users[pending] * J + cand
        loc = np.searchsorted(keys, key)
        observed = (loc < keys.size) & (keys[np.minimum(loc, keys.size - 1)] == key)
        neg[pending[~observed]] = cand[~observed]
        pending = pending[observed]
        if pending.size == 0:
            return users, pos, neg.copy()
        if round_no and round_no % 50 == 0:
            # Likely saturated users: resample their edges, as the scalar op does.
            edges_new = rng.integers(0, num_edges, size=pending.size)
            users[pending] = np.searchsorted(train_graph.ui.indptr, edges_new, side="right") - 1
            pos[pending] = train_graph.ui.indices[edges_new]
    raise SamplingError("exhausted retry budget; users appear to interact with all items")
