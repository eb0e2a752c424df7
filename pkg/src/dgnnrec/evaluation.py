"""Top-N evaluation, sparsity breakdown, ablations and attention export.

Each test user ranks their held-out positive against 100 fixed
negatives. Ties are broken by ascending item id so reports are
reproducible byte for byte. With a single relevant item per user,
HR@N counts positives ranked within the top N and NDCG@N credits
1/log2(rank+1) for a hit (ideal DCG is 1).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .hetgraph import HeteroGraph, Split, build_graph
from .model import (EdgeType, FULL_VARIANT, LayerState, MemoryBank,
                    ModelVariant, forward, recalibrated_users)
from .training import TrainingConfig, train_model

DEFAULT_CUTOFFS = (5, 10, 20)


class EvaluationError(ValueError):
    pass


@dataclass
class GroupMetrics:
    label: str
    user_count: int
    mean_train_interactions: float
    hr: dict
    ndcg: dict


@dataclass
class EvalReport:
    cutoffs: tuple
    tested_users: int
    hr: dict
    ndcg: dict
    groups: list


# ---------------------------------------------------------------------------
# ranking


def _candidate_ranks(q_users: np.ndarray, hstar: np.ndarray, num_users: int,
                     users: np.ndarray, positives: np.ndarray,
                     negatives: np.ndarray) -> np.ndarray:
    """1-based rank of each user's positive among positive + negatives."""
    cands = np.concatenate([positives[:, None], negatives], axis=1)
    if any(np.unique(row).size != row.size for row in cands):
        raise EvaluationError("duplicate candidate ids (positive overlaps negatives?)")
    scores = np.einsum("ud,ucd->uc", q_users[users], hstar[num_users + cands])
    pos_score = scores[:, 0][:, None]
    pos_id = cands[:, 0][:, None]
    better = (scores > pos_score) | ((scores == pos_score) & (cands < pos_id))
    return 1 + better[:, 1:].sum(axis=1)


def rank_and_score(u: int, positive: int, negatives, hstar: np.ndarray,
                   graph: HeteroGraph, n: int,
                   variant: ModelVariant = FULL_VARIANT):
    """(hit, ndcg contribution) for one user at cutoff n."""
    negatives = np.asarray(negatives, dtype=np.int64)
    if negatives.shape != (100,):
        raise EvaluationError(f"expected 100 negatives, got shape {negatives.shape}")
    q = recalibrated_users(hstar, graph, variant)
    rank = int(_candidate_ranks(q, hstar, graph.num_users,
                                np.asarray([u]), np.asarray([positive]),
                                negatives[None, :])[0])
    if rank <= n:
        return 1, 1.0 / math.log2(rank + 1)
    return 0, 0.0


def _metrics_at(ranks: np.ndarray, cutoffs) -> tuple[dict, dict]:
    hr, ndcg = {}, {}
    gains = 1.0 / np.log2(ranks + 1.0)
    for n in cutoffs:
        hit = ranks <= n
        hr[n] = float(hit.mean())
        ndcg[n] = float(np.where(hit, gains, 0.0).mean())
    return hr, ndcg


def _all_ranks(hstar: np.ndarray, split: Split, graph: HeteroGraph,
               variant: ModelVariant, threads: int = 1) -> np.ndarray:
    q = recalibrated_users(hstar, graph, variant)
    users, pos, neg = split.test_users, split.test_items, split.eval_negatives
    if threads <= 1 or users.size < 2 * threads:
        return _candidate_ranks(q, hstar, graph.num_users, users, pos, neg)
    chunks = np.array_split(np.arange(users.size), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(
            lambda idx: _candidate_ranks(q, hstar, graph.num_users,
                                         users[idx], pos[idx], neg[idx]),
            chunks))
    return np.concatenate(parts)


def evaluate(hstar: np.ndarray, split: Split, graph: HeteroGraph,
             cutoffs=DEFAULT_CUTOFFS, variant: ModelVariant = FULL_VARIANT,
             threads: int = 1) -> EvalReport:
    """Average rank_and_score over every test user; deterministic."""
    if split.test_users.size == 0:
        raise EvaluationError("empty test set")
    ranks = _all_ranks(hstar, split, graph, variant, threads)
    hr, ndcg = _metrics_at(ranks, cutoffs)
    groups = (_group_metrics(ranks, split, cutoffs)
              if split.test_users.size >= 4 else [])
    return EvalReport(tuple(cutoffs), int(split.test_users.size), hr, ndcg, groups)


# ---------------------------------------------------------------------------
# sparsity groups


def _group_metrics(ranks: np.ndarray, split: Split, cutoffs) -> list:
    counts = split.train_graph.ui.degrees()[split.test_users]
    order = np.lexsort((split.test_users, counts))  # ascending count, ties by user id
    groups = []
    for gi, idx in enumerate(np.array_split(order, 4)):
        hr, ndcg = _metrics_at(ranks[idx], cutoffs)
        groups.append(GroupMetrics(f"q{gi + 1}", int(idx.size),
                                   float(counts[idx].mean()), hr, ndcg))
    return groups


def sparsity_report(split: Split, graph: HeteroGraph, hstar: np.ndarray,
                    cutoffs=DEFAULT_CUTOFFS, variant: ModelVariant = FULL_VARIANT) -> list:
    """Quartile groups of test users by training-interaction count."""
    if split.test_users.size < 4:
        raise EvaluationError("need at least 4 test users for quartile groups")
    ranks = _all_ranks(hstar, split, graph, variant)
    return _group_metrics(ranks, split, cutoffs)


# ---------------------------------------------------------------------------
# ablations


class AblationVariant(Enum):
    FULL = "full"
    NO_MEMORY = "-M"
    NO_RECALIBRATION = "-tau"
    NO_LAYER_NORM = "-LN"
    NO_ITEM_RELATIONS = "-T"
    NO_SOCIAL = "-S"
    NO_SOCIAL_NO_RELATIONS = "-ST"

    @classmethod
    def parse(cls, token: str) -> "AblationVariant":
        norm = token.strip().lstrip("-").lower()
        table = {"full": cls.FULL, "m": cls.NO_MEMORY, "tau": cls.NO_RECALIBRATION,
                 "ln": cls.NO_LAYER_NORM, "t": cls.NO_ITEM_RELATIONS,
                 "s": cls.NO_SOCIAL, "st": cls.NO_SOCIAL_NO_RELATIONS}
        if norm not in table:
            raise EvaluationError(f"unknown ablation variant {token!r}; "
                                  f"expected one of {[v.value for v in cls]}")
        return table[norm]

    def model_variant(self) -> ModelVariant:
        return ModelVariant(
            memory_attention=self is not AblationVariant.NO_MEMORY,
            layer_norm=self is not AblationVariant.NO_LAYER_NORM,
            recalibration=self is not AblationVariant.NO_RECALIBRATION,
        )

    @property
    def drops_social(self) -> bool:
        return self in (AblationVariant.NO_SOCIAL, AblationVariant.NO_SOCIAL_NO_RELATIONS)

    @property
    def drops_relations(self) -> bool:
        return self in (AblationVariant.NO_ITEM_RELATIONS, AblationVariant.NO_SOCIAL_NO_RELATIONS)

    def adjust_config(self, config: TrainingConfig) -> TrainingConfig:
        if self is AblationVariant.NO_MEMORY:
            return replace(config, memory_units=1)
        return config


def strip_graph(graph: HeteroGraph, drop_social: bool, drop_relations: bool) -> HeteroGraph:
    """Rebuild with S and/or T removed; node counts are preserved."""
    if not drop_social and not drop_relations:
        return graph
    empty = np.empty((0, 2), dtype=np.int64)
    return build_graph(
        graph.interaction_pairs(),
        empty if drop_social else graph.social_pairs(),
        empty if drop_relations else graph.item_relation_pairs(),
        graph.num_users, graph.num_items, graph.num_relations)


def run_ablation(variant: AblationVariant, graph: HeteroGraph, split: Split,
                 config: TrainingConfig, cutoffs=DEFAULT_CUTOFFS,
                 threads: int = 1) -> EvalReport:
    """Train the variant from scratch on (possibly stripped) data and evaluate.

    -ST is by construction the Full model run on a graph built with empty
    social and item-relation inputs, with the identical seed and split.
    """
    train_graph = strip_graph(split.train_graph, variant.drops_social,
                              variant.drops_relations)
    eval_split = replace(split, train_graph=train_graph)
    model_variant = variant.model_variant()
    cfg = variant.adjust_config(config)
    params, _, _ = train_model(train_graph, cfg, model_variant)
    state = forward(train_graph, params, model_variant)
    return evaluate(state.hstar, eval_split, train_graph, cutoffs, model_variant, threads)


# ---------------------------------------------------------------------------
# attention export


def export_memory_attention(state: LayerState, graph: HeteroGraph, banks,
                            path, variant: ModelVariant = FULL_VARIANT) -> None:
    """Per user, the unit-attention vector under the social and item banks.

    Rows are `user_id<TAB>bank<TAB>eta_1,...,eta_M` with bank in {uu, ui};
    weights are taken at the last propagation layer. Raw numbers only.
    """
    top = state.layers[-1][:graph.num_users]
    lines = []
    for u in range(graph.num_users):
        for label, et in (("uu", EdgeType.UU), ("ui", EdgeType.UI)):
            bank: MemoryBank = banks[et]
            if variant.memory_attention:
                from .model import memory_attention
                eta = memory_attention(top[u], bank)
            else:
                eta = np.ones(bank.num_units)
            lines.append(f"{u}\t{label}\t" + ",".join(format(x, ".17g") for x in eta))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# report serialization


def report_lines(report: EvalReport) -> str:
    """Machine-readable `metric<TAB>N<TAB>group<TAB>value` lines."""
    rows = []
    for metric, table in (("hr", report.hr), ("ndcg", report.ndcg)):
        for n in report.cutoffs:
            rows.append(f"{metric}\t{n}\tall\t{table[n]:.10f}")
    for g in report.groups:
        for metric, table in (("hr", g.hr), ("ndcg", g.ndcg)):
            for n in report.cutoffs:
                rows.append(f"{metric}\t{n}\t{g.label}\t{table[n]:.10f}")
    return "\n".join(rows) + "\n"


def report_table(report: EvalReport) -> str:
    """Human-readable summary table."""
    out = [f"tested users: {report.tested_users}"]
    out.append("group     users  mean|Y|  " + "  ".join(
        f"HR@{n:<3d}   NDCG@{n:<3d}" for n in report.cutoffs))

    def row(label, count, mean_y, hr, ndcg):
        cells = "  ".join(f"{hr[n]:.4f}  {ndcg[n]:.4f} " for n in report.cutoffs)
        return f"{label:<8s} {count:>6d}  {mean_y:>7s}  {cells}"

    out.append(row("all", report.tested_users, "-", report.hr, report.ndcg))
    for g in report.groups:
        out.append(row(g.label, g.user_count, f"{g.mean_train_interactions:.2f}",
                       g.hr, g.ndcg))
    return "\n".join(out) + "\n"
