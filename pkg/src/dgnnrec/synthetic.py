"""Synthetic worlds: planted multi-order factor preferences, random graphs.

The planted generator draws 5-dimensional latent factor vectors and
scores each user-item pair with a spectrum of factor interactions:
a first-order term, a second-order term (two user aspect vectors
modulating each other on the item factors) and a third-order term, plus
per-item popularity. The higher-order terms give the preference matrix
an effective rank well above the model's embedding width, so ranking
quality depends on what message passing can reconstruct, not just on
per-node free embeddings. Social ties connect users with similar factor
aspects and relation nodes group items by factor prototypes, so both
auxiliary structures carry real signal about the interaction process.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hetgraph import HeteroGraph, build_graph
from .seeding import DATASET, rng_for


@dataclass(frozen=True)
class PlantedDataset:
    interactions: np.ndarray     # (E, 2) user, item
    social: np.ndarray           # (E, 2) undirected pairs, one orientation
    item_relations: np.ndarray   # (E, 2) item, relation node
    num_users: int
    num_items: int
    num_relations: int

    def build(self) -> HeteroGraph:
        return build_graph(self.interactions, self.social, self.item_relations,
                           self.num_users, self.num_items, self.num_relations)


def make_planted_dataset(num_users: int = 200, num_items: int = 500,
                         num_relations: int = 20, num_factors: int = 5,
                         seed: int = 0, interactions_per_user: int = 30,
                         social_degree: int = 6, relations_per_item: int = 2,
                         choice_noise: float = 0.3,
                         order_weights: tuple = (0.35, 0.5, 0.9),
                         popularity_weight: float = 0.3) -> PlantedDataset:
    rng = rng_for(seed, DATASET)
    f = num_factors
    aspect1 = rng.normal(size=(num_users, f))
    aspect2 = rng.normal(size=(num_users, f))
    aspect3 = rng.normal(size=(num_users, f))
    item_f = rng.normal(size=(num_items, f))
    popularity = rng.normal(size=num_items)

    w1, w2, w3 = order_weights
    s1 = aspect1 @ item_f.T
    s2 = aspect2 @ item_f.T
    s3 = aspect3 @ item_f.T
    affinity = (w3 * s1 * s2 * s3 / f
                + w2 * s1 * s2 / np.sqrt(f)
                + w1 * s1
                + popularity_weight * popularity)

    noisy = affinity + choice_noise * rng.gumbel(size=affinity.shape)
    interactions = set()
    for u in range(num_users):
        top = np.argpartition(-noisy[u], interactions_per_user)[:interactions_per_user]
        interactions.update((u, int(v)) for v in top)

    # Social ties to the most factor-similar users; symmetrized at build time.
    user_f = np.concatenate([aspect1, aspect2, aspect3], axis=1)
    sim = user_f @ user_f.T
    np.fill_diagonal(sim, -np.inf)
    social = set()
    for u in range(num_users):
        for v in np.argpartition(-sim[u], social_degree)[:social_degree]:
            social.add((min(u, int(v)), max(u, int(v))))

    prototypes = rng.normal(size=(num_relations, f))
    closeness = item_f @ prototypes.T
    item_relations = set()
    for j in range(num_items):
        for r in np.argpartition(-closeness[j], relations_per_item)[:relations_per_item]:
            item_relations.add((j, int(r)))

    return PlantedDataset(
        np.asarray(sorted(interactions), dtype=np.int64),
        np.asarray(sorted(social), dtype=np.int64),
        np.asarray(sorted(item_relations), dtype=np.int64),
        num_users, num_items, num_relations)


def make_random_graph(num_users: int, num_items: int, num_relations: int,
                      num_interactions: int, num_social: int, num_item_relations: int,
                      seed: int = 0) -> HeteroGraph:
    """Uniform random graph; duplicate draws collapse, so counts are upper bounds."""
    rng = rng_for(seed, DATASET, num_users, num_items, num_relations)
    ui = np.column_stack([rng.integers(0, num_users, num_interactions),
                          rng.integers(0, num_items, num_interactions)])
    uu = np.column_stack([rng.integers(0, num_users, num_social),
                          rng.integers(0, num_users, num_social)])
    uu = uu[uu[:, 0] != uu[:, 1]]
    ir = np.column_stack([rng.integers(0, num_items, num_item_relations),
                          rng.integers(0, num_relations, num_item_relations)])
    return build_graph(ui, uu, ir, num_users, num_items, num_relations)
