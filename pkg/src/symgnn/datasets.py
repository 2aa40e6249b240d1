"""Ready-made :class:`GraphData` bundles: ML-100K, planted synthetic data, a 2-node toy."""
from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from symgnn.graph_data import (GraphData, Network, PriorAssociation, build_data, load_movielens_100k,
                               read_split_file, split_ratings, triplets_to_prior, with_id_features)

DATA_ENV = "SYMGNN_DATA"


def data_root() -> Path:
    """Directory holding dataset folders; ``$SYMGNN_DATA`` or ``./data``."""
    return Path(os.environ.get(DATA_ENV, "data"))


def movielens_bundle(path=None, k: int = 10, split_seed: int = 0, test_fraction: float = 0.2,
                     val_fraction: float = 0.05, split_file=None, id_features: bool = True,
                     metric: str = "cosine") -> GraphData:
    """ML-100K with k-NN side graphs.

    Without ``split_file`` a random ``test_fraction`` of ratings is held out
    and ``val_fraction`` of the rest becomes the validation set.
    """
    path = data_root() / "ml-100k" if path is None else Path(path)
    users, items, prior = load_movielens_100k(path, k=k, metric=metric)
    if split_file is not None:
        test_pairs = read_split_file(split_file)
    else:
        held = split_ratings(prior, (1.0 - test_fraction, 0.0, test_fraction), seed=split_seed)
        test_pairs = np.argwhere(held.test_mask)
    split = split_ratings(prior, seed=split_seed, test_pairs=test_pairs, val_fraction=val_fraction)
    if id_features:
        users, items = with_id_features(users), with_id_features(items)
    return build_data(users, items, prior, split, name=f"ml-100k/k={k}")


def _sbm(rng, labels: np.ndarray, p_in: float, p_out: float) -> sp.csr_matrix:
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    upper = np.triu(rng.random(prob.shape) < prob, k=1)
    a = (upper | upper.T).astype(np.float64)
    return sp.csr_matrix(a)


def planted_rank2(n1: int = 200, n2: int = 150, density: float = 0.3, communities=(4, 3),
                  noise: float = 0.15, seed: int = 0, split_seed: int = 0,
                  fractions=(0.8, 0.1, 0.1)) -> GraphData:
    """Integer ratings in 1..5 from a rank-2 score matrix with community structure.

    Users and items get 2-d latent vectors near their community centre;
    side graphs are stochastic block models over the same communities and
    node features are identity columns.
    """
    rng = np.random.default_rng(seed)
    lu = rng.integers(0, communities[0], n1)
    li = rng.integers(0, communities[1], n2)
    angles_u = 2 * np.pi * np.arange(communities[0]) / communities[0]
    angles_i = 2 * np.pi * (np.arange(communities[1]) + 0.5) / communities[1]
    cu = np.column_stack([np.cos(angles_u), np.sin(angles_u)])
    ci = np.column_stack([np.cos(angles_i), np.sin(angles_i)])
    u = cu[lu] + noise * rng.standard_normal((n1, 2))
    v = ci[li] + noise * rng.standard_normal((n2, 2))
    scores = u @ v.T
    ratings = np.clip(np.rint(3.0 + 2.0 * scores / np.abs(scores).max()), 1, 5)
    observed = rng.random((n1, n2)) < density
    idx = np.argwhere(observed)
    prior = triplets_to_prior(((i, j, ratings[i, j]) for i, j in idx), n1, n2, (1, 2, 3, 4, 5))
    split = split_ratings(prior, fractions, seed=split_seed)
    users = Network(_sbm(rng, lu, 0.15, 0.005), np.eye(n1))
    items = Network(_sbm(rng, li, 0.15, 0.005), np.eye(n2))
    return build_data(users, items, prior, split, name="planted-rank2")


def toy_bundle() -> GraphData:
    """Two single-edge graphs with H = I; the alpha = 0.5 Sylvester solution is I."""
    a = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    prior = PriorAssociation(np.eye(2), np.eye(2), (1.0,))
    split = split_ratings(prior, (1.0, 0.0, 0.0))
    return build_data(Network(a, np.eye(2)), Network(a, np.eye(2)), prior, split, name="toy")


def toy_instance(n1: int = 4, n2: int = 5, seed: int = 0, d: int = 3, density: float = 0.6,
                 classes=(1.0, 2.0, 3.0)) -> GraphData:
    """Small random instance for gradient checks."""
    rng = np.random.default_rng(seed)

    def graph(n):
        upper = np.triu(rng.random((n, n)) < 0.5, k=1)
        return sp.csr_matrix((upper | upper.T).astype(np.float64))

    obs = rng.random((n1, n2)) < density
    obs[0, 0] = True
    h = np.where(obs, rng.choice(classes, size=(n1, n2)), 0.0)
    prior = PriorAssociation(h, obs, classes)
    split = split_ratings(prior, (1.0, 0.0, 0.0))
    users = Network(graph(n1), rng.standard_normal((n1, d)))
    items = Network(graph(n2), rng.standard_normal((n2, d)))
    return build_data(users, items, prior, split, name=f"toy-{n1}x{n2}")
