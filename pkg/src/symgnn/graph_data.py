"""Input networks, prior rating matrices and train/val/test splits."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

Matrix = Union[np.ndarray, sp.spmatrix]

ML100K_USERS = 943
ML100K_ITEMS = 1682
ML100K_RATINGS = 100000
ML100K_CLASSES = (1.0, 2.0, 3.0, 4.0, 5.0)
ML100K_GENRES = 19
AGE_BUCKETS = (18, 25, 35, 45, 50, 56)


class GraphValidationError(ValueError):
    pass


class DataFormatError(ValueError):
    """A line of an input file could not be parsed."""


class DataIntegrityError(ValueError):
    """Parsed data violates a count, range or class constraint."""


def _to_csr(a) -> sp.csr_matrix:
    return sp.csr_matrix(a, dtype=np.float64)


@dataclass(frozen=True)
class Network:
    """One input graph: sparse adjacency plus node features.

    ``identity=True`` marks the missing-network fallback; its normalized
    adjacency is the identity matrix itself.
    """

    adjacency: sp.csr_matrix
    features: Matrix
    identity: bool = False

    def __post_init__(self):
        adj = _to_csr(self.adjacency)
        adj.sum_duplicates()
        object.__setattr__(self, "adjacency", adj)
        n = adj.shape[0]
        if adj.shape != (n, n):
            raise GraphValidationError(f"adjacency must be square, got {adj.shape}")
        if adj.nnz and adj.data.min() < 0:
            raise GraphValidationError("adjacency has negative entries")
        diff = abs(adj - adj.T).tocoo()
        bad = diff.data > 1e-12
        if bad.any():
            pairs = sorted(zip(diff.row[bad].tolist(), diff.col[bad].tolist()))
            i, j = pairs[0]
            raise GraphValidationError(
                f"adjacency is not symmetric: A[{i},{j}]={adj[i, j]} but A[{j},{i}]={adj[j, i]}")
        if adj.diagonal().any():
            i = int(np.flatnonzero(adj.diagonal())[0])
            raise GraphValidationError(f"adjacency diagonal must be zero (node {i} has a self-loop)")
        if self.features.shape[0] != n:
            raise GraphValidationError(f"features have {self.features.shape[0]} rows for {n} nodes")

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class NormalizedNetwork:
    norm_adjacency: sp.csr_matrix
    degree: np.ndarray
    features: Matrix

    @property
    def n(self) -> int:
        return self.norm_adjacency.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


def symmetric_normalize(net: Network) -> NormalizedNetwork:
    """``D^-1/2 A D^-1/2``; isolated nodes keep all-zero rows and columns."""
    if net.identity:
        n = net.n
        return NormalizedNetwork(sp.identity(n, format="csr", dtype=np.float64), np.ones(n), net.features)
    deg = np.asarray(net.adjacency.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    d = sp.diags(inv_sqrt)
    norm = (d @ net.adjacency @ d).tocsr()
    return NormalizedNetwork(norm, deg, net.features)


def spectral_radius(a: Matrix, iters: int = 1000, tol: float = 1e-12, seed: int = 0) -> float:
    """Power-iteration estimate of the largest absolute eigenvalue of a symmetric matrix.

    Iterates on ``a @ a`` so that +/- eigenvalue pairs (bipartite graphs) do not
    stall convergence.
    """
    n = a.shape[0]
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = a @ (a @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new = np.sqrt(norm)
        if abs(new - est) <= tol * max(1.0, new):
            return float(new)
        est = new
    return float(est)


def _pairwise_distances(x: np.ndarray, metric: str) -> np.ndarray:
    if metric == "euclidean":
        sq = np.sum(x * x, axis=1)
        dist = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
        np.maximum(dist, 0.0, out=dist)
        return dist
    if metric == "cosine":
        norms = np.linalg.norm(x, axis=1)
        safe = np.where(norms > 0, norms, 1.0)
        unit = x / safe[:, None]
        return 1.0 - unit @ unit.T
    raise ValueError(f"unknown metric {metric!r}; expected 'euclidean' or 'cosine'")


def knn_graph(features: Matrix, k: int, metric: str = "euclidean") -> Network:
    """Unweighted k-NN graph symmetrized with the union rule.

    Ties (including duplicate points) go to the lower node index.
    """
    x = features.toarray() if sp.issparse(features) else np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < n, got k={k}, n={n}")
    if not np.isfinite(x).all():
        raise ValueError("features must be finite")
    dist = _pairwise_distances(x, metric)
    np.fill_diagonal(dist, np.inf)
    # stable sort keeps index order among equal distances
    nbrs = np.argsort(dist, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(n), k)
    a = sp.coo_matrix((np.ones(n * k), (rows, nbrs.ravel())), shape=(n, n)).tocsr()
    a = a.maximum(a.T)
    a.data[:] = 1.0
    return Network(a, features)


def identity_features(n: int, d: int) -> np.ndarray:
    return np.eye(n, d)


def identity_network(n: int, d: Optional[int] = None) -> Network:
    """Stand-in for a missing network: no edges, normalized adjacency = I."""
    if n < 1:
        raise ValueError("n must be positive")
    return Network(sp.csr_matrix((n, n)), identity_features(n, n if d is None else d), identity=True)


# ---------------------------------------------------------------------------
# ratings


@dataclass(frozen=True)
class PriorAssociation:
    h: np.ndarray
    mask: np.ndarray
    classes: Tuple[float, ...]

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.float64)
        mask = np.asarray(self.mask).astype(np.uint8)
        classes = tuple(float(c) for c in self.classes)
        if h.shape != mask.shape:
            raise DataIntegrityError(f"h shape {h.shape} != mask shape {mask.shape}")
        if len(set(classes)) != len(classes) or list(classes) != sorted(classes):
            raise DataIntegrityError(f"classes must be distinct and increasing, got {classes}")
        if np.any((h != 0) & (mask == 0)):
            raise DataIntegrityError("h has nonzero entries outside the observation mask")
        obs = h[mask == 1]
        if obs.size and not np.isin(obs, classes).all():
            bad = obs[~np.isin(obs, classes)][0]
            raise DataIntegrityError(f"observed rating {bad} is not one of {classes}")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "classes", classes)

    @property
    def shape(self):
        return self.h.shape

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    @property
    def density(self) -> float:
        return self.n_observed / float(self.h.size)

    def class_indicators(self, mask: Optional[np.ndarray] = None) -> list:
        """One 0/1 matrix per rating class, restricted to ``mask`` (default: all observed)."""
        m = self.mask if mask is None else mask
        return [((self.h == c) & (m == 1)).astype(np.float64) for c in self.classes]


def triplets_to_prior(triplets: Iterable[Sequence], n1: int, n2: int,
                      classes: Sequence[float]) -> PriorAssociation:
    classes = tuple(float(c) for c in classes)
    h = np.zeros((n1, n2))
    mask = np.zeros((n1, n2), dtype=np.uint8)
    for i, j, r in triplets:
        i, j, r = int(i), int(j), float(r)
        if not (0 <= i < n1 and 0 <= j < n2):
            raise DataIntegrityError(f"index ({i}, {j}) out of range for a {n1}x{n2} matrix")
        if r not in classes:
            raise DataIntegrityError(f"rating {r} at ({i}, {j}) is not one of {classes}")
        if mask[i, j]:
            warnings.warn(f"duplicate entry ({i}, {j}); keeping the last rating {r}")
        h[i, j] = r
        mask[i, j] = 1
    return PriorAssociation(h, mask, classes)


def load_triplets(path, n1: int, n2: int, classes: Sequence[float]) -> PriorAssociation:
    """Read a ``row,col,rating`` CSV with 0-based indices."""
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["row", "col", "rating"]:
            raise DataFormatError(f"{path}: expected header 'row,col,rating', got {header}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                i, j, r = int(rec[0]), int(rec[1]), float(rec[2])
            except (ValueError, IndexError) as exc:
                raise DataFormatError(f"{path}:{lineno}: cannot parse {rec!r}") from exc
            rows.append((i, j, r))
    return triplets_to_prior(rows, n1, n2, classes)


def save_triplets(path, matrix: np.ndarray, mask: Optional[np.ndarray] = None):
    """Write ``matrix`` entries (all, or those where ``mask`` is set) as ``row,col,rating``."""
    idx = np.argwhere(np.ones_like(matrix, dtype=bool) if mask is None else mask.astype(bool))
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row", "col", "rating"])
        for i, j in idx:
            w.writerow([int(i), int(j), repr(float(matrix[i, j]))])


@dataclass(frozen=True)
class RatingSplit:
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray

    def counts(self):
        return int(self.train_mask.sum()), int(self.val_mask.sum()), int(self.test_mask.sum())


def read_split_file(path) -> np.ndarray:
    """Read a ``row,col`` CSV of designated test entries."""
    pairs = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["row", "col"]:
            raise DataFormatError(f"{path}: expected header 'row,col', got {header}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                pairs.append((int(rec[0]), int(rec[1])))
            except (ValueError, IndexError) as exc:
                raise DataFormatError(f"{path}:{lineno}: cannot parse {rec!r}") from exc
    return np.array(pairs, dtype=np.intp).reshape(-1, 2)


def split_ratings(prior: PriorAssociation, fractions=(0.8, 0.1, 0.1), seed: int = 0,
                  test_pairs: Optional[np.ndarray] = None, val_fraction: float = 0.05) -> RatingSplit:
    """Partition observed entries into disjoint train/val/test masks.

    With ``test_pairs`` the test set is fixed and ``val_fraction`` of the
    remaining observations is carved out for validation; otherwise observed
    entries are shuffled with ``seed`` and cut by ``fractions``.
    """
    rng = np.random.default_rng(seed)
    shape = prior.shape
    obs = np.flatnonzero(prior.mask.ravel())
    test = np.zeros(prior.h.size, dtype=np.uint8)
    val = np.zeros_like(test)
    train = np.zeros_like(test)
    if test_pairs is not None:
        test_pairs = np.asarray(test_pairs, dtype=np.intp).reshape(-1, 2)
        flat = np.ravel_multi_index((test_pairs[:, 0], test_pairs[:, 1]), shape)
        unobserved = prior.mask.ravel()[flat] == 0
        if unobserved.any():
            i, j = test_pairs[np.argmax(unobserved)]
            raise DataIntegrityError(f"split file references unobserved entry ({i}, {j})")
        test[flat] = 1
        rest = obs[test[obs] == 0]
        rest = rest[rng.permutation(len(rest))]
        n_val = int(round(val_fraction * len(rest)))
        val[rest[:n_val]] = 1
        train[rest[n_val:]] = 1
    else:
        f_train, f_val, f_test = fractions
        if min(fractions) < 0 or f_train + f_val + f_test > 1 + 1e-12:
            raise ValueError(f"fractions must be nonnegative and sum to at most 1, got {fractions}")
        order = obs[rng.permutation(len(obs))]
        m = len(obs)
        n_train = int(round(f_train * m))
        n_val = int(round(f_val * m))
        n_test = min(int(round(f_test * m)), m - n_train - n_val)
        train[order[:n_train]] = 1
        val[order[n_train:n_train + n_val]] = 1
        test[order[n_train + n_val:n_train + n_val + n_test]] = 1
    return RatingSplit(train.reshape(shape), val.reshape(shape), test.reshape(shape))


# ---------------------------------------------------------------------------
# MovieLens 100K


def _read_lines(path: Path, encoding="latin-1"):
    with open(path, encoding=encoding) as f:
        return f.read().splitlines()


def _age_bucket(age: int) -> int:
    return int(np.searchsorted(AGE_BUCKETS, age, side="right"))


def movielens_user_features(path: Path) -> np.ndarray:
    """One-hot age bucket, gender and occupation per user (rows ordered by user id)."""
    recs = []
    for lineno, line in enumerate(_read_lines(path / "u.user"), start=1):
        if not line.strip():
            continue
        parts = line.split("|")
        try:
            recs.append((int(parts[0]), int(parts[1]), parts[2], parts[3]))
        except (ValueError, IndexError) as exc:
            raise DataFormatError(f"{path / 'u.user'}:{lineno}: cannot parse {line!r}") from exc
    if len(recs) != ML100K_USERS:
        raise DataIntegrityError(f"u.user lists {len(recs)} users, expected {ML100K_USERS}")
    recs.sort()
    occupations = sorted({r[3] for r in recs})
    genders = sorted({r[2] for r in recs})
    n_age = len(AGE_BUCKETS) + 1
    feats = np.zeros((len(recs), n_age + len(genders) + len(occupations)))
    for row, (_, age, gender, occ) in enumerate(recs):
        feats[row, _age_bucket(age)] = 1.0
        feats[row, n_age + genders.index(gender)] = 1.0
        feats[row, n_age + len(genders) + occupations.index(occ)] = 1.0
    return feats


def movielens_item_features(path: Path) -> np.ndarray:
    """Genre indicators plus one-hot release decade per item (rows ordered by item id)."""
    recs = []
    for lineno, line in enumerate(_read_lines(path / "u.item"), start=1):
        if not line.strip():
            continue
        parts = line.split("|")
        try:
            item = int(parts[0])
            genres = [int(g) for g in parts[-ML100K_GENRES:]]
        except (ValueError, IndexError) as exc:
            raise DataFormatError(f"{path / 'u.item'}:{lineno}: cannot parse {line!r}") from exc
        if len(parts) < 5 + ML100K_GENRES:
            raise DataFormatError(f"{path / 'u.item'}:{lineno}: expected {5 + ML100K_GENRES} fields")
        decade = None
        if parts[2].strip():
            try:
                decade = datetime.strptime(parts[2].strip(), "%d-%b-%Y").year // 10 * 10
            except ValueError as exc:
                raise DataFormatError(f"{path / 'u.item'}:{lineno}: bad release date {parts[2]!r}") from exc
        recs.append((item, genres, decade))
    if len(recs) != ML100K_ITEMS:
        raise DataIntegrityError(f"u.item lists {len(recs)} items, expected {ML100K_ITEMS}")
    recs.sort(key=lambda r: r[0])
    decades = sorted({r[2] for r in recs if r[2] is not None})
    feats = np.zeros((len(recs), ML100K_GENRES + len(decades)))
    for row, (_, genres, decade) in enumerate(recs):
        feats[row, :ML100K_GENRES] = genres
        if decade is not None:
            feats[row, ML100K_GENRES + decades.index(decade)] = 1.0
    return feats


def read_movielens_ratings(path: Path) -> np.ndarray:
    """Parse ``u.data`` into an (m, 3) array of 0-based (user, item, rating)."""
    lines = _read_lines(path / "u.data")
    out = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataFormatError(f"{path / 'u.data'}:{lineno}: expected 4 tab-separated fields, got {line!r}")
        try:
            out.append((int(parts[0]) - 1, int(parts[1]) - 1, float(parts[2])))
        except ValueError as exc:
            raise DataFormatError(f"{path / 'u.data'}:{lineno}: cannot parse {line!r}") from exc
    if len(out) != ML100K_RATINGS:
        raise DataIntegrityError(f"u.data holds {len(out)} ratings, expected {ML100K_RATINGS}")
    return np.array(out)


def load_movielens_100k(path, k: int = 10, metric: str = "cosine") -> Tuple[Network, Network, PriorAssociation]:
    """Load ML-100K with k-NN side networks built from user/item metadata."""
    path = Path(path)
    ratings = read_movielens_ratings(path)
    prior = triplets_to_prior(ratings, ML100K_USERS, ML100K_ITEMS, ML100K_CLASSES)
    if prior.n_observed != ML100K_RATINGS:
        raise DataIntegrityError(f"{ML100K_RATINGS - prior.n_observed} duplicate (user, item) pairs in u.data")
    fu = movielens_user_features(path)
    fi = movielens_item_features(path)
    logger.info("ml-100k: %d users x %d features, %d items x %d features", *fu.shape, *fi.shape)
    return knn_graph(fu, k, metric), knn_graph(fi, k, metric), prior


# ---------------------------------------------------------------------------
# bundle


@dataclass(frozen=True)
class GraphData:
    """Everything a model needs: both normalized networks, the prior and a split."""

    net1: NormalizedNetwork
    net2: NormalizedNetwork
    prior: PriorAssociation
    split: RatingSplit
    name: str = "data"

    @property
    def shape(self):
        return self.prior.shape

    def train_h(self) -> np.ndarray:
        return self.prior.h * self.split.train_mask


def with_id_features(net: Network) -> Network:
    """Append one-hot node identity columns to the features (kept sparse)."""
    f = net.features if sp.issparse(net.features) else sp.csr_matrix(net.features)
    feats = sp.hstack([f, sp.identity(net.n, format="csr")], format="csr")
    return Network(net.adjacency, feats, net.identity)


def build_data(net1: Network, net2: Network, prior: PriorAssociation, split: RatingSplit,
               name: str = "data") -> GraphData:
    return GraphData(symmetric_normalize(net1), symmetric_normalize(net2), prior, split, name)
