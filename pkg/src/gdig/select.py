"""Quality filtering on the influence matrix and gradient-cluster diversification."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from gdig import _kernels
from gdig.errors import InputError, ShapeError
from gdig.influence import InfluenceMatrix
from gdig.numkit import as_rng, random_projection

MAX_PROJ_DIM = 400
MAX_K_CLUSTERS = 512


@dataclass(frozen=True)
class QualityCriterion:
    mode: str = "strict"
    tau: float = 1.0

    def __post_init__(self):
        if self.mode not in ("strict", "fraction"):
            raise InputError(f"unknown quality mode {self.mode!r}")
        if not 0.0 < self.tau <= 1.0:
            raise InputError(f"tau must lie in (0, 1], got {self.tau}")


def quality_filter(m: InfluenceMatrix, c: QualityCriterion = QualityCriterion()) -> list:
    """Candidates whose influence is negative on every seed (strict) or on >= tau of them."""
    if m.scores.size == 0:
        raise InputError("influence matrix is empty")
    negative = m.scores < 0
    if c.mode == "strict":
        keep = negative.all(axis=1)
    else:
        keep = negative.sum(axis=1) >= c.tau * m.scores.shape[1]
    return [m.candidate_ids[i] for i in np.flatnonzero(keep)]


@dataclass
class ClusterModel:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    n_iter: int
    inertia_history: list = field(default_factory=list)


def _kmeans_pp(x, k, gen):
    n = len(x)
    chosen = [int(gen.integers(n))]
    d2 = _kernels.assign(x, x[chosen])[1]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(gen.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(gen.choice(rest))
        chosen.append(idx)
        d2 = np.minimum(d2, _kernels.assign(x, x[[idx]])[1])
    return x[chosen].copy()


def kmeans(points, k: int, rng, max_iter: int = 100) -> ClusterModel:
    """Lloyd iterations from a k-means++ start; empty clusters take the farthest point."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ShapeError(f"points must be a non-empty 2-D array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("points contain non-finite values")
    n = len(x)
    if not 1 <= k <= n:
        raise InputError(f"k must be in [1, {n}], got {k}")
    gen = as_rng(rng).gen
    centroids = _kmeans_pp(x, k, gen)
    labels, d2 = _kernels.assign(x, centroids)
    history = [float(d2.sum())]
    it = 0
    while it < max_iter:
        it += 1
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            far = np.argsort(-d2, kind="stable")
            for c, p in zip(np.flatnonzero(~nonempty), far):
                centroids[c] = x[p]
        new_labels, d2 = _kernels.assign(x, centroids)
        history.append(float(d2.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return ClusterModel(centroids, labels, float(d2.sum()), it, history)


def default_k_clusters(pool: int) -> int:
    return max(1, min(MAX_K_CLUSTERS, pool // 4))


def default_proj_dim(feature_dim: int) -> int:
    return min(MAX_PROJ_DIM, feature_dim)


def round_robin(labels, n_select: int, gen) -> list:
    """Visit clusters cyclically in shuffled order, taking one random unused member per visit."""
    labels = np.asarray(labels)
    clusters = np.unique(labels)
    order = clusters[gen.permutation(len(clusters))]
    pools = {int(c): list(np.flatnonzero(labels == c)) for c in clusters}
    picked = []
    while len(picked) < n_select:
        for c in order:
            members = pools[int(c)]
            if not members:
                continue
            picked.append(int(members.pop(int(gen.integers(len(members))))))
            if len(picked) == n_select:
                break
    return picked


@dataclass
class Diversified:
    ids: list
    picked: list            # row indices into the feature list, in draw order
    clusters: ClusterModel
    takes: dict             # cluster -> number drawn
    k_clusters: int
    proj_dim: int


def diversify_detailed(features, n_select: int, k_clusters=None, proj_dim=None, rng=0,
                       max_iter: int = 100) -> Diversified:
    ids = [f.id for f in features]
    if not ids:
        raise InputError("no features to diversify")
    if n_select > len(ids) or n_select < 0:
        raise InputError(f"n_select={n_select} exceeds the pool of {len(ids)} candidates")
    x = np.stack([np.asarray(f.values, dtype=np.float64) for f in features])
    k = default_k_clusters(len(ids)) if k_clusters is None else int(k_clusters)
    dim = default_proj_dim(x.shape[1]) if proj_dim is None else int(proj_dim)
    if k > len(ids):
        raise InputError(f"k_clusters={k} exceeds the pool of {len(ids)} candidates")
    rng = as_rng(rng)
    proj = random_projection(x.shape[1], dim, rng.child(1))
    model = kmeans(x @ proj.T, k, rng.child(2), max_iter=max_iter)
    picked = round_robin(model.labels, n_select, rng.child(3).gen)
    takes = {}
    for p in picked:
        c = int(model.labels[p])
        takes[c] = takes.get(c, 0) + 1
    return Diversified([ids[p] for p in picked], picked, model, takes, k, dim)


def diversify(features, n_select: int, k_clusters=None, proj_dim=None, rng=0) -> list:
    return diversify_detailed(features, n_select, k_clusters, proj_dim, rng).ids


def cluster_entropy(labels) -> float:
    """Shannon entropy (bits) of the label distribution."""
    _, counts = np.unique(np.asarray(labels), return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


@dataclass
class SelectionReport:
    quality_pass_ids: list
    cluster_of: dict
    selected_ids: list
    takes: dict
    config: dict

    def __post_init__(self):
        passed = set(self.quality_pass_ids)
        if not set(self.selected_ids) <= passed:
            raise InputError("selected ids must come from the quality-pass pool")

    def to_json(self) -> str:
        d = asdict(self)
        d["takes"] = {str(k): v for k, v in sorted(self.takes.items())}
        return json.dumps(d, indent=2, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["takes"] = {int(k): v for k, v in d["takes"].items()}
        return cls(**d)

