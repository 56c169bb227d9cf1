"""Influence scores between candidate and seed examples.

``I(z_m, z_t) = -g_t^T (H + lam I)^-1 g_m``. A negative score predicts that
training on the candidate ``z_m`` lowers the loss on the seed ``z_t``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gdig.curvature import DampedInverse, ihvp
from gdig.errors import FormatError, InputError, ShapeError
from gdig.gradfeat import GradCache

DEFAULT_SEED_SIZE = 256


def _vec(x):
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def influence_pair(inv: DampedInverse, g_t, g_m) -> float:
    gt, gm = _vec(g_t), _vec(g_m)
    if gm.shape != (inv.dim,):
        raise ShapeError(f"candidate vector of shape {gm.shape} does not match curvature dim {inv.dim}")
    return -float(np.dot(ihvp(inv, gt), gm))


def self_influence(inv: DampedInverse, g) -> float:
    return influence_pair(inv, g, g)


@dataclass
class SeedSet:
    ids: list
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if len(self.ids) == 0:
            raise InputError("seed set is empty")
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ShapeError("seed vectors must be (n_seeds, dim)")

    @classmethod
    def from_cache(cls, cache: GradCache):
        return cls(list(cache.ids), cache.values.astype(np.float64))

    @classmethod
    def from_features(cls, features):
        return cls([f.id for f in features], np.stack([_vec(f) for f in features]))


@dataclass
class InfluenceMatrix:
    scores: np.ndarray          # (n_candidates, n_seeds)
    candidate_ids: list
    seed_ids: list
    damping: float = float("nan")
    selector: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.candidate_ids), len(self.seed_ids)):
            raise ShapeError("score matrix shape does not match id lists")
        if not np.all(np.isfinite(self.scores)):
            raise InputError("influence matrix has non-finite entries")


def influence_matrix(inv: DampedInverse, seeds: SeedSet, cand_cache: GradCache) -> InfluenceMatrix:
    """Entry (m, t) = influence of candidate m on seed t; one ihvp per seed."""
    if seeds.vectors.shape[1] != inv.dim or cand_cache.dim != inv.dim:
        raise ShapeError(f"feature dims (seeds {seeds.vectors.shape[1]}, candidates {cand_cache.dim}) "
                         f"do not match curvature dim {inv.dim}")
    solved = np.stack([ihvp(inv, s) for s in seeds.vectors], axis=1)  # (dim, n_seeds)
    cands = cand_cache.values.astype(np.float64)
    scores = np.empty((cand_cache.count, len(seeds.ids)))
    for m in range(cand_cache.count):
        scores[m] = -(cands[m] @ solved)
    return InfluenceMatrix(scores, list(cand_cache.ids), list(seeds.ids), inv.damping,
                           cand_cache.selector.describe())


def save_matrix(m: InfluenceMatrix, path, **extra):
    """One JSON header line, then the scores as little-endian float64 (row-major)."""
    header = {"candidate_ids": m.candidate_ids, "seed_ids": m.seed_ids,
              "shape": list(m.scores.shape), "damping": m.damping, "selector": m.selector,
              **m.meta, **extra}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(m.scores, dtype="<f8").tobytes())


def load_matrix(path) -> InfluenceMatrix:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing influence header")
    header = json.loads(data[:nl])
    rows, cols = header["shape"]
    scores = np.frombuffer(data, dtype="<f8", offset=nl + 1)
    if scores.size != rows * cols:
        raise FormatError(f"{path}: expected {rows * cols} scores, found {scores.size}")
    known = {"candidate_ids", "seed_ids", "shape", "damping", "selector"}
    return InfluenceMatrix(scores.reshape(rows, cols).copy(), header["candidate_ids"], header["seed_ids"],
                           header["damping"], header["selector"],
                           {k: v for k, v in header.items() if k not in known})
