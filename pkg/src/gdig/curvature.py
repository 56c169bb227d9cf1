"""KFAC curvature over selected dense layers and its damped inverse.

Per layer the empirical Fisher block is approximated by ``kron(A, G)`` with
``A = mean(a a^T)`` over response tokens (``a`` = layer input with a trailing 1)
and ``G = mean(g g^T)`` (``g`` = gradient w.r.t. the layer's pre-activation).
The damped inverse ``(kron(A, G) + lam I)^-1`` is applied exactly in the joint
eigenbasis of the two factors.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gdig.errors import FormatError, InputError, ShapeError, SizeError
from gdig.gradfeat import LayerSelector, selected_gradient
from gdig.numkit import SymEigen, sym_eig
from gdig.toylm import Params, batch_rows, check_example, forward_backward

DEFAULT_DAMPING = 1e-3
DENSE_EFIM_MAX_DIM = 5000
_CHUNK_ROWS = 4096


@dataclass
class KfacFactor:
    layers: tuple
    A: dict
    G: dict
    count: int


def accumulate(data, params: Params, sel: LayerSelector) -> KfacFactor:
    if len(data) == 0:
        raise InputError("cannot accumulate curvature over an empty dataset")
    cfg = params.config
    sel.validate(cfg)
    for ex in data:
        check_example(ex, cfg.vocab_size)
        if ex.n_response == 0:
            raise InputError(f"example {ex.id!r} has an empty response")
    shapes = cfg.layer_shapes()
    A = {l: np.zeros((shapes[l][1] + 1,) * 2) for l in sel.layers}
    G = {l: np.zeros((shapes[l][0],) * 2) for l in sel.layers}
    ctx, tgt, _ = batch_rows(data, cfg.context_window)
    for start in range(0, len(tgt), _CHUNK_ROWS):
        sl = slice(start, start + _CHUNK_ROWS)
        _, _, stats = forward_backward(params, ctx[sl], tgt[sl], stats_layers=sel.layers)
        for l in sel.layers:
            A[l] += stats.a[l].T @ stats.a[l]
            G[l] += stats.g[l].T @ stats.g[l]
    n = len(tgt)
    for l in sel.layers:
        A[l] = 0.5 * (A[l] + A[l].T) / n
        G[l] = 0.5 * (G[l] + G[l].T) / n
    return KfacFactor(sel.layers, A, G, n)


@dataclass
class DampedInverse:
    layers: tuple
    eig_A: dict
    eig_G: dict
    damping: float

    @property
    def dim(self):
        return sum(len(self.eig_A[l].values) * len(self.eig_G[l].values) for l in self.layers)

    def kron_spectrum(self, layer):
        """Undamped eigenvalues alpha_i * gamma_j, shape (out, in+1)."""
        return np.outer(self.eig_G[layer].values, self.eig_A[layer].values)


def _clamped(e: SymEigen) -> SymEigen:
    return SymEigen(np.maximum(e.values, 0.0), e.vectors)


def prepare_inverse(factors: KfacFactor, damping: float = DEFAULT_DAMPING) -> DampedInverse:
    if not (np.isfinite(damping) and damping > 0):
        raise InputError(f"damping must be finite and > 0, got {damping}")
    eig_A = {l: _clamped(sym_eig(factors.A[l])) for l in factors.layers}
    eig_G = {l: _clamped(sym_eig(factors.G[l])) for l in factors.layers}
    return DampedInverse(tuple(factors.layers), eig_A, eig_G, float(damping))


def _as_vector(grad):
    return np.asarray(getattr(grad, "values", grad), dtype=np.float64)


def ihvp(inv: DampedInverse, grad) -> np.ndarray:
    """(kron(A, G) + lam I)^-1 v per layer, without forming the Kronecker product."""
    v = _as_vector(grad)
    if v.shape != (inv.dim,):
        raise ShapeError(f"vector of shape {v.shape} does not match curvature dim {inv.dim}")
    out = np.empty_like(v)
    pos = 0
    for l in inv.layers:
        ua, ug = inv.eig_A[l].vectors, inv.eig_G[l].vectors
        rows, cols = ug.shape[0], ua.shape[0]
        size = rows * cols
        block = v[pos:pos + size].reshape((rows, cols), order="F")
        rotated = ug.T @ block @ ua
        rotated /= inv.kron_spectrum(l) + inv.damping
        out[pos:pos + size] = (ug @ rotated @ ua.T).ravel(order="F")
        pos += size
    return out


def dense_efim(data, params: Params, sel: LayerSelector) -> np.ndarray:
    """Exact empirical Fisher (1/n) sum g g^T over token-summed per-example gradients."""
    dim = sel.dim(params.config)
    if dim > DENSE_EFIM_MAX_DIM:
        raise SizeError(f"selected dimension {dim} exceeds the dense guard of {DENSE_EFIM_MAX_DIM}")
    if len(data) == 0:
        raise InputError("cannot build an eFIM over an empty dataset")
    grads = np.stack([selected_gradient(params, ex, sel)[0] for ex in data])
    return grads.T @ grads / len(data)


def dense_kfac(factors: KfacFactor) -> np.ndarray:
    """Block-diagonal matrix of kron(A, G) blocks (reference use only)."""
    blocks = [np.kron(factors.A[l], factors.G[l]) for l in factors.layers]
    dim = sum(b.shape[0] for b in blocks)
    out = np.zeros((dim, dim))
    pos = 0
    for b in blocks:
        k = b.shape[0]
        out[pos:pos + k, pos:pos + k] = b
        pos += k
    return out


# ---------------------------------------------------------------------------
# "GKFC": magic, u32 layer count, per layer u32 index, u32 a_dim, u32 g_dim,
# u64 token count, A then G as row-major float64.

_MAGIC = b"GKFC"


def save_factors(factors: KfacFactor, path):
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(factors.layers)))
        for l in factors.layers:
            a, g = factors.A[l], factors.G[l]
            fh.write(struct.pack("<IIIQ", l, a.shape[0], g.shape[0], factors.count))
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(g, dtype="<f8").tobytes())


def load_factors(path) -> KfacFactor:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise FormatError(f"{path}: not a GKFC factor file")
    (n_layers,) = struct.unpack_from("<I", data, 4)
    pos = 8
    layers, A, G, count = [], {}, {}, 0
    for _ in range(n_layers):
        l, da, dg, count = struct.unpack_from("<IIIQ", data, pos)
        pos += 20
        A[l] = np.frombuffer(data, "<f8", da * da, pos).reshape(da, da).copy()
        pos += 8 * da * da
        G[l] = np.frombuffer(data, "<f8", dg * dg, pos).reshape(dg, dg).copy()
        pos += 8 * dg * dg
        layers.append(l)
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes in factor file")
    return KfacFactor(tuple(layers), A, G, count)


def factors_from_matrices(A: dict, G: dict, count: int = 1) -> KfacFactor:
    """Wrap hand-built factors (tests, oracles)."""
    layers = tuple(A)
    return KfacFactor(layers, {l: np.asarray(A[l], float) for l in layers},
                      {l: np.asarray(G[l], float) for l in layers}, count)
