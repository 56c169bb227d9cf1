"""Hot numeric kernels.

Each kernel exists twice: a numba ``@njit`` version and a pure-numpy version.
Set ``GDIG_PURE_NUMPY=1`` (or run without numba installed) to route the public
names to the numpy versions. Both implementations stay importable as
``numba_impl`` / ``numpy_impl`` so tests and the benchmark can compare them.
"""
import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrapper(f):
            return f

        return wrapper


_EPS = np.finfo(np.float64).eps
MAX_SWEEPS = 100


# ---------------------------------------------------------------------------
# numpy path


def _round_robin(n):
    """Rounds of disjoint (p, q) pairs covering every pair once (circle method)."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < n and q < n:
                ps.append(min(p, q))
                qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=np.int64), np.array(qs, dtype=np.int64)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _np_jacobi_eigh(a):
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    if n < 2:
        return np.diag(a).copy(), v
    fro = np.sqrt(np.sum(a * a))
    if fro == 0.0:
        return np.zeros(n), v
    rounds = _round_robin(n)
    for _ in range(MAX_SWEEPS):
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off <= _EPS * fro:
            break
        for p, q in rounds:
            apq = a[p, q]
            nz = apq != 0.0
            if not nz.any():
                continue
            p, q, apq = p[nz], q[nz], apq[nz]
            with np.errstate(over="ignore"):  # denormal apq: theta=inf gives t=0, a no-op rotation
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t[theta == 0.0] = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            ap, aq = a[:, p].copy(), a[:, q]
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            ap, aq = a[p, :].copy(), a[q, :]
            a[p, :] = c[:, None] * ap - s[:, None] * aq
            a[q, :] = s[:, None] * ap + c[:, None] * aq
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = v[:, p].copy(), v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def _np_pairwise_sqdist(x):
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    out = np.zeros((n, n))
    for i in range(n - 1):
        d = x[i + 1:] - x[i]
        row = np.einsum("ij,ij->i", d, d)
        out[i, i + 1:] = row
        out[i + 1:, i] = row
    return out


def _np_assign(x, centroids):
    n, k = x.shape[0], centroids.shape[0]
    dist = np.empty((n, k))
    for c in range(k):
        d = x - centroids[c]
        dist[:, c] = np.einsum("ij,ij->i", d, d)
    labels = np.argmin(dist, axis=1)
    return labels.astype(np.int64), dist[np.arange(n), labels]


numpy_impl = SimpleNamespace(
    jacobi_eigh=_np_jacobi_eigh,
    pairwise_sqdist=_np_pairwise_sqdist,
    assign=_np_assign,
    name="numpy",
)


# ---------------------------------------------------------------------------
# numba path


@njit(cache=True)
def _nb_jacobi_eigh(a_in):
    n = a_in.shape[0]
    a = a_in.copy()
    v = np.eye(n)
    fro = 0.0
    for i in range(n):
        for j in range(n):
            fro += a[i, j] * a[i, j]
    fro = np.sqrt(fro)
    if n >= 2 and fro > 0.0:
        for _ in range(MAX_SWEEPS):
            off = 0.0
            for i in range(n):
                for j in range(n):
                    if i != j:
                        off += a[i, j] * a[i, j]
            if np.sqrt(off) <= _EPS * fro:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if apq == 0.0:
                        continue
                    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                    if theta == 0.0:
                        t = 1.0
                    else:
                        t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    c = 1.0 / np.sqrt(t * t + 1.0)
                    s = t * c
                    for r in range(n):
                        arp = a[r, p]
                        arq = a[r, q]
                        a[r, p] = c * arp - s * arq
                        a[r, q] = s * arp + c * arq
                    for r in range(n):
                        apr = a[p, r]
                        aqr = a[q, r]
                        a[p, r] = c * apr - s * aqr
                        a[q, r] = s * apr + c * aqr
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    for r in range(n):
                        vrp = v[r, p]
                        vrq = v[r, q]
                        v[r, p] = c * vrp - s * vrq
                        v[r, q] = s * vrp + c * vrq
    w = np.empty(n)
    for i in range(n):
        w[i] = a[i, i]
    order = np.argsort(w, kind="mergesort")
    return w[order], v[:, order].copy()


@njit(cache=True)
def _nb_pairwise_sqdist(x):
    n, d = x.shape
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            acc = 0.0
            for k in range(d):
                diff = x[i, k] - x[j, k]
                acc += diff * diff
            out[i, j] = acc
            out[j, i] = acc
    return out


@njit(cache=True)
def _nb_assign(x, centroids):
    n, d = x.shape
    k = centroids.shape[0]
    labels = np.empty(n, dtype=np.int64)
    best = np.empty(n)
    for i in range(n):
        bl = 0
        bd = np.inf
        for c in range(k):
            acc = 0.0
            for j in range(d):
                diff = x[i, j] - centroids[c, j]
                acc += diff * diff
            if acc < bd:
                bd = acc
                bl = c
        labels[i] = bl
        best[i] = bd
    return labels, best


def _contig(f):
    def wrapped(*arrays):
        return f(*(np.ascontiguousarray(a, dtype=np.float64) for a in arrays))

    wrapped.__name__ = f.__name__
    wrapped.__doc__ = f.__doc__
    return wrapped


numba_impl = SimpleNamespace(
    jacobi_eigh=_contig(_nb_jacobi_eigh),
    pairwise_sqdist=_contig(_nb_pairwise_sqdist),
    assign=_contig(_nb_assign),
    name="numba" if HAVE_NUMBA else "numpy-fallback",
)


def _pure_numpy_requested():
    return os.environ.get("GDIG_PURE_NUMPY", "").strip().lower() in {"1", "true", "yes", "on"}


USE_NUMBA = HAVE_NUMBA and not _pure_numpy_requested()
active = numba_impl if USE_NUMBA else numpy_impl
BACKEND = active.name

jacobi_eigh = active.jacobi_eigh
pairwise_sqdist = active.pairwise_sqdist
assign = active.assign

if USE_NUMBA and os.environ.get("GDIG_THREADS"):
    numba.set_num_threads(max(1, min(int(os.environ["GDIG_THREADS"]), numba.config.NUMBA_NUM_THREADS)))
