"""Ground-truth harnesses for the influence machinery.

* up-weighted retraining: retrain with one example's loss weighted by ``eps``
  and measure the real change of a test loss;
* the gradient-descent / ridge equivalence that justifies damping;
* a planted-noise "translation" corpus (Caesar cipher) with known bad rows.
"""
from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np
from scipy import stats

from gdig.curvature import accumulate, prepare_inverse
from gdig.errors import InputError, PreconditionError
from gdig.finetune import TrainConfig, train
from gdig.gradfeat import LayerSelector, selected_gradient
from gdig.influence import influence_pair
from gdig.numkit import Rng, spd_solve, sym_eig
from gdig.toylm import Example, ModelConfig, init_params, loss

# ---------------------------------------------------------------------------
# up-weighted retraining on the toy LM


@dataclass(frozen=True)
class UpweightSpec:
    index: int
    eps: float
    train_config: TrainConfig
    test_example: Example

    def __post_init__(self):
        if abs(self.eps) > 1:
            raise InputError(f"|eps| must be <= 1, got {self.eps}")


def retrain(train_set, base_params, cfg: TrainConfig, index=None, eps=0.0):
    weights = np.zeros(len(train_set))
    if index is not None:
        weights[index] = eps
    params, _ = train(base_params, train_set, train_set, cfg, extra_weights=weights, checkpoint="last")
    return params


def upweight_delta(train_set, spec: UpweightSpec, base_params) -> float:
    """L(z_t; theta_eps) - L(z_t; theta_0), both retrained from ``base_params`` with identical order."""
    if not 0 <= spec.index < len(train_set):
        raise InputError(f"candidate index {spec.index} outside the training set")
    theta0 = retrain(train_set, base_params, spec.train_config)
    theta_eps = retrain(train_set, base_params, spec.train_config, spec.index, spec.eps)
    return loss(theta_eps, spec.test_example) - loss(theta0, spec.test_example)


def flat_limit_damping(eta: float, steps: int) -> float:
    """Damping implied by ``steps`` SGD steps of size ``eta`` in the flat-curvature limit.

    ``lemma1_lambda`` tends to ``1 / (eta * steps)`` as the eigenvalue goes to 0.
    """
    return 1.0 / (eta * steps)


@dataclass
class ToyInfluenceResult:
    deltas: np.ndarray        # (n_candidates, n_seeds) retrained loss change
    predicted: np.ndarray     # (n_candidates, n_seeds) eps * I(z_m, z_t)
    spearman: float
    pearson: float
    eps: float
    damping: float


def toylm_influence_experiment(n_candidates=40, n_seeds=8, seed=0, eta=0.05, steps=20,
                               config=ModelConfig(), damping=None) -> ToyInfluenceResult:
    """Correlate eps * influence with actual up-weighted retraining on the toy LM.

    Full-batch SGD from a fixed random start; influence is evaluated at the
    eps = 0 endpoint over every dense layer with KFAC curvature from the
    training set and the damping implied by the run length.
    """
    rng = Rng(seed)
    corpus, _ = make_noisy_corpus(NoiseSpec(n_candidates + n_seeds, 0.0, seed))
    cands, seeds = corpus[:n_candidates], corpus[n_candidates:]
    base = init_params(config, rng.child(1))
    cfg = TrainConfig(learning_rate=eta, epochs=steps, batch_size=n_candidates,
                      eval_every_steps=max(steps, 1), optimizer="sgd", seed=seed)
    eps = 0.5 / n_candidates
    lam = flat_limit_damping(eta, steps) if damping is None else damping

    theta0 = retrain(cands, base, cfg)
    base_losses = np.array([loss(theta0, z) for z in seeds])
    deltas = np.empty((n_candidates, n_seeds))
    for m in range(n_candidates):
        theta_m = retrain(cands, base, cfg, m, eps)
        deltas[m] = [loss(theta_m, z) - l0 for z, l0 in zip(seeds, base_losses)]

    sel = LayerSelector.all_layers(config)
    inv = prepare_inverse(accumulate(cands, theta0, sel), lam)
    g_c = [selected_gradient(theta0, z, sel)[0] for z in cands]
    g_s = [selected_gradient(theta0, z, sel)[0] for z in seeds]
    predicted = eps * np.array([[influence_pair(inv, gt, gm) for gt in g_s] for gm in g_c])
    rho = stats.spearmanr(predicted.ravel(), deltas.ravel()).statistic
    r = np.corrcoef(predicted.ravel(), deltas.ravel())[0, 1]
    return ToyInfluenceResult(deltas, predicted, float(rho), float(r), eps, lam)


# ---------------------------------------------------------------------------
# gradient descent vs ridge (implicit regularisation of early stopping)


def lemma1_lambda(eta: float, steps: int, eigenvalue: float) -> float:
    """Ridge strength matching ``steps`` GD steps along one eigendirection.

    With ``r = (1 - eta * eigenvalue) ** steps`` the ridge minimiser shrinks this
    direction by ``eigenvalue / (eigenvalue + lam) = 1 - r``, so
    ``lam = eigenvalue * r / (1 - r)``.
    """
    contraction = 1.0 - eta * eigenvalue
    if not 0.0 <= contraction < 1.0:
        raise PreconditionError(f"need 0 <= 1 - eta*eigenvalue < 1, got {contraction}")
    if steps < 1:
        raise PreconditionError("steps must be >= 1")
    if contraction == 0.0:
        return 0.0
    log_r = steps * np.log1p(-eta * eigenvalue)
    return float(eigenvalue * np.exp(log_r) / -np.expm1(log_r))


@dataclass(frozen=True)
class QuadraticProblem:
    """``f(theta) = 0.5 (theta - target)^T Q diag(eigenvalues) Q^T (theta - target)``, start at 0."""

    eigenvalues: np.ndarray
    basis: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.basis, dtype=float)
        if np.max(np.abs(q.T @ q - np.eye(len(q)))) > 1e-10:
            raise InputError("basis is not orthonormal")
        if np.any(np.asarray(self.eigenvalues) <= 0):
            raise InputError("eigenvalues must be positive")

    @property
    def hessian(self):
        return (self.basis * self.eigenvalues) @ self.basis.T

    @classmethod
    def make(cls, eigenvalues, seed=0, rotate=False):
        gen = Rng(seed).gen
        lam = np.asarray(eigenvalues, dtype=float)
        d = len(lam)
        if rotate:
            q, r = np.linalg.qr(gen.standard_normal((d, d)))
            q = q * np.sign(np.diag(r))
        else:
            q = np.eye(d)
        return cls(lam, q, gen.standard_normal(d))


def gd_vs_ridge_check(p: QuadraticProblem, eta: float, steps: int) -> float:
    """Max |theta_GD - theta_ridge| after ``steps`` full-batch steps from zero."""
    lams = np.array([lemma1_lambda(eta, steps, e) for e in p.eigenvalues])
    h = p.hessian
    theta = np.zeros_like(p.target)
    for _ in range(steps):
        theta = theta - eta * (h @ (theta - p.target))
    shrink = p.eigenvalues / (p.eigenvalues + lams)
    ridge = p.basis @ (shrink * (p.basis.T @ p.target))
    return float(np.max(np.abs(theta - ridge)))


# ---------------------------------------------------------------------------
# least-squares testbed for up-weighting


@dataclass
class RegressionTestbed:
    """Per-example loss ``0.5 * (x_i . theta - y_i)^2``; objective is the mean."""

    X: np.ndarray
    y: np.ndarray
    x_test: np.ndarray
    y_test: float

    @classmethod
    def make(cls, n=30, d=5, seed=0, noise=0.5):
        gen = Rng(seed).gen
        X = gen.standard_normal((n, d)) * np.linspace(0.5, 1.5, d)
        w = gen.standard_normal(d)
        y = X @ w + noise * gen.standard_normal(n)
        xt = gen.standard_normal(d)
        return cls(X, y, xt, float(xt @ w + noise * gen.standard_normal()))

    @property
    def n(self):
        return len(self.y)

    def test_loss(self, theta):
        return 0.5 * float(self.x_test @ theta - self.y_test) ** 2

    def _weights(self, index, eps):
        w = np.full(self.n, 1.0 / self.n)
        if index is not None:
            w[index] += eps
        return w

    def gd(self, eta, steps, index=None, eps=0.0):
        w = self._weights(index, eps)
        theta = np.zeros(self.X.shape[1])
        for _ in range(steps):
            resid = self.X @ theta - self.y
            theta = theta - eta * (self.X.T @ (w * resid))
        return theta

    def closed_form(self, eta, steps, index=None, eps=0.0):
        """theta_T = (I - (I - eta H)^T) H^-1 b for the weighted objective, via eigendecomposition."""
        w = self._weights(index, eps)
        h = self.X.T @ (w[:, None] * self.X)
        b = self.X.T @ (w * self.y)
        e = sym_eig(h)
        coords = (e.vectors.T @ b) / e.values
        return e.vectors @ ((1.0 - (1.0 - eta * e.values) ** steps) * coords)

    def upweight_delta(self, index, eps, eta, steps):
        return self.test_loss(self.gd(eta, steps, index, eps)) - self.test_loss(self.gd(eta, steps))

    def closed_form_delta(self, index, eps, eta, steps):
        return (self.test_loss(self.closed_form(eta, steps, index, eps))
                - self.test_loss(self.closed_form(eta, steps)))

    def influence(self, index, eta, steps):
        """-g_t^T (H + Lambda_lam)^-1 g_m at the GD endpoint, damping per eigendirection."""
        theta = self.gd(eta, steps)
        h = self.X.T @ self.X / self.n
        e = sym_eig(h)
        lams = np.array([lemma1_lambda(eta, steps, v) for v in e.values])
        damped = (e.vectors * (e.values + lams)) @ e.vectors.T
        g_m = self.X[index] * (self.X[index] @ theta - self.y[index])
        g_t = self.x_test * (self.x_test @ theta - self.y_test)
        return -float(g_t @ spd_solve(damped, g_m))


@dataclass
class QuadraticInfluenceResult:
    deltas: np.ndarray
    predicted: np.ndarray
    pearson: float
    eps: float


def quadratic_influence_experiment(n=30, d=5, seed=0, steps=50) -> QuadraticInfluenceResult:
    bed = RegressionTestbed.make(n, d, seed)
    h = bed.X.T @ bed.X / n
    eta = 0.5 / np.max(np.linalg.eigvalsh(h))
    eps = 0.5 / n
    deltas = np.array([bed.upweight_delta(m, eps, eta, steps) for m in range(n)])
    predicted = eps * np.array([bed.influence(m, eta, steps) for m in range(n)])
    r = np.corrcoef(predicted, deltas)[0, 1]
    return QuadraticInfluenceResult(deltas, predicted, float(r), eps)


# ---------------------------------------------------------------------------
# planted-noise cipher corpus


@dataclass(frozen=True)
class NoiseSpec:
    n: int
    noise_rate: float
    seed: int
    shift: int = 3
    trg_lang: str = "English"
    id_prefix: str = "ex"
    min_len: int = 6
    max_len: int = 16

    def __post_init__(self):
        if not 0.0 <= self.noise_rate < 1.0:
            raise InputError(f"noise_rate must lie in [0, 1), got {self.noise_rate}")


def caesar(text: str, shift: int) -> str:
    return "".join(chr((ord(c) - 97 + shift) % 26 + 97) for c in text)


def _random_word(gen, lo, hi):
    letters = gen.integers(0, 26, size=int(gen.integers(lo, hi + 1)))
    return "".join(string.ascii_lowercase[i] for i in letters)


def corpus_records(spec: NoiseSpec):
    """The corpus as JSONL-ready dicts ({"id", "src", "tgt", "trg_lang"}) plus flags."""
    gen = Rng(spec.seed, stream=7).gen
    records, flags = [], []
    for i in range(spec.n):
        src = _random_word(gen, spec.min_len, spec.max_len)
        junk = _random_word(gen, spec.min_len, spec.max_len)
        bad = bool(gen.random() < spec.noise_rate)
        records.append({"id": f"{spec.id_prefix}{i:05d}", "src": src,
                        "tgt": junk if bad else caesar(src, spec.shift), "trg_lang": spec.trg_lang})
        flags.append(bad)
    return records, flags


def make_noisy_corpus(spec: NoiseSpec):
    """Cipher 'translation' pairs; a ``noise_rate`` share gets an unrelated random target.

    Returns (examples, corrupted flags). Every record draws the same number of
    random values, so the clean rows do not depend on ``noise_rate``.
    """
    records, flags = corpus_records(spec)
    return [Example.from_text(r["id"], r["src"], r["tgt"], r["trg_lang"]) for r in records], flags
