"""Minibatch finetuning loop with best-validation checkpointing."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from gdig.errors import DivergenceError, InputError
from gdig.numkit import Rng
from gdig.toylm import Params, batch_rows, check_example, forward_backward, row_losses


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 1
    batch_size: int = 64
    eval_every_steps: int = 10
    optimizer: str = "sgd"
    seed: int = 0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InputError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every_steps < 1:
            raise InputError("batch_size and eval_every_steps must be >= 1, epochs >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise InputError(f"unknown optimizer {self.optimizer!r}")


TOY_PRESET = TrainConfig()
LLM_PRESET = TrainConfig(learning_rate=1e-5, epochs=3, batch_size=64, eval_every_steps=10)


@dataclass
class TrainHistory:
    train_losses: list = field(default_factory=list)
    eval_steps: list = field(default_factory=list)
    valid_losses: list = field(default_factory=list)
    best_step: int = 0

    @property
    def best_valid_loss(self):
        return self.valid_losses[self.eval_steps.index(self.best_step)]

    def to_json(self, **extra) -> str:
        return json.dumps({**asdict(self), **extra}, indent=2, sort_keys=True)


class _Rows:
    """Precomputed (context, target) rows of a dataset, grouped by example."""

    def __init__(self, examples, context_window):
        self.ctx, self.tgt, self.owner = batch_rows(examples, context_window)
        self.n = len(examples)
        bounds = np.searchsorted(self.owner, np.arange(self.n + 1))
        self.spans = [np.arange(bounds[k], bounds[k + 1]) for k in range(self.n)]

    def mean_loss(self, params):
        per_row = row_losses(params, self.ctx, self.tgt) if len(self.tgt) else np.zeros(0)
        per_example = np.bincount(self.owner, weights=per_row, minlength=self.n)
        total = 0.0
        for v in per_example:
            total += v
        return total / self.n


def _check_set(data, name, vocab_size):
    if len(data) == 0:
        raise InputError(f"{name} set is empty")
    for ex in data:
        check_example(ex, vocab_size)


def mean_loss(params: Params, data) -> float:
    """Mean of per-example response losses, summed in index order."""
    _check_set(data, "data", params.config.vocab_size)
    return _Rows(data, params.config.context_window).mean_loss(params)


def train(params0: Params, train_set, valid_set, cfg: TrainConfig, extra_weights=None,
          checkpoint: str = "best"):
    """Finetune and return (best params, history).

    Each step minimises the batch objective ``(1/b) sum L_i + sum eps_i L_i``
    where ``eps = extra_weights`` (default zero, one entry per training example);
    with full batches this is exactly the up-weighted objective
    ``(1/n) sum L + eps_m L_m``. Validation loss is recorded at step 0, every
    ``eval_every_steps`` steps and after the last step; the returned parameters
    are those of the evaluation with the smallest validation loss, or the
    final parameters when ``checkpoint="last"``.
    """
    if checkpoint not in ("best", "last"):
        raise InputError(f"checkpoint must be 'best' or 'last', got {checkpoint!r}")
    cfg_model = params0.config
    _check_set(train_set, "training", cfg_model.vocab_size)
    _check_set(valid_set, "validation", cfg_model.vocab_size)
    n = len(train_set)
    eps = np.zeros(n) if extra_weights is None else np.asarray(extra_weights, dtype=np.float64)
    if eps.shape != (n,):
        raise InputError(f"extra_weights must have one entry per training example ({n})")

    rows = _Rows(train_set, cfg_model.context_window)
    valid = _Rows(valid_set, cfg_model.context_window)
    gen = Rng(cfg.seed, stream=1).gen

    params = params0.copy()
    history = TrainHistory()
    best_theta = params.theta.copy()
    best_loss = np.inf

    def evaluate(step):
        nonlocal best_theta, best_loss
        v = valid.mean_loss(params)
        if not np.isfinite(v):
            raise DivergenceError(step, v)
        history.eval_steps.append(step)
        history.valid_losses.append(v)
        if v < best_loss:
            best_loss = v
            best_theta = params.theta.copy()
            history.best_step = step

    if cfg.optimizer == "adam":
        m = np.zeros_like(params.theta)
        s = np.zeros_like(params.theta)
        b1, b2 = cfg.adam_betas

    evaluate(0)
    step = 0
    for _ in range(cfg.epochs):
        perm = gen.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = perm[start:start + cfg.batch_size]
            idx = np.concatenate([rows.spans[k] for k in batch])
            owner = rows.owner[idx]
            w = 1.0 / len(batch) + eps[owner]
            value, grad, _ = forward_backward(params, rows.ctx[idx], rows.tgt[idx], w)
            step += 1
            if not np.isfinite(value) or not np.all(np.isfinite(grad.theta)):
                raise DivergenceError(step, value)
            history.train_losses.append(value)
            if cfg.optimizer == "sgd":
                params.theta -= cfg.learning_rate * grad.theta
            else:
                g = grad.theta
                m = b1 * m + (1 - b1) * g
                s = b2 * s + (1 - b2) * g * g
                mhat = m / (1 - b1 ** step)
                shat = s / (1 - b2 ** step)
                params.theta -= cfg.learning_rate * mhat / (np.sqrt(shat) + cfg.adam_eps)
            if step % cfg.eval_every_steps == 0:
                evaluate(step)
    if history.eval_steps[-1] != step:
        evaluate(step)
    if checkpoint == "last":
        return params, history
    return Params(cfg_model, best_theta), history

