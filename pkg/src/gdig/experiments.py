"""Planted-noise experiments on the cipher corpus.

A windowed model only learns the cipher when the source letter is inside its
context, so these experiments use a wider window than the default toy model
and start from a base pretrained on clean cipher pairs (the stand-in for a
pretrained backbone). The base is then finetuned on the noisy candidate pool
and influence is computed at the finetuned parameters.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from gdig.curvature import DEFAULT_DAMPING, accumulate, prepare_inverse
from gdig.errors import StageError
from gdig.finetune import TrainConfig, train
from gdig.gradfeat import LayerSelector, batch_extract
from gdig.influence import DEFAULT_SEED_SIZE, InfluenceMatrix, SeedSet, influence_matrix
from gdig.metrics import paired_t_test, token_accuracy
from gdig.numkit import Rng
from gdig.oracle import NoiseSpec, make_noisy_corpus
from gdig.pipeline import select_from_matrix
from gdig.select import QualityCriterion, quality_filter
from gdig.toylm import ModelConfig, Params, init_params

log = logging.getLogger("gdig")

CIPHER_MODEL = ModelConfig(context_window=20)
PRETRAIN = TrainConfig(learning_rate=2e-3, epochs=20, batch_size=32, eval_every_steps=10**9, optimizer="adam")
FINETUNE = TrainConfig(learning_rate=1e-3, epochs=3, batch_size=64, eval_every_steps=10, optimizer="adam")
FALLBACK_TAU = 0.9


@dataclass
class PlantedNoiseSetup:
    base: Params
    finetuned: Params
    candidates: list
    flags: np.ndarray
    seeds: list
    valid: list
    test: list


def build_setup(seed: int = 0, n_pool: int = 500, noise_rate: float = 0.10, n_seeds: int = DEFAULT_SEED_SIZE,
                n_pretrain: int = 5000, n_valid: int = 100, n_test: int = 200) -> PlantedNoiseSetup:
    """Corpora from disjoint rng streams, a clean-pretrained base and its finetune on the pool."""
    def corpus(n, rate, stream, prefix):
        return make_noisy_corpus(NoiseSpec(n, rate, 1000 * seed + stream, id_prefix=prefix))

    pretrain, _ = corpus(n_pretrain, 0.0, 1, "p")
    candidates, flags = corpus(n_pool, noise_rate, 2, "c")
    seeds, _ = corpus(n_seeds, 0.0, 3, "s")
    valid, _ = corpus(n_valid, 0.0, 4, "v")
    test, _ = corpus(n_test, 0.0, 5, "t")
    p0 = init_params(CIPHER_MODEL, Rng(seed), 1.0)
    base, _ = train(p0, pretrain, valid, replace(PRETRAIN, seed=seed), checkpoint="last")
    finetuned, _ = train(base, candidates, valid, replace(FINETUNE, seed=seed))
    return PlantedNoiseSetup(base, finetuned, candidates, np.asarray(flags), seeds, valid, test)


def influence_on_pool(setup: PlantedNoiseSetup, selector: str = "stride:3",
                      damping: float = DEFAULT_DAMPING) -> InfluenceMatrix:
    sel = LayerSelector.parse(selector, CIPHER_MODEL)
    inv = prepare_inverse(accumulate(setup.candidates, setup.finetuned, sel), damping)
    seeds = SeedSet.from_cache(batch_extract(setup.finetuned, setup.seeds, sel))
    return influence_matrix(inv, seeds, batch_extract(setup.finetuned, setup.candidates, sel))


def filter_with_fallback(matrix: InfluenceMatrix):
    """Strict filter; fraction mode at tau=0.9 when strict keeps nothing."""
    crit = QualityCriterion()
    passed = quality_filter(matrix, crit)
    if not passed:
        crit = QualityCriterion("fraction", FALLBACK_TAU)
        passed = quality_filter(matrix, crit)
    return passed, crit


@dataclass
class QualityResult:
    criterion: QualityCriterion
    survivors: list
    corrupted_fraction: float      # nan when nothing survives
    base_rate: float
    neg_share_clean: float         # mean share of negative scores per candidate
    neg_share_corrupted: float
    auc: float                     # P(mean score of clean < mean score of corrupted)


def quality_experiment(setup: PlantedNoiseSetup, selector: str = "stride:3",
                       damping: float = DEFAULT_DAMPING) -> QualityResult:
    m = influence_on_pool(setup, selector, damping)
    passed, crit = filter_with_fallback(m)
    flags = setup.flags
    row = {i: k for k, i in enumerate(m.candidate_ids)}
    frac = float(np.mean([flags[row[i]] for i in passed])) if passed else float("nan")
    neg = (m.scores < 0).mean(axis=1)
    mean = m.scores.mean(axis=1)
    clean, bad = mean[~flags], mean[flags]
    auc = float((clean[:, None] < bad[None, :]).mean()) if len(bad) and len(clean) else float("nan")
    return QualityResult(crit, passed, frac, float(flags.mean()), float(neg[~flags].mean()),
                         float(neg[flags].mean()), auc)


@dataclass
class DirectionalResult:
    gdig: list = field(default_factory=list)     # held-out token accuracy per seed
    random: list = field(default_factory=list)
    t: float = float("nan")
    p: float = float("nan")
    error: str = ""

    @property
    def gap(self) -> float:
        return float(np.mean(self.gdig) - np.mean(self.random)) if self.gdig else float("nan")


def held_out_accuracy(params: Params, test) -> float:
    hits = total = 0
    for k, ex in enumerate(test):
        hits += token_accuracy(params, ex, rng=k) * ex.n_response
        total += ex.n_response
    return hits / total


def directional_experiment(setup: PlantedNoiseSetup, n_select: int = 256, seeds=(0, 1, 2),
                           selector: str = "stride:3", damping: float = DEFAULT_DAMPING) -> DirectionalResult:
    """Finetune the base on a G-DIG subset and on a random subset, per seed."""
    res = DirectionalResult()
    matrix = influence_on_pool(setup, selector, damping)
    div_cache = batch_extract(setup.finetuned, setup.candidates, LayerSelector.final_only(CIPHER_MODEL))
    _, crit = filter_with_fallback(matrix)
    by_id = {ex.id: ex for ex in setup.candidates}
    n = len(setup.candidates)
    for s in seeds:
        try:
            report, _ = select_from_matrix(matrix, div_cache, crit, n_select, seed=s)
        except StageError as exc:
            res.error = str(exc)
            return res
        gdig_set = [by_id[i] for i in report.selected_ids]
        rand_set = [setup.candidates[i] for i in Rng(s, stream=11).gen.choice(n, n_select, replace=False)]
        cfg = replace(FINETUNE, seed=s)
        for subset, out in ((gdig_set, res.gdig), (rand_set, res.random)):
            params, _ = train(setup.base, subset, setup.valid, cfg)
            out.append(held_out_accuracy(params, setup.test))
        log.info("seed %d: gdig %.4f random %.4f", s, res.gdig[-1], res.random[-1])
    res.t, res.p = paired_t_test(res.gdig, res.random)
    return res
