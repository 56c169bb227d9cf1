"""Resumable selection pipeline: finetune -> grads -> influence -> select.

Every stage has a hash derived from its settings, the content of its input
files and the hash of the stage before it. ``manifest.json`` in the output
directory records the hash each cached artifact was produced under; a stage
whose recorded hash differs is recomputed, and resuming past such a stage is a
:class:`CacheError`.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from gdig.config import PipelineConfig, file_hash, stable_hash
from gdig.curvature import accumulate, prepare_inverse, save_factors
from gdig.data import read_records, record_to_example, write_records
from gdig.errors import CacheError, GdigError, InputError, StageError
from gdig.finetune import train
from gdig.gradfeat import GradCache, LayerSelector, batch_extract, read_cache, write_cache
from gdig.influence import InfluenceMatrix, SeedSet, influence_matrix, load_matrix, save_matrix
from gdig.numkit import Rng
from gdig.select import (QualityCriterion, SelectionReport, default_k_clusters, default_proj_dim,
                         diversify_detailed, quality_filter)
from gdig.toylm import Params, init_params, load_params, save_params

log = logging.getLogger("gdig")

STAGES = ("finetune", "grads", "influence", "select")

ARTIFACTS = {
    "finetune": ("finetuned.gdlm", "history.json"),
    "grads": ("seeds.gdig", "candidates.gdig", "candidates_div.gdig"),
    "influence": ("factors.gkfc", "influence.bin"),
    "select": ("selected.jsonl", "report.json"),
}


def select_from_matrix(matrix: InfluenceMatrix, div_cache: GradCache, quality: QualityCriterion,
                       n_select: int, k_clusters: int = 0, proj_dim: int = 0, seed: int = 0,
                       config: dict | None = None):
    """Quality filter on ``matrix`` then diversify the survivors; returns (report, Diversified)."""
    passed = quality_filter(matrix, quality)
    if n_select > len(passed):
        raise StageError("quality_filter", InputError(
            f"n_select={n_select} exceeds the {len(passed)} candidates that pass the quality filter"))
    row = {i: k for k, i in enumerate(div_cache.ids)}
    feats = [div_cache.row(row[i]) for i in passed]
    k = k_clusters or default_k_clusters(len(passed))
    dim = proj_dim or default_proj_dim(div_cache.dim)
    div = diversify_detailed(feats, n_select, k, dim, Rng(seed))
    cluster_of = {i: int(c) for i, c in zip(passed, div.clusters.labels)}
    report = SelectionReport(list(passed), cluster_of, div.ids, dict(div.takes),
                             {**(config or {}), "k_clusters": k, "proj_dim": dim,
                              "quality_mode": quality.mode, "tau": quality.tau})
    return report, div


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg.check_paths()
        self.out = Path(cfg.out_dir)
        self.hashes = self._stage_hashes()
        self._records = None

    # -- bookkeeping -------------------------------------------------------
    def _stage_hashes(self) -> dict:
        c = self.cfg
        d = c.data
        h_ft = stable_hash("finetune", asdict(c.model), asdict(c.init), asdict(c.train),
                           file_hash(d.candidates), file_hash(d.valid),
                           file_hash(d.base_params) if d.base_params else None)
        h_gr = stable_hash("grads", h_ft, c.influence.selector, c.influence.n_seeds,
                           c.diversity.selector, file_hash(d.seeds))
        h_in = stable_hash("influence", h_gr, c.influence.damping)
        h_se = stable_hash("select", h_in, c.influence.quality_mode, c.influence.tau,
                           c.diversity.n_select, c.diversity.k_clusters, c.diversity.proj_dim,
                           c.diversity.seed)
        return dict(zip(STAGES, (h_ft, h_gr, h_in, h_se)))

    @property
    def manifest_path(self) -> Path:
        return self.out / "manifest.json"

    def _manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {}
        try:
            return json.loads(self.manifest_path.read_text(encoding="utf-8")).get("stages", {})
        except (json.JSONDecodeError, AttributeError):
            raise CacheError(f"{self.manifest_path}: unreadable manifest") from None

    def _record(self, stage):
        stages = self._manifest()
        stages[stage] = {"hash": self.hashes[stage], "artifacts": list(ARTIFACTS[stage])}
        self.manifest_path.write_text(json.dumps({"stages": stages}, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")

    def is_fresh(self, stage) -> bool:
        entry = self._manifest().get(stage)
        return (entry is not None and entry.get("hash") == self.hashes[stage]
                and all((self.out / a).exists() for a in ARTIFACTS[stage]))

    def require_fresh(self, stage):
        entry = self._manifest().get(stage)
        if entry is None or not all((self.out / a).exists() for a in ARTIFACTS[stage]):
            raise CacheError(f"no cached output for stage '{stage}' in {self.out}; run it first")
        if entry.get("hash") != self.hashes[stage]:
            raise CacheError(f"cached output of stage '{stage}' was built under a different "
                             f"configuration (hash {entry.get('hash', '?')[:12]} != {self.hashes[stage][:12]})")

    # -- data --------------------------------------------------------------
    def _load(self, name):
        path = getattr(self.cfg.data, name)
        recs = read_records(path)
        return recs, [record_to_example(r, path) for r in recs]

    @property
    def candidates(self):
        if self._records is None:
            self._records = self._load("candidates")
        return self._records

    def seed_examples(self):
        _, ex = self._load("seeds")
        return ex[:self.cfg.influence.n_seeds]

    def selectors(self):
        m = self.cfg.model
        return (LayerSelector.parse(self.cfg.influence.selector, m),
                LayerSelector.parse(self.cfg.diversity.selector, m))

    def base_params(self) -> Params:
        c = self.cfg
        if c.data.base_params:
            p = load_params(c.data.base_params)
            if p.config != c.model:
                raise InputError(f"base params {c.data.base_params} have config {p.config}, expected {c.model}")
            return p
        return init_params(c.model, Rng(c.init.init_seed), c.init.init_scale)

    # -- stages ------------------------------------------------------------
    def stage_finetune(self):
        _, cands = self.candidates
        _, valid = self._load("valid")
        params, hist = train(self.base_params(), cands, valid, self.cfg.train)
        save_params(params, self.out / "finetuned.gdlm")
        (self.out / "history.json").write_text(hist.to_json(config_hash=self.hashes["finetune"]) + "\n",
                                               encoding="utf-8")

    def stage_grads(self):
        params = load_params(self.out / "finetuned.gdlm")
        _, cands = self.candidates
        sel_inf, sel_div = self.selectors()
        batch_extract(params, self.seed_examples(), sel_inf, self.out / "seeds.gdig")
        inf = batch_extract(params, cands, sel_inf, self.out / "candidates.gdig")
        if sel_div == sel_inf:
            write_cache(inf, self.out / "candidates_div.gdig")
        else:
            batch_extract(params, cands, sel_div, self.out / "candidates_div.gdig")

    def stage_influence(self):
        params = load_params(self.out / "finetuned.gdlm")
        _, cands = self.candidates
        sel_inf, _ = self.selectors()
        factors = accumulate(cands, params, sel_inf)
        save_factors(factors, self.out / "factors.gkfc")
        inv = prepare_inverse(factors, self.cfg.influence.damping)
        seeds = SeedSet.from_cache(read_cache(self.out / "seeds.gdig"))
        matrix = influence_matrix(inv, seeds, read_cache(self.out / "candidates.gdig"))
        save_matrix(matrix, self.out / "influence.bin", config_hash=self.hashes["influence"])

    def stage_select(self) -> SelectionReport:
        c = self.cfg
        matrix = load_matrix(self.out / "influence.bin")
        div_cache = read_cache(self.out / "candidates_div.gdig")
        settings = {"config_hash": self.hashes["select"], "damping": c.influence.damping,
                    "influence_selector": c.influence.selector, "diversity_selector": c.diversity.selector,
                    "n_seeds": len(matrix.seed_ids), "n_candidates": len(matrix.candidate_ids),
                    "n_select": c.diversity.n_select, "seed": c.diversity.seed}
        report, _ = select_from_matrix(matrix, div_cache, QualityCriterion(c.influence.quality_mode,
                                                                           c.influence.tau),
                                       c.diversity.n_select, c.diversity.k_clusters, c.diversity.proj_dim,
                                       c.diversity.seed, settings)
        recs, _ = self.candidates
        by_id = {str(r["id"]): r for r in recs}
        write_records([by_id[i] for i in report.selected_ids], self.out / "selected.jsonl")
        (self.out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
        return report

    # -- driver ------------------------------------------------------------
    def run(self, start: str | None = None, only: bool = False):
        """Run from ``start`` (default: the first stale stage) to the end, or just ``start`` if ``only``.

        Stages before ``start`` must have fresh cached outputs. Without ``start``
        fresh stages are skipped. Returns the SelectionReport when the select
        stage ran or was cached, else None.
        """
        if start is not None and start not in STAGES:
            raise InputError(f"unknown stage {start!r}; expected one of {', '.join(STAGES)}")
        self.out.mkdir(parents=True, exist_ok=True)
        first = STAGES.index(start) if start else 0
        last = first if only else len(STAGES) - 1
        for stage in STAGES[:first]:
            self.require_fresh(stage)
        for k in range(first, last + 1):
            stage = STAGES[k]
            forced = start is not None and k == first
            if not forced and self.is_fresh(stage):
                log.info("stage %s: cached (%s)", stage, self.hashes[stage][:12])
                continue
            t0 = time.perf_counter()
            try:
                getattr(self, "stage_" + stage)()
            except StageError:
                raise
            except (GdigError, OSError) as exc:
                raise StageError(stage, exc) from exc
            self._record(stage)
            log.info("stage %s: done in %.2fs", stage, time.perf_counter() - t0)
        if last == len(STAGES) - 1 or self.is_fresh("select"):
            text = (self.out / "report.json").read_text(encoding="utf-8")
            return SelectionReport.from_json(text)
        return None


def run_pipeline(cfg: PipelineConfig, start=None, only=False):
    return Pipeline(cfg).run(start, only)


def corrupted_fraction(ids, flags_by_id: dict) -> float:
    """Share of ``ids`` flagged as corrupted (nan when ``ids`` is empty)."""
    ids = list(ids)
    if not ids:
        return float("nan")
    return float(np.mean([flags_by_id[i] for i in ids]))
