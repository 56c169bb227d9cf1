"""Command-line entry point: ``gdig <command> --config PATH [--stage S] [--out DIR] [--seed N]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from gdig.config import PipelineConfig, load_config
from gdig.data import read_examples
from gdig.errors import GdigError, InputError
from gdig.metrics import EvalReport, evaluate, paired_t_test
from gdig.oracle import QuadraticProblem, gd_vs_ridge_check, quadratic_influence_experiment, \
    toylm_influence_experiment
from gdig.pipeline import STAGES, Pipeline
from gdig.toylm import Params, load_params

def cmd_pipeline(cfg: PipelineConfig, stage=None):
    report = Pipeline(cfg).run(stage)
    print(f"selected {len(report.selected_ids)} of {len(report.quality_pass_ids)} quality-pass candidates "
          f"-> {Path(cfg.out_dir) / 'selected.jsonl'}")
    return report


def cmd_stage(cfg: PipelineConfig, stage: str):
    Pipeline(cfg).run(stage, only=True)
    print(f"stage {stage} done -> {cfg.out_dir}")


def cmd_evaluate(params_path, test_path, seed: int = 0, baseline: Params | None = None) -> EvalReport:
    """Greedy-decoding evaluation; with ``baseline`` adds a paired t-test on per-example accuracy."""
    params = load_params(params_path)
    test = read_examples(test_path)
    report = evaluate(params, test, rng=seed)
    if baseline is not None:
        other = evaluate(baseline, test, rng=seed)
        t, p = paired_t_test([e["token_accuracy"] for e in report.per_example],
                             [e["token_accuracy"] for e in other.per_example])
        report.ttest = {"t": t, "p": p, "baseline_token_accuracy": other.token_accuracy,
                        "baseline_bleu": other.bleu}
    report.meta = {"params": Path(params_path).name, "test": Path(test_path).name, "seed": seed}
    return report


def _evaluate(cfg: PipelineConfig, seed: int):
    if not cfg.data.test:
        raise InputError("[data] test is required for evaluate")
    pipe = Pipeline(cfg)
    pipe.require_fresh("finetune")
    report = cmd_evaluate(pipe.out / "finetuned.gdlm", cfg.data.test, seed, pipe.base_params())
    path = pipe.out / "eval.json"
    path.write_text(report.to_json() + "\n", encoding="utf-8")
    msg = f"token accuracy {report.token_accuracy:.4f}  BLEU {report.bleu:.2f}"
    if report.ttest:
        msg += f"  vs base: t={report.ttest['t']:.3f} p={report.ttest['p']:.3g}"
    print(msg + f" -> {path}")


def cmd_oracle(out_dir, seed: int = 0) -> dict:
    """Influence-vs-retraining correlations and the GD/ridge equivalence, as a JSON report."""
    quad = quadratic_influence_experiment(seed=seed)
    toy = toylm_influence_experiment(seed=seed)
    eigs = [2.0, 1.0, 0.5, 0.1, 0.01]
    ridge = {name: gd_vs_ridge_check(QuadraticProblem.make(eigs, seed, rotate), 0.4, 25)
             for name, rotate in (("diagonal", False), ("rotated", True))}
    report = {
        "quadratic": {"pearson": quad.pearson, "eps": quad.eps,
                      "delta": quad.deltas.tolist(), "predicted": quad.predicted.tolist()},
        "toylm": {"spearman": toy.spearman, "pearson": toy.pearson, "eps": toy.eps, "damping": toy.damping,
                  "delta": toy.deltas.tolist(), "predicted": toy.predicted.tolist()},
        "gd_vs_ridge_max_error": ridge,
        "seed": seed,
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "oracle.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"quadratic pearson {quad.pearson:.4f}  toy-LM spearman {toy.spearman:.4f}  "
          f"gd/ridge max error {max(ridge.values()):.2e} -> {out / 'oracle.json'}")
    return report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gdig", description="Influence-based data selection on a toy LM.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("finetune", "grads", "influence", "select", "pipeline", "evaluate", "oracle"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI config file")
        p.add_argument("--out", help="output directory (overrides [output] dir)")
        p.add_argument("--seed", type=int, help="override every rng seed")
        if name == "pipeline":
            p.add_argument("--stage", choices=STAGES, help="resume from this stage")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.out:
            cfg = replace(cfg, out_dir=str(Path(args.out).resolve()))
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.command == "pipeline":
            cmd_pipeline(cfg, args.stage)
        elif args.command in STAGES:
            cmd_stage(cfg, args.command)
        elif args.command == "evaluate":
            _evaluate(cfg, cfg.train.seed)
        else:
            cmd_oracle(cfg.out_dir, cfg.train.seed)
    except GdigError as exc:
        print(f"{exc.code}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"E_IO: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
