"""Evaluation: greedy decoding, token accuracy, corpus BLEU and a paired t-test."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import betainc

from gdig.errors import InputError
from gdig.numkit import as_rng
from gdig.toylm import EOS, PAD, Example, Params, detokenize, example_rows, logits

MAX_NEW_TOKENS = 64


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses, references, max_n: int = 4) -> float:
    """Corpus BLEU on whitespace tokens, in [0, 100].

    The unigram precision is unsmoothed; higher orders use add-one smoothing
    ``(m + 1) / (c + 1)``. The brevity penalty compares total lengths.
    """
    hypotheses, references = list(hypotheses), list(references)
    if len(hypotheses) != len(references):
        raise InputError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise InputError("bleu needs at least one pair")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hypotheses, references):
        ht, rt = h.split(), r.split()
        hyp_len += len(ht)
        ref_len += len(rt)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(ht, n), _ngrams(rt, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(ht) - n + 1, 0)
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_p = math.log(matches[0] / totals[0])
    for n in range(1, max_n):
        log_p += math.log((matches[n] + 1) / (totals[n] + 1))
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p / max_n)


def paired_t_test(a, b):
    """Two-sided paired t-test on ``a - b``; returns (t, p).

    Identical samples give (0, 1). A constant non-zero difference has zero
    variance and returns (+-inf, 0).
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InputError("paired samples must be 1-D and of equal length")
    n = len(a)
    if n < 2:
        raise InputError("paired t-test needs at least two pairs")
    d = a - b
    if np.all(d == 0):
        return 0.0, 1.0
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    df = n - 1
    p = float(betainc(df / 2, 0.5, df / (df + t * t)))
    return float(t), min(p, 1.0)


def _argmax(row, gen):
    best = np.flatnonzero(row == row.max())
    return int(best[0]) if len(best) == 1 else int(best[gen.integers(len(best))])


def greedy_decode(params: Params, prompt_tokens, max_new_tokens: int = MAX_NEW_TOKENS, rng=0) -> list:
    """Free-running argmax decoding until EOS; ties broken by the seeded rng."""
    gen = as_rng(rng).gen
    cw = params.config.context_window
    seq = list(prompt_tokens)
    out = []
    for _ in range(max_new_tokens):
        ctx = ([PAD] * cw + seq)[-cw:]
        tok = _argmax(logits(params, np.array([ctx]))[0], gen)
        if tok == EOS:
            break
        out.append(tok)
        seq.append(tok)
    return out


def token_accuracy(params: Params, example: Example, rng=0) -> float:
    """Teacher-forced share of response positions whose argmax equals the reference."""
    if example.n_response == 0:
        raise InputError(f"example {example.id!r} has an empty response")
    gen = as_rng(rng).gen
    ctx, tgt = example_rows(example, params.config.context_window)
    out = logits(params, ctx)
    hits = sum(_argmax(row, gen) == t for row, t in zip(out, tgt))
    return hits / len(tgt)


def _text(tokens) -> str:
    return detokenize(tokens).decode("utf-8", errors="replace")


@dataclass
class EvalReport:
    token_accuracy: float
    bleu: float
    per_example: list
    ttest: dict | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.token_accuracy <= 1.0:
            raise InputError("accuracy outside [0, 1]")
        if not 0.0 <= self.bleu <= 100.0:
            raise InputError("bleu outside [0, 100]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def evaluate(params: Params, test_set, rng=0, max_new_tokens: int = MAX_NEW_TOKENS) -> EvalReport:
    """Token accuracy (mean over all response tokens) and BLEU of greedy outputs."""
    if not test_set:
        raise InputError("test set is empty")
    rng = as_rng(rng)
    per, hyps, refs = [], [], []
    hits = total = 0
    for k, ex in enumerate(test_set):
        acc = token_accuracy(params, ex, rng.child(2 * k))
        hits += acc * ex.n_response
        total += ex.n_response
        hyp = _text(greedy_decode(params, ex.prompt_tokens, max_new_tokens, rng.child(2 * k + 1)))
        ref = _text(ex.response_tokens)
        hyps.append(hyp)
        refs.append(ref)
        per.append({"id": ex.id, "token_accuracy": acc, "hypothesis": hyp, "reference": ref})
    return EvalReport(hits / total, bleu(hyps, refs), per)
