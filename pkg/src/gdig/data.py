"""JSONL dataset records.

Two record shapes are accepted, one object per line:

* text: ``{"id", "src", "tgt", "trg_lang"}``; the prompt is rendered at load time
* pre-tokenized: ``{"id", "prompt_tokens", "response_tokens"}``
"""
from __future__ import annotations

import json
from pathlib import Path

from gdig.errors import FormatError
from gdig.toylm import VOCAB_SIZE, Example

_TEXT_KEYS = ("src", "tgt")
_TOKEN_KEYS = ("prompt_tokens", "response_tokens")


def record_to_example(rec: dict, where: str = "record") -> Example:
    if not isinstance(rec, dict):
        raise FormatError(f"{where}: expected a JSON object")
    if "id" not in rec:
        raise FormatError(f"{where}: missing 'id'")
    if all(k in rec for k in _TEXT_KEYS):
        if not all(isinstance(rec[k], str) for k in _TEXT_KEYS):
            raise FormatError(f"{where}: 'src' and 'tgt' must be strings")
        return Example.from_text(rec["id"], rec["src"], rec["tgt"], rec.get("trg_lang", "English"))
    if all(k in rec for k in _TOKEN_KEYS):
        for k in _TOKEN_KEYS:
            toks = rec[k]
            if not isinstance(toks, list) or not all(isinstance(t, int) and 0 <= t < VOCAB_SIZE for t in toks):
                raise FormatError(f"{where}: '{k}' must be a list of token ids in [0, {VOCAB_SIZE})")
        return Example(str(rec["id"]), rec["prompt_tokens"], rec["response_tokens"])
    raise FormatError(f"{where}: record needs either src/tgt or prompt_tokens/response_tokens")


def read_records(path) -> list:
    """Raw dicts of a JSONL file; blank lines are skipped, errors name the line."""
    path = Path(path)
    out, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            record_to_example(rec, f"{path}:{lineno}")
            if str(rec["id"]) in seen:
                raise FormatError(f"{path}:{lineno}: duplicate id {rec['id']!r}")
            seen.add(str(rec["id"]))
            out.append(rec)
    return out


def read_examples(path) -> list:
    path = Path(path)
    return [record_to_example(r, str(path)) for r in read_records(path)]


def write_records(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
