"""Per-example gradient features and their on-disk cache.

A feature vector is the response-token-averaged gradient restricted to a set
of dense layers. Each layer contributes its combined ``[W | b]`` block of shape
``(out, in + 1)`` flattened column by column, so a single-token block
``g a^T`` flattens to ``kron(a, g)``. Layers are concatenated in selector order.
"""
from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gdig.errors import DegenerateInputError, FormatError, InputError, ShapeError
from gdig.numkit import worker_count
from gdig.toylm import ModelConfig, Params, backward

_MODES = {"explicit": 0, "stride": 1, "final_only": 2}
_MODE_NAMES = {v: k for k, v in _MODES.items()}


@dataclass(frozen=True)
class LayerSelector:
    mode: str
    layers: tuple

    def __post_init__(self):
        if self.mode not in _MODES:
            raise InputError(f"unknown selector mode {self.mode!r}")
        object.__setattr__(self, "layers", tuple(int(l) for l in self.layers))
        if not self.layers:
            raise InputError("layer selector is empty")
        if len(set(self.layers)) != len(self.layers):
            raise InputError(f"duplicate layers in selector {self.layers}")

    @classmethod
    def explicit(cls, layers):
        return cls("explicit", tuple(layers))

    @classmethod
    def stride(cls, config: ModelConfig, step: int = 3):
        """Every ``step``-th hidden layer starting at 0 ({0, 3} for four layers)."""
        return cls("stride", tuple(range(0, config.num_mlp_layers, step)))

    @classmethod
    def final_only(cls, config: ModelConfig):
        """The output head, i.e. the last dense layer of the network."""
        return cls("final_only", (config.head_index,))

    @classmethod
    def all_layers(cls, config: ModelConfig):
        return cls("explicit", tuple(range(config.num_mlp_layers + 1)))

    def validate(self, config: ModelConfig):
        for l in self.layers:
            if not 0 <= l <= config.head_index:
                raise InputError(f"layer {l} outside [0, {config.head_index}]")
        return self

    def dim(self, config: ModelConfig) -> int:
        return sum(config.layer_param_count(l) for l in self.validate(config).layers)

    def describe(self) -> str:
        return f"{self.mode}:{','.join(map(str, self.layers))}"

    @classmethod
    def parse(cls, text: str, config: ModelConfig) -> "LayerSelector":
        """Parse ``stride[:k]``, ``final_only``, ``all`` or ``explicit:0,3``."""
        text = text.strip()
        if text == "final_only":
            return cls.final_only(config)
        if text == "all":
            return cls.all_layers(config)
        if text.startswith("stride"):
            step = int(text.split(":", 1)[1]) if ":" in text else 3
            return cls.stride(config, step)
        if text.startswith("explicit:"):
            return cls.explicit(int(t) for t in text.split(":", 1)[1].split(",") if t.strip())
        raise InputError(f"cannot parse layer selector {text!r}")


@dataclass(frozen=True)
class FeatureVector:
    id: str
    values: np.ndarray


def flatten_blocks(blocks) -> np.ndarray:
    return np.concatenate([b.ravel(order="F") for b in blocks])


def split_blocks(vector, config: ModelConfig, sel: LayerSelector):
    """Inverse of :func:`flatten_blocks`: (out, in+1) blocks in selector order."""
    vector = np.asarray(vector)
    if vector.shape != (sel.dim(config),):
        raise ShapeError(f"vector of shape {vector.shape} does not match selector dim {sel.dim(config)}")
    out, pos = [], 0
    for l in sel.layers:
        o, i = config.layer_shapes()[l]
        size = o * (i + 1)
        out.append(vector[pos:pos + size].reshape((o, i + 1), order="F"))
        pos += size
    return out


def selected_gradient(params: Params, example, sel: LayerSelector):
    """Token-summed gradient of the selected layers, plus the token count."""
    sel.validate(params.config)
    grad, _ = backward(params, example, stats_layers=())
    return flatten_blocks([grad.layer_block(l) for l in sel.layers]), grad.token_count


def extract(params: Params, example, sel: LayerSelector) -> FeatureVector:
    """Token-averaged selected-layer gradient (64-bit)."""
    g, t = selected_gradient(params, example, sel)
    if t == 0:
        raise DegenerateInputError(f"example {example.id!r} has an empty response")
    return FeatureVector(example.id, g / t)


@dataclass
class GradCache:
    ids: list
    values: np.ndarray  # (count, dim) float32
    selector: LayerSelector

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.ids):
            raise ShapeError("cache values must be (count, dim) with one id per row")
        if len(set(self.ids)) != len(self.ids):
            raise InputError("cache ids are not unique")

    @property
    def count(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]

    def row(self, k) -> FeatureVector:
        return FeatureVector(self.ids[k], self.values[k].astype(np.float64))

    def features(self):
        return [self.row(k) for k in range(self.count)]


def _map_ordered(fn, items):
    workers = worker_count()
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def batch_extract(params: Params, data, sel: LayerSelector, path=None) -> GradCache:
    """Extract every example (rows in input order) and optionally write the cache."""
    sel.validate(params.config)
    for ex in data:
        if ex.n_response == 0:
            raise DegenerateInputError(f"example {ex.id!r} has an empty response")
    rows = _map_ordered(lambda ex: extract(params, ex, sel).values, list(data))
    values = np.stack(rows) if rows else np.zeros((0, sel.dim(params.config)))
    cache = GradCache([ex.id for ex in data], values, sel)
    if path is not None:
        write_cache(cache, path)
    return cache


# ---------------------------------------------------------------------------
# "GDIG" cache: magic, u32 version, u64 count, u64 dim, u8 mode, u16 n_layers,
# u16 layers..., float32 rows; ids in a JSONL sidecar.

_MAGIC = b"GDIG"
_VERSION = 1


def ids_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".ids.jsonl")


def write_cache(cache: GradCache, path):
    path = Path(path)
    header = _MAGIC + struct.pack("<IQQ", _VERSION, cache.count, cache.dim)
    header += struct.pack("<BH", _MODES[cache.selector.mode], len(cache.selector.layers))
    header += struct.pack(f"<{len(cache.selector.layers)}H", *cache.selector.layers)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(cache.values, dtype="<f4").tobytes())
        with open(ids_path(path), "w", encoding="utf-8") as fh:
            for k, i in enumerate(cache.ids):
                fh.write(json.dumps({"row": k, "id": i}, ensure_ascii=False) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write gradient cache {path}: {exc}") from exc


def read_cache(path) -> GradCache:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != _MAGIC:
        raise FormatError(f"{path}: not a GDIG gradient cache")
    version, count, dim = struct.unpack_from("<IQQ", data, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported cache version {version}")
    mode, n_layers = struct.unpack_from("<BH", data, 24)
    layers = struct.unpack_from(f"<{n_layers}H", data, 27)
    offset = 27 + 2 * n_layers
    values = np.frombuffer(data, dtype="<f4", offset=offset)
    if values.size != count * dim:
        raise FormatError(f"{path}: expected {count * dim} values, found {values.size}")
    ids = [None] * count
    with open(ids_path(path), encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                ids[rec["row"]] = rec["id"]
    if any(i is None for i in ids):
        raise FormatError(f"{ids_path(path)}: missing ids")
    sel = LayerSelector(_MODE_NAMES[mode], layers)
    return GradCache(ids, values.reshape(count, dim).astype(np.float32), sel)
