"""Pipeline configuration read from an INI file (``[section]`` + ``key = value``).

Relative paths are resolved against the directory holding the config file.

    [data]        candidates, seeds, valid, test (optional), base_params (optional)
    [model]       embed_dim, context_window, hidden_dim, num_mlp_layers, init_scale, init_seed
    [train]       learning_rate, epochs, batch_size, eval_every_steps, optimizer, seed
    [influence]   damping, selector, n_seeds, quality_mode, tau
    [diversity]   selector, k_clusters, proj_dim, n_select, seed
    [output]      dir
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path

from gdig.curvature import DEFAULT_DAMPING
from gdig.errors import InputError
from gdig.finetune import TrainConfig
from gdig.influence import DEFAULT_SEED_SIZE
from gdig.toylm import ModelConfig


@dataclass(frozen=True)
class DataConfig:
    candidates: str
    seeds: str
    valid: str
    test: str = ""
    base_params: str = ""


@dataclass(frozen=True)
class InitConfig:
    init_scale: float = 1.0
    init_seed: int = 0


@dataclass(frozen=True)
class InfluenceConfig:
    damping: float = DEFAULT_DAMPING
    selector: str = "stride:3"
    n_seeds: int = DEFAULT_SEED_SIZE
    quality_mode: str = "strict"
    tau: float = 1.0

    def __post_init__(self):
        if not self.damping > 0:
            raise InputError("influence.damping must be > 0")
        if self.n_seeds < 1:
            raise InputError("influence.n_seeds must be >= 1")


@dataclass(frozen=True)
class DiversityConfig:
    n_select: int = 256
    selector: str = "final_only"
    k_clusters: int = 0        # 0: min(512, pool // 4)
    proj_dim: int = 0          # 0: min(400, feature dim)
    seed: int = 0

    def __post_init__(self):
        if self.n_select < 1 or self.k_clusters < 0 or self.proj_dim < 0:
            raise InputError("diversity.n_select must be >= 1; k_clusters, proj_dim >= 0")


@dataclass(frozen=True)
class PipelineConfig:
    data: DataConfig
    model: ModelConfig = field(default_factory=ModelConfig)
    init: InitConfig = field(default_factory=InitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    influence: InfluenceConfig = field(default_factory=InfluenceConfig)
    diversity: DiversityConfig = field(default_factory=DiversityConfig)
    out_dir: str = "out"

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Override every rng seed at once (the CLI ``--seed`` flag)."""
        return replace(self, init=replace(self.init, init_seed=seed),
                       train=replace(self.train, seed=seed),
                       diversity=replace(self.diversity, seed=seed))

    def check_paths(self):
        for name in ("candidates", "seeds", "valid", "test", "base_params"):
            p = getattr(self.data, name)
            if p and not Path(p).is_file():
                raise InputError(f"data.{name}: file not found: {p}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _convert(cls, section: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, raw in section.items():
        if key not in known:
            raise InputError(f"[{where}] unknown key {key!r}")
        default = known[key].default
        kind = str if default is MISSING else type(default)
        try:
            if kind is bool:
                kwargs[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif kind is tuple:
                kwargs[key] = tuple(float(x) for x in raw.split(","))
            else:
                kwargs[key] = kind(raw.strip())
        except ValueError:
            raise InputError(f"[{where}] {key} = {raw!r} is not a valid {kind.__name__}") from None
    return kwargs


_SECTIONS = ("data", "model", "train", "influence", "diversity", "output")


def parse_config(text: str, base_dir=".") -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise InputError(f"cannot parse config: {exc}") from None
    for s in parser.sections():
        if s not in _SECTIONS:
            raise InputError(f"unknown config section [{s}]")
    sec = {s: dict(parser[s]) if parser.has_section(s) else {} for s in _SECTIONS}
    base = Path(base_dir)

    def resolve(p):
        return str((base / p).resolve()) if p else ""

    data_kw = _convert(DataConfig, sec["data"], "data")
    for req in ("candidates", "seeds", "valid"):
        if req not in data_kw:
            raise InputError(f"[data] missing required key {req!r}")
    data = DataConfig(**{k: resolve(v) for k, v in data_kw.items()})

    model_sec = dict(sec["model"])
    init_kw = _convert(InitConfig, {k: model_sec.pop(k) for k in list(model_sec) if k in ("init_scale", "init_seed")},
                       "model")
    model = ModelConfig(**_convert(ModelConfig, model_sec, "model"))
    train = TrainConfig(**_convert(TrainConfig, sec["train"], "train"))
    influence = InfluenceConfig(**_convert(InfluenceConfig, sec["influence"], "influence"))
    diversity = DiversityConfig(**_convert(DiversityConfig, sec["diversity"], "diversity"))
    out = sec["output"]
    if set(out) - {"dir"}:
        raise InputError(f"[output] unknown keys {sorted(set(out) - {'dir'})}")
    return PipelineConfig(data, model, InitConfig(**init_kw), train, influence, diversity,
                          resolve(out.get("dir", "out")))


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path.parent)


def stable_hash(*parts) -> str:
    """sha256 over the canonical JSON of ``parts``."""
    blob = json.dumps(parts, sort_keys=True, default=str, ensure_ascii=False).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
