"""Windowed-MLP autoregressive language model with hand-written backprop.

Each position is predicted from the embeddings of the previous ``context_window``
tokens (left-padded with PAD), passed through ``num_mlp_layers`` tanh dense
layers and a linear output head. Because every predicted position depends only
on its own window, a batch is just a stack of (context, target) rows.

Dense layers are numbered ``0 .. L-1``; index ``L`` denotes the output head.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gdig.errors import FormatError, InputError
from gdig.numkit import as_rng

VOCAB_SIZE = 259
BOS, EOS, PAD = 256, 257, 258

PROMPT_TEMPLATE = 'Translate the following text into {trg_lang}.\n\nText:\n"{src_text}"'


def render_prompt(src_text: str, trg_lang: str) -> str:
    # plain concatenation: the source is embedded verbatim, no escaping
    return 'Translate the following text into ' + trg_lang + '.\n\nText:\n"' + src_text + '"'


def tokenize(text) -> list[int]:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(bytes(text))


def detokenize(tokens) -> bytes:
    """Bytes of the non-special tokens; BOS/EOS/PAD are dropped."""
    return bytes(t for t in tokens if t < 256)


@dataclass(frozen=True)
class Example:
    id: str
    prompt_tokens: tuple
    response_tokens: tuple

    def __post_init__(self):
        object.__setattr__(self, "prompt_tokens", tuple(int(t) for t in self.prompt_tokens))
        object.__setattr__(self, "response_tokens", tuple(int(t) for t in self.response_tokens))

    @classmethod
    def from_text(cls, id, src_text, tgt_text, trg_lang="English"):
        prompt = [BOS] + tokenize(render_prompt(src_text, trg_lang))
        return cls(str(id), prompt, tokenize(tgt_text) + [EOS])

    @property
    def n_response(self) -> int:
        return len(self.response_tokens)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    embed_dim: int = 16
    context_window: int = 8
    hidden_dim: int = 32
    num_mlp_layers: int = 4
    activation: str = "tanh"

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "context_window", "hidden_dim", "num_mlp_layers"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be >= 1")
        if self.activation != "tanh":
            raise InputError("only the tanh activation is supported")

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(out, in) of every dense layer, output head last."""
        c, h = self.context_window * self.embed_dim, self.hidden_dim
        shapes = [(h, c)] + [(h, h)] * (self.num_mlp_layers - 1)
        return shapes + [(self.vocab_size, h)]

    @property
    def head_index(self) -> int:
        return self.num_mlp_layers

    def layer_param_count(self, layer: int) -> int:
        out, inp = self.layer_shapes()[layer]
        return out * (inp + 1)

    @property
    def n_params(self) -> int:
        return self.vocab_size * self.embed_dim + sum(o * (i + 1) for o, i in self.layer_shapes())

    def offsets(self):
        """Slices into the flat parameter vector: ('emb', s) then ('W', l, s), ('b', l, s)."""
        out = []
        pos = self.vocab_size * self.embed_dim
        out.append(("emb", None, slice(0, pos)))
        for l, (o, i) in enumerate(self.layer_shapes()):
            out.append(("W", l, slice(pos, pos + o * i)))
            pos += o * i
            out.append(("b", l, slice(pos, pos + o)))
            pos += o
        return out


class Params:
    """Model parameters stored as one flat float64 vector (declaration order)."""

    def __init__(self, config: ModelConfig, theta=None):
        self.config = config
        if theta is None:
            theta = np.zeros(config.n_params)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (config.n_params,):
            raise InputError(f"expected {config.n_params} parameters, got {theta.shape}")
        self.theta = theta
        self._slices = {(kind, l): s for kind, l, s in config.offsets()}

    @property
    def embedding(self):
        c = self.config
        return self.theta[self._slices[("emb", None)]].reshape(c.vocab_size, c.embed_dim)

    def weight(self, layer):
        o, i = self.config.layer_shapes()[layer]
        return self.theta[self._slices[("W", layer)]].reshape(o, i)

    def bias(self, layer):
        return self.theta[self._slices[("b", layer)]]

    def copy(self) -> "Params":
        return Params(self.config, self.theta.copy())

    def __eq__(self, other):
        return (isinstance(other, Params) and self.config == other.config
                and np.array_equal(self.theta, other.theta))


def init_params(config: ModelConfig, rng, init_scale: float = 1.0) -> Params:
    gen = as_rng(rng).gen
    p = Params(config)
    p.embedding[:] = gen.standard_normal(p.embedding.shape)
    for l, (o, i) in enumerate(config.layer_shapes()):
        p.weight(l)[:] = init_scale * gen.standard_normal((o, i)) / np.sqrt(i)
    return p


@dataclass
class PerExampleGradient:
    """Gradient in the flat parameter layout plus the response-token count."""

    params_like: Params
    token_count: int

    @property
    def flat(self):
        return self.params_like.theta

    def layer_block(self, layer):
        """Combined [W | b] gradient, shape (out, in + 1)."""
        p = self.params_like
        return np.concatenate([p.weight(layer), p.bias(layer)[:, None]], axis=1)


@dataclass
class KfacStats:
    """Per selected layer: a (tokens x in+1, homogeneous 1 last), g (tokens x out)."""

    a: dict = field(default_factory=dict)
    g: dict = field(default_factory=dict)

    @property
    def layers(self):
        return sorted(self.a)


def example_rows(example: Example, context_window: int):
    """Context windows and targets for every response position of ``example``."""
    seq = np.asarray(example.prompt_tokens + example.response_tokens, dtype=np.int64)
    t = len(example.response_tokens)
    if t == 0:
        return np.zeros((0, context_window), dtype=np.int64), np.zeros(0, dtype=np.int64)
    padded = np.concatenate([np.full(context_window, PAD, dtype=np.int64), seq])
    windows = np.lib.stride_tricks.sliding_window_view(padded, context_window)
    start = len(example.prompt_tokens)
    ctx = windows[start:start + t]
    return np.ascontiguousarray(ctx), seq[start:start + t].copy()


def batch_rows(examples, context_window: int):
    """Stacked rows of many examples plus the example index of each row."""
    ctxs, tgts, owner = [], [], []
    for k, ex in enumerate(examples):
        c, t = example_rows(ex, context_window)
        ctxs.append(c)
        tgts.append(t)
        owner.append(np.full(len(t), k, dtype=np.int64))
    if not ctxs:
        return (np.zeros((0, context_window), dtype=np.int64), np.zeros(0, dtype=np.int64),
                np.zeros(0, dtype=np.int64))
    return np.concatenate(ctxs), np.concatenate(tgts), np.concatenate(owner)


def check_example(example: Example, vocab_size: int = VOCAB_SIZE):
    for t in example.prompt_tokens + example.response_tokens:
        if not 0 <= t < vocab_size:
            raise InputError(f"example {example.id!r}: token {t} outside vocabulary of size {vocab_size}")


def _forward(params: Params, ctx):
    cfg = params.config
    x = params.embedding[ctx].reshape(len(ctx), cfg.context_window * cfg.embed_dim)
    acts = [x]
    for l in range(cfg.num_mlp_layers):
        x = np.tanh(x @ params.weight(l).T + params.bias(l))
        acts.append(x)
    logits = x @ params.weight(cfg.head_index).T + params.bias(cfg.head_index)
    return acts, logits


def _log_softmax(logits):
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def logits(params: Params, ctx) -> np.ndarray:
    return _forward(params, np.asarray(ctx, dtype=np.int64))[1]


def row_losses(params: Params, ctx, targets) -> np.ndarray:
    _, out = _forward(params, ctx)
    logp = _log_softmax(out)
    return -logp[np.arange(len(targets)), targets]


def loss(params: Params, example: Example) -> float:
    """Response-only negative log-likelihood, summed over response tokens."""
    check_example(example, params.config.vocab_size)
    ctx, tgt = example_rows(example, params.config.context_window)
    if len(tgt) == 0:
        return 0.0
    return float(row_losses(params, ctx, tgt).sum())


def forward_backward(params: Params, ctx, targets, row_weights=None, stats_layers=()):
    """Weighted sum of row losses and its gradient (flat layout).

    ``row_weights`` scales each row's loss. Returns (loss, grad Params, KfacStats);
    stats hold the (a, g) pairs of ``stats_layers`` with g already weighted, so
    ``g.T @ a`` is exactly that layer's gradient block.
    """
    cfg = params.config
    n = len(targets)
    grad = Params(cfg)
    stats = KfacStats()
    if n == 0:
        return 0.0, grad, stats
    w = np.ones(n) if row_weights is None else np.asarray(row_weights, dtype=np.float64)
    acts, out = _forward(params, ctx)
    logp = _log_softmax(out)
    rows = np.arange(n)
    total = float(np.dot(w, -logp[rows, targets]))

    delta = np.exp(logp)
    delta[rows, targets] -= 1.0
    delta *= w[:, None]
    want = set(stats_layers)
    for l in range(cfg.num_mlp_layers, -1, -1):
        a = np.concatenate([acts[l], np.ones((n, 1))], axis=1)
        block = delta.T @ a
        grad.weight(l)[:] = block[:, :-1]
        grad.bias(l)[:] = block[:, -1]
        if l in want:
            stats.a[l] = a
            stats.g[l] = delta
        dx = delta @ params.weight(l)
        if l > 0:
            delta = dx * (1.0 - acts[l] ** 2)
    demb = grad.embedding
    np.add.at(demb, ctx.reshape(-1), dx.reshape(n * cfg.context_window, cfg.embed_dim))
    return total, grad, stats


def backward(params: Params, example: Example, stats_layers=None):
    """Per-example gradient of the response loss and KFAC statistics.

    ``stats_layers`` defaults to every dense layer including the head.
    """
    check_example(example, params.config.vocab_size)
    if stats_layers is None:
        stats_layers = range(params.config.num_mlp_layers + 1)
    ctx, tgt = example_rows(example, params.config.context_window)
    _, grad, stats = forward_backward(params, ctx, tgt, stats_layers=stats_layers)
    return PerExampleGradient(grad, len(tgt)), stats


# ---------------------------------------------------------------------------
# serialization: "GDLM", version, config block, float64 parameters

_MAGIC = b"GDLM"
_VERSION = 1


def save_params(params: Params, path):
    c = params.config
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<5I", c.vocab_size, c.embed_dim, c.context_window,
                             c.hidden_dim, c.num_mlp_layers))
        fh.write(params.theta.astype("<f8").tobytes())


def load_params(path) -> Params:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise FormatError(f"{path}: not a GDLM parameter file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    v, e, cw, h, l = struct.unpack_from("<5I", data, 8)
    cfg = ModelConfig(vocab_size=v, embed_dim=e, context_window=cw, hidden_dim=h, num_mlp_layers=l)
    theta = np.frombuffer(data, dtype="<f8", offset=28)
    if theta.size != cfg.n_params:
        raise FormatError(f"{path}: expected {cfg.n_params} parameters, found {theta.size}")
    return Params(cfg, theta.astype(np.float64))
