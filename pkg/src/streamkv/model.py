"""Deterministic, untrained attention-only decoder used as the stand-in video LLM."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, VocabError

PROJECTION_MODES = ("random", "identity")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    num_heads: int = 2
    head_dim: int = 16
    tokens_per_frame: int = 16
    vocab_size: int = 256
    local_window: int = 512  # l_L, in tokens
    chunk_size: int = 64  # l_X, max tokens per encoder call
    sink_frames: int = 1
    bytes_per_scalar: int = 4
    rope_base: float = T.DEFAULT_ROPE_BASE
    projection_mode: str = "random"
    mlp: bool = False
    eos_id: int | None = 255

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "head_dim", "tokens_per_frame",
                     "vocab_size", "local_window", "chunk_size", "bytes_per_scalar"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.sink_frames < 0:
            raise ConfigError("sink_frames must be >= 0")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary embeddings")
        if self.chunk_size > self.local_window:
            raise ConfigError("chunk_size (l_X) must not exceed local_window (l_L)")
        if self.projection_mode not in PROJECTION_MODES:
            raise ConfigError(f"projection_mode must be one of {PROJECTION_MODES}")
        if self.eos_id is not None and not 0 <= self.eos_id < self.vocab_size:
            raise ConfigError("eos_id outside vocabulary")

    @property
    def model_dim(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def window_frames(self) -> int:
        return self.local_window // self.tokens_per_frame

    @property
    def sink_tokens(self) -> int:
        return self.sink_frames * self.tokens_per_frame

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def _coerce(value: str, annotation: str):
    value = value.strip()
    if "None" in annotation and value.lower() in ("none", ""):
        return None
    if annotation.startswith("bool"):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"bad boolean {value!r}")
    if annotation.startswith("int"):
        return int(value)
    if annotation.startswith("float"):
        return float(value)
    return value


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def config_from_mapping(cls, values: dict[str, str], strict: bool = True):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in fields:
            if strict:
                raise ConfigError(f"unknown config key {key!r}")
            continue
        kwargs[key] = _coerce(value, str(fields[key].type))
    return cls(**kwargs)


def load_config(path: str | Path) -> ModelConfig:
    values = parse_kv_text(Path(path).read_text())
    return config_from_mapping(ModelConfig, values, strict=False)


def dump_config(cfg) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class LayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_up: np.ndarray | None = None
    w_down: np.ndarray | None = None


@dataclass(frozen=True)
class ToyModel:
    config: ModelConfig
    seed: int
    layers: tuple[LayerWeights, ...]
    embedding: np.ndarray  # (vocab, model_dim)
    head: np.ndarray  # (model_dim, vocab)


@dataclass(frozen=True)
class LayerKV:
    """Keys (post-RoPE) and values for a run of tokens at one layer."""

    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.keys.shape[0] != self.values.shape[0]:
            raise ShapeError("keys and values must have the same row count")

    @classmethod
    def empty(cls, width: int) -> "LayerKV":
        return cls(np.zeros((0, width), T.F32), np.zeros((0, width), T.F32))

    def __len__(self):
        return self.keys.shape[0]

    def extend(self, other: "LayerKV") -> "LayerKV":
        return LayerKV(np.concatenate([self.keys, other.keys]),
                       np.concatenate([self.values, other.values]))


class OpCounter:
    """Counts attention work: query-key scores summed over heads."""

    def __init__(self):
        self.attention_pairs = 0
        self.by_stage: dict[str, int] = {}
        self.stage = "default"

    def add(self, pairs: int):
        self.attention_pairs += pairs
        self.by_stage[self.stage] = self.by_stage.get(self.stage, 0) + pairs


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=T.F32)
    a.flags.writeable = False
    return a


def init_model(config: ModelConfig, seed: int = 0) -> ToyModel:
    """Draw weights from ``numpy.random.default_rng(seed)`` (PCG64).

    Projections are standard normal scaled by ``1/sqrt(model_dim)``; the
    embedding table is unscaled standard normal. In ``identity`` mode the
    query and key projections are the identity so keys live in query space.
    """
    rng = np.random.default_rng(seed)
    dm = config.model_dim
    scale = 1.0 / math.sqrt(dm)
    embedding = rng.standard_normal((config.vocab_size, dm))
    layers = []
    for _ in range(config.num_layers):
        w_q, w_k, w_v, w_o = (rng.standard_normal((dm, dm)) * scale for _ in range(4))
        w_up = w_down = None
        if config.mlp:
            w_up = rng.standard_normal((dm, 4 * dm)) * scale
            w_down = rng.standard_normal((4 * dm, dm)) * (0.5 / math.sqrt(4 * dm))
        if config.projection_mode == "identity":
            w_q = np.eye(dm)
            w_k = np.eye(dm)
        layers.append(LayerWeights(
            _frozen(w_q), _frozen(w_k), _frozen(w_v), _frozen(w_o),
            None if w_up is None else _frozen(w_up),
            None if w_down is None else _frozen(w_down),
        ))
    head = rng.standard_normal((dm, config.vocab_size)) * scale
    return ToyModel(config, seed, tuple(layers), _frozen(embedding), _frozen(head))


def embed_tokens(model: ToyModel, token_ids: Sequence[int]) -> np.ndarray:
    ids = np.asarray(list(token_ids), dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= model.config.vocab_size):
        raise VocabError(f"token id outside [0, {model.config.vocab_size})")
    return model.embedding[ids].copy() if ids.size else np.zeros((0, model.config.model_dim), T.F32)


def project_qkv(model: ToyModel, layer: int, x: np.ndarray):
    """Pre-RoPE query/key/value projections of hidden rows ``x``."""
    w = model.layers[layer]
    return T.matmul(x, w.w_q), T.matmul(x, w.w_k), T.matmul(x, w.w_v)


def rotate(model: ToyModel, x: np.ndarray, positions) -> np.ndarray:
    cfg = model.config
    return T.rope_rotate(x, positions, cfg.head_dim, cfg.rope_base)


def output_projection(model: ToyModel, layer: int, attn: np.ndarray) -> np.ndarray:
    return T.matmul(attn, model.layers[layer].w_o)


def residual_update(model: ToyModel, layer: int, h: np.ndarray, attn_out: np.ndarray) -> np.ndarray:
    """Add the attention output to the residual stream, plus the optional MLP."""
    h = (h.astype(T.F64) + attn_out.astype(T.F64)).astype(T.F32)
    w = model.layers[layer]
    if w.w_up is not None:
        hidden = np.maximum(T.matmul(h, w.w_up), 0.0)
        h = (h.astype(T.F64) + T.matmul(hidden, w.w_down).astype(T.F64)).astype(T.F32)
    return h


def layer_forward(
    model: ToyModel,
    layer: int,
    x: np.ndarray,
    past: LayerKV,
    positions: Sequence[int],
    counter: OpCounter | None = None,
    return_weights: bool = False,
):
    """Causal attention of new rows ``x`` over ``past`` followed by themselves.

    Returns ``(output, new_kv)`` where ``output`` is the attention result after
    the output projection (no residual) and ``new_kv`` the rotated keys and
    values of ``x``. With ``return_weights`` a per-head list of attention
    weight matrices is appended.
    """
    cfg = model.config
    x = T.as_mat(x, cols=cfg.model_dim)
    positions = np.asarray(list(positions), dtype=np.int64)
    if positions.shape[0] != x.shape[0]:
        raise ShapeError(f"{positions.shape[0]} positions for {x.shape[0]} rows")
    if past.keys.shape[1:] != (cfg.model_dim,):
        raise ShapeError("past KV width does not match the model")
    q, k, v = project_qkv(model, layer, x)
    q = rotate(model, q, positions)
    k = rotate(model, k, positions)
    new_kv = LayerKV(k, v)
    keys = np.concatenate([past.keys, k])
    values = np.concatenate([past.values, v])
    ranges = T.causal_ranges(x.shape[0], len(past))
    if counter is not None:
        counter.add(sum(end - start for start, end in ranges) * cfg.num_heads)
    res = T.multihead_attention(q, keys, values, ranges, cfg.num_heads, return_weights)
    attn, weights = res if return_weights else (res, None)
    out = output_projection(model, layer, attn)
    if return_weights:
        return out, new_kv, weights
    return out, new_kv


def logits(model: ToyModel, hidden: np.ndarray) -> np.ndarray:
    h = T.as_vec(hidden, dim=model.config.model_dim)
    return T.matmul(h[None, :], model.head)[0]


@dataclass
class ForwardTrace:
    hidden: list[np.ndarray] = field(default_factory=list)  # input to each layer, then final
    kv: list[LayerKV] = field(default_factory=list)


def forward_monolithic(model: ToyModel, token_ids: Sequence[int], counter: OpCounter | None = None) -> ForwardTrace:
    """Single-pass full causal forward with no cache; the reference for streamed encoding."""
    h = embed_tokens(model, token_ids)
    positions = np.arange(h.shape[0])
    trace = ForwardTrace()
    for layer in range(model.config.num_layers):
        trace.hidden.append(h)
        out, kv = layer_forward(model, layer, h, LayerKV.empty(model.config.model_dim), positions, counter)
        trace.kv.append(kv)
        h = residual_update(model, layer, h, out)
    trace.hidden.append(h)
    return trace
