"""Question answering over retrieved frame KV.

Per layer the context is ``retrieved frames (ascending) || question ||
generated tokens``. Retrieved keys were rotated at their encode positions;
they are turned by ``context_position - encode_position`` so the context
reads as regular tokens at positions 0, 1, 2, ... (or all at one shared
position under the ``static`` policy). A zero shift leaves a key untouched.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import CapacityError, ConfigError, DegenerateInputError, ShapeError
from .model import (LayerKV, OpCounter, ToyModel, embed_tokens, forward_monolithic, layer_forward,
                    logits, project_qkv, residual_update, rotate)
from .retrieval import (RetrievalIndex, RetrievalResult, question_vector_internal, retrieve,
                        retrieve_external, uniform_sample)
from .store import FrameKV, StoreSnapshot

MODES = ("internal", "external", "uniform", "oracle", "all", "none")


class PositionPolicy:
    """Assigns context positions to ``n`` retrieved video tokens."""

    def __init__(self, mode: str):
        if mode not in ("consecutive", "static"):
            raise ConfigError(f"unknown positional policy {mode!r}")
        self.mode = mode

    def assign(self, num_video_tokens: int) -> tuple[np.ndarray, int]:
        """Return (video token positions, first position after the video)."""
        if self.mode == "consecutive":
            return np.arange(num_video_tokens, dtype=np.int64), num_video_tokens
        return np.zeros(num_video_tokens, dtype=np.int64), 1 if num_video_tokens else 0


def positional_policy(mode: str) -> PositionPolicy:
    return PositionPolicy(mode)


@dataclass
class LayerContext:
    kv: LayerKV
    frames: tuple[int, ...]
    video_positions: np.ndarray
    next_position: int

    def append(self, kv: LayerKV):
        self.kv = self.kv.extend(kv)
        self.next_position += len(kv)


@dataclass
class QAContext:
    layers: list[LayerContext]

    def retrieved(self) -> list[tuple[int, ...]]:
        return [lc.frames for lc in self.layers]


def build_layer_context(frames: Sequence[FrameKV], layer: int, model: ToyModel,
                        policy: PositionPolicy) -> LayerContext:
    dm = model.config.model_dim
    frames = sorted(frames, key=lambda f: f.frame_index)
    if not frames:
        return LayerContext(LayerKV.empty(dm), (), np.zeros(0, np.int64), 0)
    keys = np.concatenate([f.keys[layer] for f in frames])
    values = np.concatenate([f.values[layer] for f in frames])
    encoded_at = np.concatenate([f.encode_positions for f in frames])
    positions, nxt = policy.assign(keys.shape[0])
    keys = rotate(model, keys, positions - encoded_at)
    return LayerContext(LayerKV(keys, values.copy()), tuple(f.frame_index for f in frames), positions, nxt)


def build_context(snapshot: StoreSnapshot, retrievals, model: ToyModel,
                  policy: PositionPolicy | str = "consecutive") -> QAContext:
    """Load each layer's retrieved frames and lay them out as context.

    ``retrievals`` is either one frame set shared by every layer or a list
    with one entry per layer; entries may be RetrievalResults or index lists.
    """
    if isinstance(policy, str):
        policy = PositionPolicy(policy)
    L = model.config.num_layers

    def frames_of(x):
        return tuple(x.frame_indices) if isinstance(x, RetrievalResult) else tuple(x)

    if isinstance(retrievals, RetrievalResult) or not retrievals or not isinstance(
            retrievals[0], (RetrievalResult, list, tuple)):
        per_layer = [frames_of(retrievals)] * L
    else:
        per_layer = [frames_of(x) for x in retrievals]
        if len(per_layer) != L:
            raise ShapeError(f"need {L} per-layer retrievals, got {len(per_layer)}")
    loaded = {f.frame_index: f for f in snapshot.load(set().union(*per_layer))}
    return QAContext([build_layer_context([loaded[i] for i in idx], layer, model, policy)
                      for layer, idx in enumerate(per_layer)])


@dataclass
class QAResult:
    question_id: str
    answer_ids: list[int]
    latencies_us: dict[str, float]
    retrieved: list[tuple[int, ...]]
    admission_frame: int = -1
    attention_pairs: dict[str, int] = field(default_factory=dict)
    first_logits: np.ndarray | None = None
    retrievals: list[RetrievalResult] = field(default_factory=list)

    @property
    def tokens_generated(self) -> int:
        return len(self.answer_ids)

    def as_record(self) -> dict:
        return {
            "question_id": self.question_id,
            "admission_frame": self.admission_frame,
            "retrieved": [list(r) for r in self.retrieved],
            "answer_ids": list(self.answer_ids),
            "latency_us": {k: round(v, 1) for k, v in self.latencies_us.items()},
            "attention_pairs": dict(self.attention_pairs),
        }


@dataclass(frozen=True)
class RetrievalSettings:
    mode: str = "internal"
    r: int = 64
    b: int = 1
    tau: float = 1.0
    pooling: str = "post_rope"
    policy: str = "consecutive"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown retrieval mode {self.mode!r}")
        if self.r < 0 or self.b < 1:
            raise ConfigError("need r >= 0 and b >= 1")


@dataclass
class PrefillState:
    context: QAContext
    hidden: np.ndarray  # final-layer hidden of the last question token
    retrievals: list[RetrievalResult]
    latencies_us: dict[str, float]


class _Stopwatch:
    def __init__(self):
        self.us = {"retrieve": 0.0, "load": 0.0, "prefill": 0.0, "decode": 0.0}

    def time(self, stage):
        watch = self

        class _Ctx:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                watch.us[stage] += (time.perf_counter() - self.t) * 1e6

        return _Ctx()


class QAPipeline:
    """One question session against a store snapshot; owns a private context."""

    def __init__(self, model: ToyModel, snapshot: StoreSnapshot, index: RetrievalIndex | None = None,
                 settings: RetrievalSettings = RetrievalSettings(), embedder=None,
                 counter: OpCounter | None = None):
        self.model = model
        self.snapshot = snapshot
        self.index = index
        self.settings = settings
        self.embedder = embedder
        self.counter = counter if counter is not None else OpCounter()
        self.policy = PositionPolicy(settings.policy)
        self._frames: dict[int, FrameKV] = {}

    def _load(self, indices) -> list[FrameKV]:
        missing = [i for i in indices if i not in self._frames]
        for f in self.snapshot.load(missing):
            self._frames[f.frame_index] = f
        return [self._frames[i] for i in sorted(indices)]

    def _index(self) -> RetrievalIndex:
        if self.index is None:
            cfg = self.model.config
            idx = RetrievalIndex(cfg.num_layers, cfg.model_dim)
            for f in self.snapshot.load(self.snapshot.frame_indices()):
                idx.add_from_frame(f, cfg.head_dim, cfg.rope_base)
            self.index = idx
        return self.index

    def _shared_retrieval(self, question_tokens, relevant) -> RetrievalResult:
        s = self.settings
        candidates = self.snapshot.frame_indices()
        if s.mode == "external":
            if self.embedder is None:
                raise ConfigError("external retrieval needs an embedder")
            emb = self._index().embedding_matrix(candidates) if candidates else np.zeros((0, 0))
            return retrieve_external(candidates, emb, question_tokens, self.embedder, s.r, s.b, s.tau)
        if s.mode == "uniform":
            picked = uniform_sample(len(candidates), s.r)
        elif s.mode == "oracle":
            picked = tuple(sorted(i for i in set(relevant or ()) if i <= self.snapshot.max_frame_index))
        elif s.mode == "all":
            picked = tuple(candidates)
        else:
            picked = ()
        return RetrievalResult(picked, (0.0,) * len(picked), s.r, s.b, s.tau, None, len(picked))

    def _internal_retrieval(self, layer: int, h: np.ndarray) -> RetrievalResult:
        s = self.settings
        candidates = self.snapshot.frame_indices()
        if not candidates or s.r == 0:
            return RetrievalResult((), (), s.r, s.b, 1.0, layer, 0)
        q_pre = project_qkv(self.model, layer, h)[0]
        if s.pooling == "post_rope":
            # Queries sit where the question would continue the stream.
            start = self.snapshot.num_tokens
            q_pre = rotate(self.model, q_pre, np.arange(start, start + h.shape[0]))
        qvec = question_vector_internal(q_pre)
        vectors = self._index().layer_matrix(layer, self.snapshot.max_frame_index, s.pooling)
        return retrieve(candidates, vectors, qvec, s.r, s.b, tau=1.0, layer=layer)

    def prefill(self, question_tokens: Sequence[int], relevant: Sequence[int] | None = None,
                watch: _Stopwatch | None = None) -> PrefillState:
        if len(question_tokens) == 0:
            raise DegenerateInputError("question must have at least one token")
        model = self.model
        watch = watch or _Stopwatch()
        L = model.config.num_layers
        h = embed_tokens(model, question_tokens)
        layers: list[LayerContext] = []
        retrievals: list[RetrievalResult] = []
        shared = None
        if self.settings.mode != "internal":
            with watch.time("retrieve"):
                shared = self._shared_retrieval(question_tokens, relevant)
        self.counter.stage = "prefill"
        for layer in range(L):
            if shared is None:
                with watch.time("retrieve"):
                    res = self._internal_retrieval(layer, h)
            else:
                res = shared
            retrievals.append(res)
            with watch.time("load"):
                ctx = build_layer_context(self._load(res.frame_indices), layer, model, self.policy)
            with watch.time("prefill"):
                positions = ctx.next_position + np.arange(h.shape[0])
                out, kv = layer_forward(model, layer, h, ctx.kv, positions, self.counter)
                ctx.append(kv)
                h = residual_update(model, layer, h, out)
            layers.append(ctx)
        return PrefillState(QAContext(layers), h[-1], retrievals, watch.us)

    def run(self, question_tokens: Sequence[int], max_new_tokens: int = 8, question_id: str = "q",
            relevant: Sequence[int] | None = None) -> QAResult:
        watch = _Stopwatch()
        state = self.prefill(question_tokens, relevant, watch)
        ids, first = decode(self.model, state.context, state.hidden, max_new_tokens, self.counter, watch)
        return QAResult(question_id, ids, dict(watch.us), state.context.retrieved(),
                        self.snapshot.max_frame_index, dict(self.counter.by_stage), first, state.retrievals)


def prefill_context(model: ToyModel, context: QAContext, question_tokens: Sequence[int],
                    counter: OpCounter | None = None) -> np.ndarray:
    """Run the question over a prebuilt context in place; returns the last hidden row."""
    if len(question_tokens) == 0:
        raise DegenerateInputError("question must have at least one token")
    if len(context.layers) != model.config.num_layers:
        raise ShapeError("context layer count does not match the model")
    h = embed_tokens(model, question_tokens)
    for layer, ctx in enumerate(context.layers):
        if ctx.kv.keys.shape[1] != model.config.model_dim:
            raise ShapeError("context width does not match the model")
        positions = ctx.next_position + np.arange(h.shape[0])
        out, kv = layer_forward(model, layer, h, ctx.kv, positions, counter)
        ctx.append(kv)
        h = residual_update(model, layer, h, out)
    return h[-1]


def decode(model: ToyModel, context: QAContext, hidden: np.ndarray, max_new_tokens: int,
           counter: OpCounter | None = None, watch: _Stopwatch | None = None):
    """Greedy decoding; each new token attends to the whole per-layer context."""
    watch = watch or _Stopwatch()
    if counter is not None:
        counter.stage = "decode"
    eos = model.config.eos_id
    answer: list[int] = []
    first = None
    if max_new_tokens <= 0:
        return answer, logits(model, hidden)
    with watch.time("decode"):
        for step in range(max_new_tokens):
            scores = logits(model, hidden)
            if first is None:
                first = scores
            token = int(np.argmax(scores))
            if eos is not None and token == eos:
                break
            answer.append(token)
            if step == max_new_tokens - 1:
                break
            h = embed_tokens(model, [token])
            for layer, ctx in enumerate(context.layers):
                out, kv = layer_forward(model, layer, h, ctx.kv, [ctx.next_position], counter)
                ctx.append(kv)
                h = residual_update(model, layer, h, out)
            hidden = h[-1]
    if first is None:
        first = logits(model, hidden)
    return answer, first


def answer(model: ToyModel, context: QAContext, question_tokens: Sequence[int], max_new_tokens: int = 8,
           question_id: str = "q", counter: OpCounter | None = None) -> QAResult:
    """Prefill the question over ``context`` then greedy-decode."""
    counter = counter if counter is not None else OpCounter()
    watch = _Stopwatch()
    counter.stage = "prefill"
    with watch.time("prefill"):
        hidden = prefill_context(model, context, question_tokens, counter)
    ids, first = decode(model, context, hidden, max_new_tokens, counter, watch)
    return QAResult(question_id, ids, dict(watch.us), context.retrieved(), -1,
                    dict(counter.by_stage), first)


def oracle_answer(model: ToyModel, frames: Sequence[Sequence[int]], question_tokens: Sequence[int],
                  max_new_tokens: int = 8, question_id: str = "oracle", max_tokens: int = 4096) -> QAResult:
    """Full-information reference: dense causal attention over ``video || question``.

    Every decode step reruns the whole sequence from scratch; no cache is used.
    """
    seq = [int(t) for f in frames for t in f] + [int(t) for t in question_tokens]
    if len(seq) + max_new_tokens > max_tokens:
        raise CapacityError(f"{len(seq) + max_new_tokens} tokens exceed dense oracle limit {max_tokens}")
    eos = model.config.eos_id
    answer_ids: list[int] = []
    first = None
    t0 = time.perf_counter()
    for _ in range(max_new_tokens):
        scores = logits(model, forward_monolithic(model, seq).hidden[-1][-1])
        if first is None:
            first = scores
        token = int(np.argmax(scores))
        if eos is not None and token == eos:
            break
        answer_ids.append(token)
        seq.append(token)
    us = (time.perf_counter() - t0) * 1e6
    return QAResult(question_id, answer_ids, {"retrieve": 0.0, "load": 0.0, "prefill": 0.0, "decode": us},
                    [tuple(range(len(frames)))] * model.config.num_layers, len(frames) - 1, {}, first)


def run_qa(model: ToyModel, snapshot: StoreSnapshot, question_tokens: Sequence[int],
           settings: RetrievalSettings = RetrievalSettings(), index: RetrievalIndex | None = None,
           embedder=None, max_new_tokens: int = 8, question_id: str = "q",
           relevant: Sequence[int] | None = None, counter: OpCounter | None = None) -> QAResult:
    pipe = QAPipeline(model, snapshot, index, settings, embedder, counter)
    return pipe.run(question_tokens, max_new_tokens, question_id, relevant)
