"""Question-conditioned selection of cached frames.

Frames (or blocks of ``b`` consecutive frames) are scored by temperature
scaled cosine similarity against a question vector and the top
``ceil(r / b)`` blocks are kept. Ties go to the block whose first frame is
earliest; the result is always reported in ascending frame order.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateInputError, ShapeError, UndefinedMetricError
from .store import FrameKV

POOLINGS = ("post_rope", "pre_rope")


@dataclass(frozen=True)
class FrameVector:
    frame_index: int
    layer: int | None
    vector: np.ndarray


@dataclass(frozen=True)
class Block:
    frame_indices: tuple[int, ...]
    vector: np.ndarray


@dataclass(frozen=True)
class RetrievalResult:
    frame_indices: tuple[int, ...]
    scores: tuple[float, ...]  # score of the block each frame was retrieved with
    r: int
    b: int
    tau: float = 1.0
    layer: int | None = None
    num_blocks: int = 0

    def as_record(self) -> dict:
        return {"layer": self.layer, "frames": list(self.frame_indices),
                "scores": [round(s, 6) for s in self.scores], "blocks": self.num_blocks}


EMPTY = RetrievalResult((), (), 0, 1)


def frame_vector_internal(frame: FrameKV, layer: int, pooling: str = "post_rope",
                          head_dim: int | None = None, rope_base: float = T.DEFAULT_ROPE_BASE) -> FrameVector:
    """Mean of a frame's M key rows at ``layer`` with heads concatenated.

    ``pre_rope`` undoes the encode-time rotation before pooling and needs
    ``head_dim``.
    """
    keys = frame.keys[layer]
    if pooling == "pre_rope":
        if head_dim is None:
            raise ConfigError("pre_rope pooling needs head_dim")
        keys = T.rope_rotate(keys, -frame.encode_positions, head_dim, rope_base)
    elif pooling != "post_rope":
        raise ConfigError(f"unknown pooling {pooling!r}")
    return FrameVector(frame.frame_index, layer, keys.astype(T.F64).mean(axis=0).astype(T.F32))


def question_vector_internal(queries: np.ndarray) -> np.ndarray:
    """Mean of the question tokens' query vectors (heads concatenated)."""
    q = np.asarray(queries, dtype=T.F32)
    if q.ndim != 2 or q.shape[0] == 0:
        raise DegenerateInputError("question has no tokens")
    return q.astype(T.F64).mean(axis=0).astype(T.F32)


def block_vectors(frame_indices: Sequence[int], vectors: np.ndarray, b: int) -> list[Block]:
    """Group consecutive frames into blocks of ``b`` (last may be short), averaging vectors."""
    if b <= 0:
        raise ConfigError("block size b must be >= 1")
    vectors = np.asarray(vectors)
    blocks = []
    for start in range(0, len(frame_indices), b):
        members = tuple(int(i) for i in frame_indices[start:start + b])
        vec = vectors[start:start + b].astype(T.F64).mean(axis=0).astype(T.F32)
        blocks.append(Block(members, vec))
    return blocks


def _select(blocks: list[Block], scores: np.ndarray, r: int, b: int, tau: float, layer) -> RetrievalResult:
    k = min(math.ceil(r / b), len(blocks))
    first = np.array([blk.frame_indices[0] for blk in blocks], dtype=np.int64)
    order = np.lexsort((first, -scores))[:k]
    picked = []
    for i in order:
        picked.extend((f, float(scores[i])) for f in blocks[i].frame_indices)
    picked.sort()
    return RetrievalResult(tuple(f for f, _ in picked), tuple(s for _, s in picked), r, b, tau, layer, int(k))


def retrieve(frame_indices: Sequence[int], vectors: np.ndarray, qvec: np.ndarray, r: int, b: int = 1,
             tau: float = 1.0, layer: int | None = None) -> RetrievalResult:
    """Top ``ceil(r/b)`` blocks of ``vectors`` (one row per frame) by cosine score."""
    if r < 0:
        raise ConfigError("r must be >= 0")
    if b <= 0:
        raise ConfigError("block size b must be >= 1")
    if tau <= 0:
        raise ConfigError("tau must be positive")
    if r == 0 or len(frame_indices) == 0:
        return RetrievalResult((), (), r, b, tau, layer, 0)
    vectors = np.asarray(vectors)
    if vectors.shape[0] != len(frame_indices):
        raise ShapeError("one vector per frame required")
    blocks = block_vectors(frame_indices, vectors, b)
    scores = T.cosine_scores(np.stack([blk.vector for blk in blocks]), qvec, tau)
    return _select(blocks, scores, r, b, tau, layer)


def uniform_sample(num_frames: int, r: int) -> tuple[int, ...]:
    """Evenly spaced baseline: frames ``floor((i + 0.5) * T / r)`` for i < r."""
    if num_frames <= 0 or r <= 0:
        return ()
    if r >= num_frames:
        return tuple(range(num_frames))
    return tuple(sorted({int(math.floor((i + 0.5) * num_frames / r)) for i in range(r)}))


def recall(retrieved: Iterable[int], relevant: Iterable[int]) -> float:
    relevant = set(relevant)
    if not relevant:
        raise UndefinedMetricError("recall is undefined for an empty relevant set")
    return len(set(retrieved) & relevant) / len(relevant)


class Embedder(Protocol):
    dim: int

    def embed_frame(self, tokens: Sequence[int]) -> np.ndarray: ...

    def embed_text(self, tokens: Sequence[int]) -> np.ndarray: ...


class BagOfTokensEmbedder:
    """Seeded random projection of token counts; frames and text share the space."""

    def __init__(self, vocab_size: int, dim: int = 64, seed: int = 0):
        self.vocab_size = vocab_size
        self.dim = dim
        self.seed = seed
        rng = np.random.default_rng([seed, 0xE1B])
        self._proj = rng.standard_normal((vocab_size, dim))

    def _embed(self, tokens: Sequence[int]) -> np.ndarray:
        counts = np.bincount(np.asarray(list(tokens), dtype=np.int64), minlength=self.vocab_size)
        if counts.shape[0] > self.vocab_size:
            raise ShapeError("token id outside embedder vocabulary")
        return (counts.astype(T.F64) @ self._proj).astype(T.F32)

    def embed_frame(self, tokens: Sequence[int]) -> np.ndarray:
        return self._embed(tokens)

    def embed_text(self, tokens: Sequence[int]) -> np.ndarray:
        return self._embed(tokens)


class _Growable:
    def __init__(self, row_shape: tuple[int, ...]):
        self.data = np.zeros((16, *row_shape), T.F32)
        self.count = 0

    def append(self, row: np.ndarray):
        if self.count == self.data.shape[0]:
            grown = np.zeros((2 * self.count, *self.data.shape[1:]), T.F32)
            grown[:self.count] = self.data[:self.count]
            self.data = grown  # readers holding the old array keep a valid prefix
        self.data[self.count] = row
        self.count += 1


class RetrievalIndex:
    """Per-frame retrieval vectors, written once by the encoder.

    Holds, for each frame, the pooled keys per layer (both post- and
    pre-rotation) and optionally one external embedding. Vectors are a few
    hundred bytes per frame and stay resident whatever tier the frame's KV
    lives in, so scoring never touches disk.
    """

    def __init__(self, num_layers: int, model_dim: int):
        self.num_layers = num_layers
        self.model_dim = model_dim
        self._lock = threading.Lock()
        self._pooled = {p: _Growable((num_layers, model_dim)) for p in POOLINGS}
        self._embeddings: dict[int, np.ndarray] = {}

    def __len__(self):
        return self._pooled["post_rope"].count

    def add_frame(self, frame_index: int, post_rope: np.ndarray, pre_rope: np.ndarray,
                  embedding: np.ndarray | None = None):
        with self._lock:
            if frame_index != len(self):
                raise ShapeError(f"index expects frame {len(self)}, got {frame_index}")
            self._pooled["post_rope"].append(post_rope)
            self._pooled["pre_rope"].append(pre_rope)
            if embedding is not None:
                self._embeddings[frame_index] = np.asarray(embedding, T.F32)

    def add_from_frame(self, frame: FrameKV, head_dim: int, rope_base: float = T.DEFAULT_ROPE_BASE,
                       embedding: np.ndarray | None = None):
        post = np.stack([frame_vector_internal(frame, l).vector for l in range(frame.num_layers)])
        pre = np.stack([frame_vector_internal(frame, l, "pre_rope", head_dim, rope_base).vector
                        for l in range(frame.num_layers)])
        self.add_frame(frame.frame_index, post, pre, embedding)

    def layer_matrix(self, layer: int, max_frame_index: int, pooling: str = "post_rope") -> np.ndarray:
        if pooling not in POOLINGS:
            raise ConfigError(f"unknown pooling {pooling!r}")
        g = self._pooled[pooling]
        with self._lock:
            data, count = g.data, g.count
        n = min(count, max_frame_index + 1)
        return data[:n, layer]

    def embedding_matrix(self, frame_indices: Sequence[int]) -> np.ndarray:
        rows = []
        for i in frame_indices:
            emb = self._embeddings.get(i)
            if emb is None:
                raise IndexError(f"no external embedding for frame {i}")
            rows.append(emb)
        return np.stack(rows) if rows else np.zeros((0, 0), T.F32)


def retrieve_external(frame_indices: Sequence[int], embeddings: np.ndarray, question_tokens: Sequence[int],
                      embedder: Embedder, r: int, b: int = 1, tau: float = 1.0) -> RetrievalResult:
    """Layer-agnostic retrieval using an external frame/text embedder."""
    if len(frame_indices) == 0:
        return RetrievalResult((), (), r, b, tau, None, 0)
    embeddings = np.asarray(embeddings)
    if embeddings.shape[0] != len(frame_indices):
        raise IndexError("missing external embedding for a candidate frame")
    qvec = embedder.embed_text(question_tokens)
    return retrieve(frame_indices, embeddings, qvec, r, b, tau)


def retrieve_internal(snapshot, question_tokens: Sequence[int], model, r: int, b: int = 1,
                      index: RetrievalIndex | None = None, pooling: str = "post_rope") -> list[RetrievalResult]:
    """Per-layer retrieval driven by the question's own query vectors.

    The question runs through the layers in order; at each layer it is scored
    against that layer's frame vectors and the retrieved frames become that
    layer's context before the question moves on to the next layer.
    """
    from .qa import QAPipeline, RetrievalSettings

    settings = RetrievalSettings(mode="internal", r=r, b=b, pooling=pooling)
    pipe = QAPipeline(model, snapshot, index=index, settings=settings)
    return pipe.prefill(question_tokens).retrievals
