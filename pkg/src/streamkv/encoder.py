"""Chunked streaming encoder with sliding-window attention.

Token ``t`` attends to the keys at positions ``[t - l_L + 1, t]`` (the local
window, itself included) plus the first ``sink_frames * M`` tokens of the
stream. Sink keys that have fallen out of the window are re-rotated so their
relative distance to the query is exactly ``l_L`` (the distance ceiling);
every other reachable key is closer than ``l_L`` and keeps its true distance.

The key set of a token depends only on its position, never on where chunk
boundaries fall, and the kernel lays out every query's keys in the same
fixed slot order, so chunk size has no effect on the stored bits.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import ShapeError
from .model import ToyModel, embed_tokens, output_projection, project_qkv, residual_update, rotate
from .store import FrameKV, TieredStore
from .trace import TraceFrame

logger = logging.getLogger(__name__)


@dataclass
class EncodeProbe:
    """Debug capture filled in by :meth:`StreamingEncoder.encode_chunk`."""

    positions: list[np.ndarray] = field(default_factory=list)
    spans: list[list[np.ndarray]] = field(default_factory=list)  # [chunk][layer] -> keys per query
    sink_distances: list[list[np.ndarray]] = field(default_factory=list)  # [chunk][layer] -> (n,)
    sink_logits: list[list[np.ndarray]] = field(default_factory=list)  # [chunk][layer] -> (n, H, S)
    layer_hidden: list[list[np.ndarray]] = field(default_factory=list)  # [chunk][layer + 1] -> (n, dm)

    def concat_spans(self, layer: int) -> np.ndarray:
        return np.concatenate([c[layer] for c in self.spans]) if self.spans else np.zeros(0, int)

    def concat_hidden(self, layer: int) -> np.ndarray:
        return np.concatenate([c[layer] for c in self.layer_hidden])


@dataclass
class _PartialFrame:
    tokens: list[int] = field(default_factory=list)
    keys: list[list[np.ndarray]] = field(default_factory=list)  # [layer] -> row blocks
    values: list[list[np.ndarray]] = field(default_factory=list)
    keys_pre: list[list[np.ndarray]] = field(default_factory=list)


class StreamingEncoder:
    """Single writer for one stream: encodes frames and appends them to a store.

    Attributes ``total_tokens`` (l_P) and ``next_frame_index`` describe the
    stream state; the per-layer window buffers hold the last ``l_L - 1``
    rotated keys/values and the sink tokens' unrotated keys/values.
    """

    def __init__(self, model: ToyModel, store: TieredStore | None = None, index=None,
                 embedder=None, fps: float = 0.5):
        self.model = model
        self.config = cfg = model.config
        self.store = store
        self.index = index
        self.embedder = embedder
        self.fps = fps
        self.total_tokens = 0
        self.next_frame_index = 0
        dm = cfg.model_dim
        keep = cfg.local_window - 1
        self._win_k = [np.zeros((keep, dm), T.F32) for _ in range(cfg.num_layers)]
        self._win_v = [np.zeros((keep, dm), T.F32) for _ in range(cfg.num_layers)]
        self._sink_kpre = [np.zeros((0, dm), T.F32) for _ in range(cfg.num_layers)]
        self._sink_v = [np.zeros((0, dm), T.F32) for _ in range(cfg.num_layers)]
        self._partial = self._new_partial()
        self._pending_timestamps: list[float] = []
        self.encode_seconds = 0.0

    def _new_partial(self) -> _PartialFrame:
        L = self.config.num_layers
        return _PartialFrame([], [[] for _ in range(L)], [[] for _ in range(L)], [[] for _ in range(L)])

    @property
    def hot_tokens(self) -> int:
        """Tokens the encoder keeps resident for attention (window + sinks)."""
        window = min(self.total_tokens, self.config.local_window - 1)
        return window + self._sink_kpre[0].shape[0]

    def assign_positions(self, num_new_tokens: int) -> np.ndarray:
        return np.arange(self.total_tokens, self.total_tokens + num_new_tokens, dtype=np.int64)

    # -- public encode API --

    def encode_chunk(self, frames: Sequence[Sequence[int]], timestamps: Sequence[float] | None = None,
                     *, chunk_tokens: int | None = None, probe: EncodeProbe | None = None) -> list[FrameKV]:
        """Encode whole frames; returns the FrameKV records appended to the store.

        ``chunk_tokens`` splits the work into smaller attention steps (down to
        a single token); the result is bit-identical for any split.
        """
        cfg = self.config
        for f in frames:
            if len(f) != cfg.tokens_per_frame:
                raise ShapeError(f"frame has {len(f)} tokens, expected {cfg.tokens_per_frame}")
        tokens = [int(t) for f in frames for t in f]
        if len(tokens) > cfg.chunk_size and chunk_tokens is None:
            raise ShapeError(f"chunk of {len(tokens)} tokens exceeds l_X={cfg.chunk_size}")
        step = chunk_tokens or max(len(tokens), 1)
        if step > cfg.chunk_size:
            raise ShapeError(f"chunk_tokens {step} exceeds l_X={cfg.chunk_size}")
        if timestamps is None:
            base = self.next_frame_index + len(self._pending_timestamps)
            timestamps = [(base + i) / self.fps for i in range(len(frames))]
        self._pending_timestamps.extend(float(t) for t in timestamps)
        out = []
        start = time.perf_counter()
        for i in range(0, len(tokens), step):
            out.extend(self._feed(tokens[i:i + step], probe))
        self.encode_seconds += time.perf_counter() - start
        return out

    def encode_stream(self, frames: Iterable[TraceFrame | Sequence[int]], frames_per_chunk: int | None = None,
                      probe: EncodeProbe | None = None) -> list[FrameKV]:
        cfg = self.config
        per_chunk = frames_per_chunk or max(1, cfg.chunk_size // cfg.tokens_per_frame)
        out, batch, stamps = [], [], []
        for f in frames:
            if isinstance(f, TraceFrame):
                batch.append(f.tokens)
                stamps.append(f.timestamp if f.timestamp is not None else f.frame_index / self.fps)
            else:
                batch.append(f)
                stamps.append((self.next_frame_index + len(self._pending_timestamps) + len(batch) - 1) / self.fps)
            if len(batch) == per_chunk:
                out.extend(self.encode_chunk(batch, stamps, probe=probe))
                batch, stamps = [], []
        if batch:
            out.extend(self.encode_chunk(batch, stamps, probe=probe))
        return out

    # -- internals --

    def _feed(self, tokens: list[int], probe: EncodeProbe | None) -> list[FrameKV]:
        cfg = self.config
        model = self.model
        n = len(tokens)
        positions = self.assign_positions(n)
        h = embed_tokens(model, tokens)
        if probe is not None:
            probe.positions.append(positions)
            probe.spans.append([])
            probe.sink_distances.append([])
            probe.sink_logits.append([])
            probe.layer_hidden.append([h])
        keys, values, keys_pre = [], [], []
        for layer in range(cfg.num_layers):
            q_pre, k_pre, v = project_qkv(model, layer, h)
            q = rotate(model, q_pre, positions)
            k = rotate(model, k_pre, positions)
            attn = self._window_attention(layer, q, k, v, positions, probe)
            h = residual_update(model, layer, h, output_projection(model, layer, attn))
            if probe is not None:
                probe.layer_hidden[-1].append(h)
            self._advance_buffers(layer, positions, k, v, k_pre)
            keys.append(k)
            values.append(v)
            keys_pre.append(k_pre)
        self.total_tokens += n
        return self._collect_frames(tokens, keys, values, keys_pre)

    def _window_attention(self, layer, q, k_new, v_new, positions, probe):
        cfg = self.config
        n = q.shape[0]
        H, D, W = cfg.num_heads, cfg.head_dim, cfg.local_window
        S = cfg.sink_tokens
        buf_k = np.concatenate([self._win_k[layer], k_new]).astype(T.F64)
        buf_v = np.concatenate([self._win_v[layer], v_new]).astype(T.F64)
        # (H, P, D) so each head's window is a strided (D, W) / (W, D) view.
        kh = np.ascontiguousarray(buf_k.reshape(-1, H, D).transpose(1, 0, 2))
        vh = np.ascontiguousarray(buf_v.reshape(-1, H, D).transpose(1, 0, 2))
        k_win = sliding_window_view(kh, W, axis=1)[:, :n].transpose(1, 0, 2, 3)  # (n,H,D,W)
        v_win = sliding_window_view(vh, W, axis=1)[:, :n].transpose(1, 0, 3, 2)  # (n,H,W,D)
        qh = q.astype(T.F64).reshape(n, H, 1, D)
        win_pos = positions[:, None] - (W - 1) + np.arange(W)[None, :]
        valid = [win_pos >= 0]
        parts_s = []
        sink_dist = None
        if S:
            # Sinks re-expressed at the ceiling: rotated to position t - l_L.
            avail = self._sink_kpre[layer].shape[0]
            kpre = np.zeros((S, cfg.model_dim), T.F32)
            kpre[:avail] = self._sink_kpre[layer]
            vs = np.zeros((S, cfg.model_dim), T.F32)
            vs[:avail] = self._sink_v[layer]
            ceil_pos = np.maximum(positions - W, 0)
            rot = rotate(self.model, np.tile(kpre, (n, 1)), np.repeat(ceil_pos, S))
            k_sink = rot.astype(T.F64).reshape(n, S, H, D).transpose(0, 2, 3, 1)  # (n,H,D,S)
            v_sink = np.broadcast_to(vs.astype(T.F64).reshape(S, H, D).transpose(1, 0, 2), (n, H, S, D))
            sink_idx = np.arange(S)[None, :]
            sink_valid = (sink_idx <= positions[:, None] - W) & (sink_idx < avail)
            parts_s.append(np.matmul(qh, k_sink))
            valid.insert(0, sink_valid)
            sink_dist = positions - ceil_pos
        parts_s.append(np.matmul(qh, k_win))
        scores = np.concatenate(parts_s, axis=-1) * (1.0 / math.sqrt(D))  # (n,H,1,S+W)
        mask = np.concatenate(valid, axis=1)  # (n, S+W)
        scores = np.where(mask[:, None, None, :], scores, -np.inf)
        scores -= scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=-1, keepdims=True)
        if S:
            out = np.matmul(w[..., :S], v_sink) + np.matmul(w[..., S:], v_win)
        else:
            out = np.matmul(w, v_win)
        if probe is not None:
            probe.spans[-1].append(mask.sum(axis=1))
            if S:
                probe.sink_distances[-1].append(np.where(mask[:, :S].any(axis=1), sink_dist, -1))
                probe.sink_logits[-1].append(parts_s[0][:, :, 0, :] / math.sqrt(D))
        return out.reshape(n, cfg.model_dim).astype(T.F32)

    def _advance_buffers(self, layer, positions, k, v, k_pre):
        cfg = self.config
        keep = cfg.local_window - 1
        if keep:
            self._win_k[layer] = np.concatenate([self._win_k[layer], k])[-keep:]
            self._win_v[layer] = np.concatenate([self._win_v[layer], v])[-keep:]
        sink_rows = positions < cfg.sink_tokens
        if sink_rows.any():
            self._sink_kpre[layer] = np.concatenate([self._sink_kpre[layer], k_pre[sink_rows]])
            self._sink_v[layer] = np.concatenate([self._sink_v[layer], v[sink_rows]])

    def _collect_frames(self, tokens, keys, values, keys_pre) -> list[FrameKV]:
        cfg = self.config
        M = cfg.tokens_per_frame
        done = []
        offset = 0
        while offset < len(tokens):
            part = self._partial
            take = min(M - len(part.tokens), len(tokens) - offset)
            sl = slice(offset, offset + take)
            part.tokens.extend(tokens[sl])
            for layer in range(cfg.num_layers):
                part.keys[layer].append(keys[layer][sl])
                part.values[layer].append(values[layer][sl])
                part.keys_pre[layer].append(keys_pre[layer][sl])
            offset += take
            if len(part.tokens) == M:
                done.append(self._finish_frame(part))
                self._partial = self._new_partial()
        return done

    def _finish_frame(self, part: _PartialFrame) -> FrameKV:
        cfg = self.config
        index = self.next_frame_index
        keys = np.stack([np.concatenate(b) for b in part.keys])
        values = np.stack([np.concatenate(b) for b in part.values])
        keys_pre = np.stack([np.concatenate(b) for b in part.keys_pre])
        timestamp = self._pending_timestamps.pop(0)
        frame = FrameKV(index, timestamp, keys, values, index * cfg.tokens_per_frame)
        if self.index is not None:
            post = keys.astype(T.F64).mean(axis=1).astype(T.F32)
            pre = keys_pre.astype(T.F64).mean(axis=1).astype(T.F32)
            embedding = self.embedder.embed_frame(part.tokens) if self.embedder is not None else None
            self.index.add_frame(index, post, pre, embedding)
        if self.store is not None:
            self.store.append(frame)
        self.next_frame_index += 1
        return frame


def ingest_rate_control(source: Iterable[Sequence[int]], fps: float, source_fps: float = 1.0,
                        pace: bool = False) -> Iterator[TraceFrame]:
    """Subsample a ``source_fps`` frame source down to ``fps``.

    A source frame is kept when its timestamp reaches the next sampling tick
    ``k / fps``; kept frames are renumbered from 0 with timestamp ``k / fps``.
    With ``pace`` the generator sleeps so frames come out in real time.
    """
    if fps <= 0 or source_fps <= 0:
        raise ValueError("fps must be positive")
    k = 0
    started = time.monotonic()
    eps = 1e-9
    for i, tokens in enumerate(source):
        t = i / source_fps
        if t + eps < k / fps:
            continue
        if pace:
            delay = started + k / fps - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        yield TraceFrame(k, tuple(tokens), (), k / fps)
        k += 1
