"""Tiered frame KV storage: hot window, RAM, disk.

Block file layout (little-endian), one file ``frame_<index>.rkv`` per frame::

    magic      4s   b"RKV1"
    version    u32  1
    L, M, H, D u32 x 4
    frame_index        u64
    timestamp          f64
    encode_position_start u64
    payload    for each layer: keys (M x H*D f32), then values (M x H*D f32)
    checksum   u64  CRC-64/XZ over every preceding byte of the file

The checksum covers the header too, so any single flipped byte is caught.
"""

from __future__ import annotations

import bisect
import json
import logging
import os
import struct
import tempfile
import threading
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import CorruptionError, FrameNotFoundError, OrderingError, ShapeError, StorageError
from .model import LayerKV, ModelConfig

logger = logging.getLogger(__name__)

MAGIC = b"RKV1"
VERSION = 1
HEADER = struct.Struct("<4sIIIIIQdQ")
CHECKSUM = struct.Struct("<Q")
TIERS = ("hot", "ram", "disk")

# CRC-64/XZ (ECMA-182 polynomial, reflected, init/xorout all ones).
_CRC64_POLY = 0xC96C5795D7870F42
_CRC64_MASK = 0xFFFFFFFFFFFFFFFF


def _crc64_table():
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC64_TABLE = _crc64_table()


def crc64(data: bytes, crc: int = 0) -> int:
    crc ^= _CRC64_MASK
    table = _CRC64_TABLE
    for byte in data:
        crc = table[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ _CRC64_MASK


@dataclass(frozen=True)
class FrameKV:
    """Cached keys/values for one frame across all layers.

    ``keys`` and ``values`` have shape (L, M, H*D); keys are stored after
    rotation at ``encode_position_start + j`` for token ``j``.
    """

    frame_index: int
    timestamp: float
    keys: np.ndarray
    values: np.ndarray
    encode_position_start: int

    def __post_init__(self):
        if self.keys.shape != self.values.shape or self.keys.ndim != 3:
            raise ShapeError(f"bad FrameKV shapes {self.keys.shape} / {self.values.shape}")

    @property
    def num_layers(self) -> int:
        return self.keys.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.keys.shape[1]

    @property
    def encode_positions(self) -> np.ndarray:
        return np.arange(self.encode_position_start, self.encode_position_start + self.num_tokens)

    def layer(self, layer: int) -> LayerKV:
        return LayerKV(self.keys[layer], self.values[layer])

    @property
    def payload_nbytes(self) -> int:
        return self.keys.nbytes + self.values.nbytes

    def equals(self, other: "FrameKV") -> bool:
        return (
            self.frame_index == other.frame_index
            and self.timestamp == other.timestamp
            and self.encode_position_start == other.encode_position_start
            and self.keys.tobytes() == other.keys.tobytes()
            and self.values.tobytes() == other.values.tobytes()
        )


def size_bytes(config: ModelConfig, num_frames: int) -> int:
    """``2 x L x T x M x H x D x bytes_per_scalar``."""
    if num_frames < 0:
        raise ValueError("num_frames must be >= 0")
    return (2 * config.num_layers * num_frames * config.tokens_per_frame
            * config.num_heads * config.head_dim * config.bytes_per_scalar)


def encode_block(frame: FrameKV, config: ModelConfig) -> bytes:
    L, M = frame.keys.shape[:2]
    if (L, M, frame.keys.shape[2]) != (config.num_layers, config.tokens_per_frame, config.model_dim):
        raise ShapeError("frame does not match the model config")
    header = HEADER.pack(MAGIC, VERSION, L, M, config.num_heads, config.head_dim,
                         frame.frame_index, frame.timestamp, frame.encode_position_start)
    parts = [header]
    for layer in range(L):
        parts.append(np.ascontiguousarray(frame.keys[layer], dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(frame.values[layer], dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + CHECKSUM.pack(crc64(body))


def decode_block(blob: bytes, expected_index: int | None = None, path=None) -> FrameKV:
    label = expected_index if expected_index is not None else -1
    if len(blob) < HEADER.size + CHECKSUM.size:
        raise CorruptionError(label, path, "truncated block")
    body, tail = blob[:-CHECKSUM.size], blob[-CHECKSUM.size:]
    if crc64(body) != CHECKSUM.unpack(tail)[0]:
        raise CorruptionError(label, path)
    magic, version, L, M, H, D, index, ts, start = HEADER.unpack_from(body)
    if magic != MAGIC or version != VERSION:
        raise CorruptionError(label, path, "bad magic/version")
    if expected_index is not None and index != expected_index:
        raise CorruptionError(label, path, f"header names frame {index}")
    width = H * D
    expected = HEADER.size + 2 * L * M * width * 4
    if len(body) != expected:
        raise CorruptionError(label, path, "payload length mismatch")
    data = np.frombuffer(body, dtype="<f4", offset=HEADER.size).reshape(L, 2, M, width)
    keys = data[:, 0].astype(np.float32)
    values = data[:, 1].astype(np.float32)
    return FrameKV(index, ts, keys, values, start)


def block_path(root: Path, frame_index: int) -> Path:
    return Path(root) / f"frame_{frame_index}.rkv"


def _atomic_write(path: Path, data: bytes):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class TierPlacement:
    frame_index: int
    tier: str
    disk_path: str | None = None


class StoreSnapshot:
    """Read-only view of a store pinned at ``max_frame_index`` (-1 when empty)."""

    def __init__(self, store: "TieredStore", max_frame_index: int):
        self.store = store
        self.max_frame_index = max_frame_index

    @property
    def num_frames(self) -> int:
        return self.max_frame_index + 1

    @property
    def num_tokens(self) -> int:
        return self.num_frames * self.store.config.tokens_per_frame

    def frame_indices(self) -> list[int]:
        return list(range(self.num_frames))

    def load(self, frame_indices: Iterable[int]) -> list[FrameKV]:
        return self.store.load(frame_indices, max_frame_index=self.max_frame_index)

    def timestamp(self, frame_index: int) -> float:
        if frame_index > self.max_frame_index:
            raise FrameNotFoundError(frame_index, "not visible in snapshot")
        return self.store.timestamp(frame_index)


class TieredStore:
    """Single-writer, multi-reader frame store.

    New frames enter the hot tier. Once the non-sink hot tokens would exceed
    the local window, the oldest non-sink hot frames move to RAM (FIFO). When
    a RAM byte budget and a root directory are set, the oldest RAM frames are
    written to disk whenever the budget is exceeded.
    """

    def __init__(self, config: ModelConfig, root: str | Path | None = None,
                 ram_budget_bytes: int | None = None, sink_frames: int | None = None,
                 hot_frames: int | None = None):
        self.config = config
        self.root = Path(root) if root is not None else None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
        self.ram_budget_bytes = ram_budget_bytes
        self.sink_frames = config.sink_frames if sink_frames is None else sink_frames
        # Non-sink hot capacity in frames; defaults to the local window.
        self.hot_frames = config.window_frames if hot_frames is None else hot_frames
        self.frame_nbytes = size_bytes(config, 1)
        self._lock = threading.RLock()
        self._memory: dict[int, FrameKV] = {}
        self._tier: dict[int, str] = {}
        self._paths: dict[int, Path] = {}
        self._timestamps: list[float] = []
        self._hot_fifo: deque[int] = deque()
        self._ram_fifo: deque[int] = deque()
        self._counts = {t: 0 for t in TIERS}
        self.peak_bytes = {t: 0 for t in TIERS}
        self.offloaded_bytes = 0

    # -- writer --

    def append(self, frame: FrameKV) -> TierPlacement:
        cfg = self.config
        if frame.keys.shape != (cfg.num_layers, cfg.tokens_per_frame, cfg.model_dim):
            raise ShapeError(f"frame shape {frame.keys.shape} does not match config")
        with self._lock:
            expected = len(self._timestamps)
            if frame.frame_index != expected:
                raise OrderingError(f"expected frame {expected}, got {frame.frame_index}")
            if self._timestamps and frame.timestamp <= self._timestamps[-1]:
                raise OrderingError("frame timestamps must strictly increase")
            keys = frame.keys.copy()
            values = frame.values.copy()
            keys.flags.writeable = False
            values.flags.writeable = False
            frame = FrameKV(frame.frame_index, frame.timestamp, keys, values, frame.encode_position_start)
            self._memory[frame.frame_index] = frame
            self._tier[frame.frame_index] = "hot"
            self._counts["hot"] += 1
            self._timestamps.append(float(frame.timestamp))
            if frame.frame_index >= self.sink_frames:
                self._hot_fifo.append(frame.frame_index)
                while len(self._hot_fifo) > self.hot_frames:
                    self._move(self._hot_fifo.popleft(), "ram")
            self._track_peak()
        self._enforce_ram_budget()
        return self.placement(frame.frame_index)

    def _move(self, index: int, tier: str):
        old = self._tier[index]
        self._counts[old] -= 1
        self._counts[tier] += 1
        self._tier[index] = tier
        if tier == "ram":
            self._ram_fifo.append(index)

    def _track_peak(self):
        for t in TIERS:
            self.peak_bytes[t] = max(self.peak_bytes[t], self._counts[t] * self.frame_nbytes)

    def _enforce_ram_budget(self):
        if self.ram_budget_bytes is None or self.root is None:
            return
        with self._lock:
            excess = self._counts["ram"] * self.frame_nbytes - self.ram_budget_bytes
            victims = []
            for idx in self._ram_fifo:
                if excess <= 0:
                    break
                if self._tier.get(idx) == "ram":
                    victims.append(idx)
                    excess -= self.frame_nbytes
        if victims:
            self.offload_to_disk(victims)

    def offload_to_disk(self, frame_indices: Iterable[int]) -> list[Path]:
        """Write RAM-tier frames to block files and drop the RAM copies.

        Frames already on disk are left alone. Frames still in the hot tier
        are rejected. On an I/O failure the frames stay in RAM.
        """
        if self.root is None:
            raise StorageError("store has no disk root")
        paths = []
        for idx in frame_indices:
            with self._lock:
                tier = self._tier.get(idx)
                if tier is None:
                    raise FrameNotFoundError(idx)
                if tier == "disk":
                    paths.append(self._paths[idx])
                    continue
                if tier == "hot":
                    raise StorageError(f"frame {idx} is in the hot window")
                frame = self._memory[idx]
            path = block_path(self.root, idx)
            try:
                _atomic_write(path, encode_block(frame, self.config))
            except OSError as exc:
                raise StorageError(f"offload of frame {idx} failed: {exc}") from exc
            with self._lock:
                self._paths[idx] = path
                self._move(idx, "disk")
                del self._memory[idx]
                self.offloaded_bytes += frame.payload_nbytes
                self._track_peak()
            paths.append(path)
        with self._lock:
            self._ram_fifo = deque(i for i in self._ram_fifo if self._tier.get(i) == "ram")
        self.write_manifest()
        return paths

    def write_manifest(self) -> Path | None:
        if self.root is None:
            return None
        with self._lock:
            entries = [
                {"frame_index": i, "tier": self._tier[i],
                 **({"path": self._paths[i].name} if i in self._paths else {})}
                for i in range(len(self._timestamps))
            ]
        path = self.root / "manifest.json"
        doc = {"version": VERSION, "checksum": "crc64-xz", "frames": entries}
        _atomic_write(path, json.dumps(doc, indent=1).encode())
        return path

    # -- readers --

    @property
    def num_frames(self) -> int:
        return len(self._timestamps)

    @property
    def max_frame_index(self) -> int:
        return len(self._timestamps) - 1

    def snapshot(self, max_frame_index: int | None = None) -> StoreSnapshot:
        with self._lock:
            current = self.max_frame_index
        if max_frame_index is None or max_frame_index > current:
            max_frame_index = current
        return StoreSnapshot(self, max_frame_index)

    def timestamp(self, frame_index: int) -> float:
        try:
            return self._timestamps[frame_index]
        except IndexError:
            raise FrameNotFoundError(frame_index) from None

    def last_frame_at_or_before(self, t: float) -> int:
        """Highest appended frame index with timestamp <= t, or -1."""
        with self._lock:
            return bisect.bisect_right(self._timestamps, t) - 1

    def placement(self, frame_index: int) -> TierPlacement:
        with self._lock:
            tier = self._tier.get(frame_index)
            if tier is None:
                raise FrameNotFoundError(frame_index)
            path = self._paths.get(frame_index)
        return TierPlacement(frame_index, tier, str(path) if path else None)

    def placements(self) -> dict[int, str]:
        with self._lock:
            return dict(self._tier)

    def tier_members(self, tier: str) -> list[int]:
        with self._lock:
            return sorted(i for i, t in self._tier.items() if t == tier)

    def bytes_by_tier(self) -> dict[str, int]:
        with self._lock:
            return {t: self._counts[t] * self.frame_nbytes for t in TIERS}

    def load(self, frame_indices: Iterable[int], max_frame_index: int | None = None) -> list[FrameKV]:
        """Frames in ascending index order, from whichever tier holds them."""
        wanted = sorted(set(int(i) for i in frame_indices))
        out = []
        for idx in wanted:
            if max_frame_index is not None and idx > max_frame_index:
                raise FrameNotFoundError(idx, "not visible in snapshot")
            with self._lock:
                tier = self._tier.get(idx)
                frame = self._memory.get(idx)
                path = self._paths.get(idx)
            if tier is None:
                raise FrameNotFoundError(idx)
            if frame is None:
                try:
                    blob = path.read_bytes()
                except OSError as exc:
                    raise StorageError(f"cannot read frame {idx}: {exc}") from exc
                frame = decode_block(blob, idx, path)
            out.append(frame)
        return out
