"""One encoder thread plus a pool of QA workers over a shared store.

The encoder is the store's only writer and never waits on workers: it hands
questions over through a bounded queue and keeps encoding. A worker that
picks up a question first waits until every frame with timestamp <= the
question's admission timestamp has been stored, then pins a snapshot at the
last such frame. Frames encoded later are invisible to that question.
"""

from __future__ import annotations

import collections
import json
import logging
import math
import queue
import threading
import time
from concurrent.futures import Future
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .encoder import StreamingEncoder
from .errors import BackpressureError, ConfigError
from .model import ToyModel, config_from_mapping, parse_kv_text
from .qa import QAPipeline, QAResult, RetrievalSettings
from .retrieval import RetrievalIndex
from .store import TieredStore, size_bytes
from .trace import TraceFrame

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QARequest:
    question_id: str
    tokens: tuple[int, ...]
    admission_timestamp: float
    priority: int = 0  # reserved; scheduling is FIFO
    relevant: tuple[int, ...] = ()


@dataclass(frozen=True)
class WorkerPoolConfig:
    workers: int = 2
    queue_capacity: int = 64
    r: int = 64
    b: int = 1
    mode: str = "internal"
    tau: float = 1.0
    pooling: str = "post_rope"
    policy: str = "consecutive"
    max_new_tokens: int = 8

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("need at least one worker")
        if self.queue_capacity < 1:
            raise ConfigError("queue capacity must be positive")

    def retrieval(self) -> RetrievalSettings:
        return RetrievalSettings(self.mode, self.r, self.b, self.tau, self.pooling, self.policy)


@dataclass(frozen=True)
class SessionConfig:
    """Contents of a session config file (``key = value`` lines)."""

    workers: int = 2
    queue_capacity: int = 64
    r: int = 64
    b: int = 1
    mode: str = "internal"
    pooling: str = "post_rope"
    policy: str = "consecutive"
    fps: float = 0.5
    window: int | None = None
    max_new_tokens: int = 8
    frames_per_chunk: int = 1

    @classmethod
    def load(cls, path: str | Path) -> "SessionConfig":
        return config_from_mapping(cls, parse_kv_text(Path(path).read_text()), strict=False)

    def pool(self) -> WorkerPoolConfig:
        return WorkerPoolConfig(self.workers, self.queue_capacity, self.r, self.b, self.mode,
                                1.0, self.pooling, self.policy, self.max_new_tokens)


def offload_bytes_per_hour(config, fps: float) -> int:
    return size_bytes(config, int(round(3600 * fps)))


@dataclass
class SessionMetrics:
    frames_encoded: int
    encode_wall_seconds: float
    encode_compute_seconds: float
    encode_cpu_seconds: float  # encoder thread CPU time; excludes time sliced to workers
    frames_per_second: float
    frames_per_cpu_second: float
    question_latency_us: dict[str, float]
    peak_bytes: dict[str, int]
    offloaded_bytes: int
    offload_bytes_per_hour: int
    queue_depth: list[tuple[float, int]]
    completed: int
    failed: int

    def records(self) -> list[dict]:
        rows = [{"kind": "question", "question_id": q, "latency_us": round(us, 1)}
                for q, us in sorted(self.question_latency_us.items())]
        summary = asdict(self)
        summary.pop("question_latency_us")
        summary["queue_depth"] = [[round(t, 6), d] for t, d in self.queue_depth]
        summary["kind"] = "session"
        return rows + [summary]

    def summary_table(self) -> str:
        lat = sorted(self.question_latency_us.values())
        mean = sum(lat) / len(lat) if lat else 0.0
        rows = [
            ("frames encoded", f"{self.frames_encoded}"),
            ("video enc. (frames/s)", f"{self.frames_per_second:.1f}"),
            ("video enc. (frames/cpu-s)", f"{self.frames_per_cpu_second:.1f}"),
            ("questions ok / failed", f"{self.completed} / {self.failed}"),
            ("mean latency (us)", f"{mean:.0f}"),
            ("peak hot / ram / disk (B)",
             f"{self.peak_bytes['hot']} / {self.peak_bytes['ram']} / {self.peak_bytes['disk']}"),
            ("offloaded (B)", f"{self.offloaded_bytes}"),
            ("KV-cache per stream-hour (B)", f"{self.offload_bytes_per_hour}"),
            ("max queue depth", f"{max((d for _, d in self.queue_depth), default=0)}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def write_metrics(metrics: SessionMetrics, path: str | Path):
    with Path(path).open("w") as fh:
        for rec in metrics.records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class _Job:
    request: QARequest
    future: Future
    submitted: float
    attempts: int = 0


class ServingSession:
    """Handle returned by :func:`run_stream`."""

    def __init__(self, source: Iterable[TraceFrame], model: ToyModel, store: TieredStore,
                 pool: WorkerPoolConfig, index: RetrievalIndex | None = None, embedder=None,
                 fps: float = 0.5, frames_per_chunk: int = 1,
                 fault_injector: Callable[[QARequest, int], None] | None = None):
        self.model = model
        self.store = store
        self.pool = pool
        self.index = index if index is not None else RetrievalIndex(model.config.num_layers,
                                                                    model.config.model_dim)
        self.embedder = embedder
        self.fps = fps
        self.frames_per_chunk = frames_per_chunk
        self.fault_injector = fault_injector
        self.encoder = StreamingEncoder(model, store, self.index, embedder, fps)
        self._source = iter(source)
        self._queue: queue.Queue[_Job | None] = queue.Queue(maxsize=pool.queue_capacity)
        self._retry: collections.deque[_Job] = collections.deque()
        self._cond = threading.Condition()
        self._horizon = -math.inf  # timestamp of the first frame not yet stored
        self._done = False
        self._error: BaseException | None = None
        self._stats_lock = threading.Lock()
        self._latency: dict[str, float] = {}
        self._completed = 0
        self._failed = 0
        self._depth: list[tuple[float, int]] = []
        self._waiting = 0
        self._t0 = time.perf_counter()
        self._enc_start = self._enc_end = None
        self._enc_cpu = 0.0
        self._encoder_thread = threading.Thread(target=self._encode_loop, name="encoder", daemon=True)
        self._workers = [threading.Thread(target=self._work_loop, name=f"qa-worker-{i}", daemon=True)
                         for i in range(pool.workers)]

    def start(self) -> "ServingSession":
        for w in self._workers:
            w.start()
        self._encoder_thread.start()
        return self

    # -- encoder side --

    def _encode_loop(self):
        self._enc_start = time.perf_counter()
        cpu_start = time.thread_time()
        try:
            batch: list[TraceFrame] = []
            while True:
                frame = next(self._source, None)
                if frame is not None:
                    if not batch:
                        with self._cond:
                            self._horizon = self._stamp(frame)
                    batch.append(frame)
                    if len(batch) < self.frames_per_chunk:
                        continue
                if batch:
                    self.encoder.encode_chunk([f.tokens for f in batch], [self._stamp(f) for f in batch])
                    batch = []
                    with self._cond:
                        self._cond.notify_all()
                if frame is None:
                    break
        except BaseException as exc:  # surfaced to callers through join()
            logger.exception("encoder failed")
            self._error = exc
        finally:
            self._enc_end = time.perf_counter()
            self._enc_cpu = time.thread_time() - cpu_start
            with self._cond:
                self._done = True
                self._horizon = math.inf
                self._cond.notify_all()

    def _stamp(self, frame: TraceFrame) -> float:
        return frame.timestamp if frame.timestamp is not None else frame.frame_index / self.fps

    def _wait_admitted(self, t: float):
        with self._cond:
            while not self._done and self._horizon <= t:
                self._cond.wait(0.05)

    # -- worker side --

    def submit(self, request: QARequest) -> Future:
        fut: Future = Future()
        job = _Job(request, fut, time.perf_counter())
        try:
            self._queue.put_nowait(job)
        except queue.Full:
            raise BackpressureError(f"queue full ({self.pool.queue_capacity}); rejected {request.question_id}")
        self._record_depth(+1)
        return fut

    def _record_depth(self, delta: int):
        # Counts waiting questions only; shutdown sentinels are not questions.
        with self._stats_lock:
            self._waiting += delta
            self._depth.append((time.perf_counter() - self._t0, self._waiting))

    def _next_job(self) -> _Job | None:
        while True:
            try:
                return self._retry.popleft()
            except IndexError:
                pass
            try:
                return self._queue.get(timeout=0.05)
            except queue.Empty:
                continue

    def _work_loop(self):
        while True:
            job = self._next_job()
            if job is None:
                return
            if job.attempts == 0:
                self._record_depth(-1)
            try:
                result = self._answer(job)
            except Exception as exc:
                job.attempts += 1
                if job.attempts == 1:
                    logger.warning("question %s failed (%s); re-queued", job.request.question_id, exc)
                    self._retry.append(job)
                else:
                    with self._stats_lock:
                        self._failed += 1
                    job.future.set_exception(exc)
                continue
            with self._stats_lock:
                self._latency[job.request.question_id] = (time.perf_counter() - job.submitted) * 1e6
                self._completed += 1
            job.future.set_result(result)

    def _answer(self, job: _Job) -> QAResult:
        req = job.request
        if self.fault_injector is not None:
            self.fault_injector(req, job.attempts)
        self._wait_admitted(req.admission_timestamp)
        last = self.store.last_frame_at_or_before(req.admission_timestamp)
        snapshot = self.store.snapshot(last)
        pipe = QAPipeline(self.model, snapshot, self.index, self.pool.retrieval(), self.embedder)
        return pipe.run(req.tokens, self.pool.max_new_tokens, req.question_id, req.relevant)

    # -- lifecycle --

    @property
    def frames_encoded(self) -> int:
        return self.store.num_frames

    @property
    def done_encoding(self) -> bool:
        return self._done

    def wait_for_frame(self, frame_index: int, timeout: float | None = None) -> bool:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not self._done and self.store.num_frames <= frame_index:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return False
                self._cond.wait(0.05 if remaining is None else min(0.05, remaining))
        return self.store.num_frames > frame_index

    def join(self, timeout: float | None = None):
        """Wait for the stream to finish and every queued question to resolve."""
        self._encoder_thread.join(timeout)
        for _ in self._workers:
            self._queue.put(None)
        for w in self._workers:
            w.join(timeout)
        if self._error is not None:
            raise self._error

    def metrics(self) -> SessionMetrics:
        start = self._enc_start or self._t0
        end = self._enc_end or time.perf_counter()
        wall = max(end - start, 1e-9)
        n = self.store.num_frames
        cpu = max(self._enc_cpu, 1e-9)
        return SessionMetrics(
            frames_encoded=n,
            encode_wall_seconds=wall,
            encode_compute_seconds=self.encoder.encode_seconds,
            encode_cpu_seconds=self._enc_cpu,
            frames_per_second=n / wall if n else 0.0,
            frames_per_cpu_second=n / cpu if n else 0.0,
            question_latency_us=dict(self._latency),
            peak_bytes=dict(self.store.peak_bytes),
            offloaded_bytes=self.store.offloaded_bytes,
            offload_bytes_per_hour=offload_bytes_per_hour(self.model.config, self.fps),
            queue_depth=list(self._depth),
            completed=self._completed,
            failed=self._failed,
        )


def run_stream(source: Iterable[TraceFrame], model: ToyModel, store: TieredStore, pool: WorkerPoolConfig,
               **kwargs) -> ServingSession:
    return ServingSession(source, model, store, pool, **kwargs).start()


def submit(session: ServingSession, request: QARequest) -> Future:
    return session.submit(request)


def metrics(session: ServingSession) -> SessionMetrics:
    return session.metrics()


def replay(session: ServingSession, requests: Sequence[tuple[int, QARequest]]) -> list[Future]:
    """Submit each request once the encoder has stored its admission frame.

    ``requests`` pairs an admission frame index with its request; a request
    rejected for backpressure is retried until the queue drains.
    """
    futures = []
    for frame_index, req in sorted(requests, key=lambda p: (p[0], p[1].question_id)):
        session.wait_for_frame(frame_index)
        while True:
            try:
                futures.append(session.submit(req))
                break
            except BackpressureError:
                time.sleep(0.005)
    return futures
