"""Experiment substrate: synthetic traces, benchmark sweeps, oracle verification."""

from __future__ import annotations

import json
import statistics
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import StreamingEncoder
from .errors import CorruptionError, SpecError, StreamKVError
from .model import ModelConfig, OpCounter, ToyModel, forward_monolithic, init_model
from .qa import RetrievalSettings, oracle_answer, run_qa
from .retrieval import BagOfTokensEmbedder, RetrievalIndex, recall, uniform_sample
from .store import CHECKSUM, HEADER, FrameKV, TieredStore, size_bytes
from .trace import Trace, TraceFrame, TraceQuestion, write_trace


# -- synthetic traces --

@dataclass(frozen=True)
class Needle:
    start: int
    end: int  # inclusive
    pattern: int


@dataclass(frozen=True)
class QuestionSpec:
    question_id: str
    admission_frame: int
    pattern: int
    relevant: tuple[int, ...] | None = None  # derived from the needles when None


@dataclass(frozen=True)
class SyntheticTraceSpec:
    seed: int
    num_frames: int
    tokens_per_frame: int = 16
    vocab_size: int = 256
    needles: tuple[Needle, ...] = ()
    questions: tuple[QuestionSpec, ...] = ()
    fps: float = 0.5


def vocab_split(vocab_size: int) -> tuple[range, range]:
    """Background ids, needle-pattern ids; the top id stays free for end-of-answer."""
    cut = (3 * vocab_size) // 4
    return range(0, cut), range(cut, vocab_size - 1)


def pattern_tokens(seed: int, pattern: int, tokens_per_frame: int, vocab_size: int) -> tuple[int, ...]:
    _, needle_ids = vocab_split(vocab_size)
    rng = np.random.default_rng([seed, 1000 + pattern])
    picks = rng.integers(needle_ids.start, needle_ids.stop, tokens_per_frame)
    return tuple(int(t) for t in picks)


def build_trace(spec: SyntheticTraceSpec) -> Trace:
    T, M = spec.num_frames, spec.tokens_per_frame
    spans = sorted(spec.needles, key=lambda n: n.start)
    for n in spans:
        if not 0 <= n.start <= n.end < T:
            raise SpecError(f"needle {n} outside 0..{T - 1}")
    for a, b in zip(spans, spans[1:]):
        if b.start <= a.end:
            raise SpecError(f"needles {a} and {b} overlap")
    background, _ = vocab_split(spec.vocab_size)
    rng = np.random.default_rng([spec.seed, 0])
    frames = []
    needle_at = {f: n for n in spans for f in range(n.start, n.end + 1)}
    for i in range(T):
        if i in needle_at:
            n = needle_at[i]
            tokens = pattern_tokens(spec.seed, n.pattern, M, spec.vocab_size)
            labels = (f"needle:{n.pattern}",)
            rng.integers(background.start, background.stop, M)  # keep the noise stream aligned
        else:
            tokens = tuple(int(t) for t in rng.integers(background.start, background.stop, M))
            labels = ()
        frames.append(TraceFrame(i, tokens, labels, i / spec.fps))
    questions = []
    for q in spec.questions:
        if not 0 <= q.admission_frame < T:
            raise SpecError(f"question {q.question_id} admitted outside the stream")
        if q.relevant is None:
            relevant = tuple(f for f, n in sorted(needle_at.items())
                             if n.pattern == q.pattern and f <= q.admission_frame)
        else:
            relevant = tuple(sorted(q.relevant))
            if any(f > q.admission_frame for f in relevant):
                raise SpecError(f"question {q.question_id} marks frames after its admission as relevant")
        questions.append(TraceQuestion(q.question_id, q.admission_frame,
                                       pattern_tokens(spec.seed, q.pattern, M, spec.vocab_size), relevant))
    return Trace(frames, questions)


def gen_trace(spec: SyntheticTraceSpec, path: str | Path) -> Trace:
    trace = build_trace(spec)
    write_trace(trace, path)
    return trace


def needle_spec(seed: int, num_frames: int = 200, span: int = 3, admission: int | None = None,
                start: int | None = None, tokens_per_frame: int = 16, vocab_size: int = 256) -> SyntheticTraceSpec:
    """One needle of ``span`` frames and one question asking about it."""
    admission = num_frames - 1 if admission is None else admission
    if start is None:
        rng = np.random.default_rng([seed, 7])
        start = int(rng.integers(0, admission - span + 2))
    return SyntheticTraceSpec(
        seed, num_frames, tokens_per_frame, vocab_size,
        needles=(Needle(start, start + span - 1, 0),),
        questions=(QuestionSpec("q0", admission, 0),),
    )


# -- uniform-sampling baseline expectations --

def uniform_hits_enumerated(num_frames: int, r: int, relevant: Sequence[int]) -> int:
    """Count relevant frames hit by the evenly spaced baseline, in exact integer arithmetic."""
    if r >= num_frames:
        picks = set(range(num_frames))
    else:
        picks = {(2 * i + 1) * num_frames // (2 * r) for i in range(r)}
    return sum(1 for f in relevant if f in picks)


def expected_uniform_recall_enumerated(num_frames: int, r: int, span: int) -> float:
    """Mean baseline recall over every placement of a ``span``-frame needle."""
    starts = range(num_frames - span + 1)
    total = sum(uniform_hits_enumerated(num_frames, r, range(s, s + span)) for s in starts)
    return total / (len(starts) * span)


def expected_uniform_recall_analytic(num_frames: int, r: int, span: int) -> float:
    """Each pick ``p`` is covered by ``min(p, T-s) - max(0, p-s+1) + 1`` needle placements."""
    placements = num_frames - span + 1
    covered = 0
    for p in uniform_sample(num_frames, r):
        covered += min(p, num_frames - span) - max(0, p - span + 1) + 1
    return covered / (placements * span)


# -- encoding helpers --

@dataclass
class Encoded:
    model: ToyModel
    store: TieredStore
    index: RetrievalIndex
    embedder: BagOfTokensEmbedder
    encoder: StreamingEncoder


def encode_trace(trace: Trace, model: ToyModel, store: TieredStore | None = None,
                 frames_per_chunk: int | None = None, embedder_dim: int = 64, fps: float = 0.5) -> Encoded:
    cfg = model.config
    store = store if store is not None else TieredStore(cfg)
    index = RetrievalIndex(cfg.num_layers, cfg.model_dim)
    embedder = BagOfTokensEmbedder(cfg.vocab_size, embedder_dim, seed=model.seed)
    enc = StreamingEncoder(model, store, index, embedder, fps)
    enc.encode_stream(trace.frames, frames_per_chunk)
    return Encoded(model, store, index, embedder, enc)


# -- benchmark --

@dataclass(frozen=True)
class BenchSweep:
    r_values: tuple[int, ...] = (8, 16, 32, 64)
    b_values: tuple[int, ...] = (1,)
    modes: tuple[str, ...] = ("internal", "external", "uniform")


BLOCKLESS_MODES = ("uniform", "oracle", "all", "none")


@dataclass
class BenchReport:
    rows: list[dict]
    config: dict
    sweep: dict

    def aggregates(self) -> list[dict]:
        groups: dict[tuple, list[dict]] = {}
        for row in self.rows:
            groups.setdefault((row["mode"], row["r"], row["b"]), []).append(row)
        out = []
        for (mode, r, b), rows in groups.items():
            recalls = [x["recall"] for x in rows if x["recall"] is not None]
            out.append({
                "mode": mode, "r": r, "b": b, "questions": len(rows),
                "mean_recall": statistics.fmean(recalls) if recalls else None,
                "mean_latency_us": statistics.fmean(sum(x["latency_us"].values()) for x in rows),
                "mean_blocks": statistics.fmean(statistics.fmean(x["blocks_per_layer"]) for x in rows),
                "peak_bytes": max(sum(x["peak_bytes"].values()) for x in rows),
            })
        return out

    def records(self) -> list[dict]:
        rows = [{"kind": "row", **r} for r in self.rows]
        aggs = [{"kind": "aggregate", **a} for a in self.aggregates()]
        return rows + aggs + [{"kind": "config", "config": self.config, "sweep": self.sweep}]

    def write(self, path: str | Path):
        with Path(path).open("w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def summary_table(self) -> str:
        head = f"{'mode':<9} {'r':>4} {'b':>3} {'recall':>7} {'blocks':>7} {'latency_us':>11}"
        lines = [head, "-" * len(head)]
        for a in self.aggregates():
            rec = "n/a" if a["mean_recall"] is None else f"{a['mean_recall']:.3f}"
            lines.append(f"{a['mode']:<9} {a['r']:>4} {a['b']:>3} {rec:>7} "
                         f"{a['mean_blocks']:>7.2f} {a['mean_latency_us']:>11.0f}")
        return "\n".join(lines)


def run_bench(trace: Trace, config: ModelConfig, sweep: BenchSweep = BenchSweep(), seed: int = 0,
              pooling: str = "post_rope", max_new_tokens: int = 4, policy: str = "consecutive",
              encoded: Encoded | None = None) -> BenchReport:
    """Encode the trace once, then answer every question at every sweep point."""
    model = encoded.model if encoded is not None else init_model(config, seed)
    enc = encoded if encoded is not None else encode_trace(trace, model)
    rows = []
    for mode in sweep.modes:
        b_values = (1,) if mode in BLOCKLESS_MODES else sweep.b_values
        for r in sweep.r_values:
            for b in b_values:
                settings = RetrievalSettings(mode, r, b, 1.0, pooling, policy)
                for q in trace.questions:
                    snap = enc.store.snapshot(q.admission_frame)
                    counter = OpCounter()
                    res = run_qa(model, snap, q.tokens, settings, enc.index, enc.embedder,
                                 max_new_tokens, q.question_id, q.relevant, counter)
                    union = set().union(*res.retrieved)
                    rec = recall(union, q.relevant) if q.relevant else None
                    per_layer = [recall(x, q.relevant) for x in res.retrieved] if q.relevant else None
                    rows.append({
                        "mode": mode, "r": r, "b": b, "question_id": q.question_id,
                        "admission_frame": q.admission_frame,
                        "recall": rec, "recall_per_layer": per_layer,
                        "blocks_per_layer": [x.num_blocks for x in res.retrievals],
                        "retrieved": [list(x) for x in res.retrieved],
                        "latency_us": {k: round(v, 1) for k, v in res.latencies_us.items()},
                        "attention_pairs": res.attention_pairs,
                        "peak_bytes": dict(enc.store.peak_bytes),
                        "answer_ids": res.answer_ids,
                    })
    return BenchReport(rows, asdict(config), asdict(sweep))


# -- oracle verification --

@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""
    max_deviation: float = 0.0


@dataclass
class VerifyReport:
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def records(self) -> list[dict]:
        return [asdict(c) for c in self.checks]

    def summary_table(self) -> str:
        lines = []
        for c in self.checks:
            lines.append(f"{'PASS' if c.passed else 'FAIL'}  {c.name:<22} max_dev={c.max_deviation:.2e}  {c.detail}")
        lines.append("ALL PASS" if self.passed else "FAILED")
        return "\n".join(lines)


def _frames_bit_equal(a: Sequence[FrameKV], b: Sequence[FrameKV]) -> bool:
    return len(a) == len(b) and all(x.equals(y) for x, y in zip(a, b))


def verify_oracle(trace: Trace, config: ModelConfig, seed: int = 0, max_new_tokens: int = 4,
                  corrupt_frame: int | None = None, workdir: str | Path | None = None) -> VerifyReport:
    """Cross-check streamed encoding, retrieval QA and the store against dense oracles.

    Only the prefix of the trace that fits the local window is compared with
    dense attention; chunking and store checks cover the whole trace.
    ``corrupt_frame`` flips one byte in that frame's block file to exercise
    corruption detection.
    """
    report = VerifyReport()
    if trace.num_frames == 0:
        report.checks.append(Check("empty_trace", True, "nothing to verify"))
        return report
    cfg = config.replace(eos_id=None)
    model = init_model(cfg, seed)
    M = cfg.tokens_per_frame
    fit = min(trace.num_frames, cfg.window_frames)
    tokens = [t for f in trace.frames[:fit] for t in f.tokens]

    # Streamed vs monolithic, per layer.
    prefix = Trace(trace.frames[:fit])
    streamed = encode_trace(prefix, model)
    mono = forward_monolithic(model, tokens)
    dev = 0.0
    for layer in range(cfg.num_layers):
        keys = np.concatenate([f.keys[layer] for f in streamed.store.load(range(fit))])
        vals = np.concatenate([f.values[layer] for f in streamed.store.load(range(fit))])
        dev = max(dev, float(np.abs(keys - mono.kv[layer].keys).max()),
                  float(np.abs(vals - mono.kv[layer].values).max()))
    report.checks.append(Check("stream_vs_monolithic", dev < 1e-5, f"{fit} frames", dev))

    # Chunk-size invariance across the full trace.
    runs = []
    for chunk in (1, M, cfg.chunk_size):
        enc = StreamingEncoder(model, fps=0.5)
        frames = []
        per = max(1, cfg.chunk_size // M)
        for i in range(0, trace.num_frames, per):
            batch = trace.frames[i:i + per]
            frames.extend(enc.encode_chunk([f.tokens for f in batch], [f.frame_index / 0.5 for f in batch],
                                           chunk_tokens=chunk))
        runs.append(frames)
    same = _frames_bit_equal(runs[0], runs[1]) and _frames_bit_equal(runs[0], runs[2])
    report.checks.append(Check("chunk_invariance", same, f"chunks 1/{M}/{cfg.chunk_size} tokens"))

    # Total-retrieval QA vs dense oracle.
    questions = [q for q in trace.questions if q.admission_frame < fit] or [
        TraceQuestion("self", fit - 1, trace.frames[fit - 1].tokens)]
    mismatches = []
    qa_dev = 0.0
    for q in questions:
        snap = streamed.store.snapshot(q.admission_frame)
        got = run_qa(model, snap, q.tokens, RetrievalSettings("all"), streamed.index,
                     max_new_tokens=max_new_tokens)
        ref = oracle_answer(model, [f.tokens for f in trace.frames[:q.admission_frame + 1]], q.tokens,
                            max_new_tokens)
        if got.first_logits is not None and ref.first_logits is not None:
            qa_dev = max(qa_dev, float(np.abs(got.first_logits - ref.first_logits).max()))
        if got.answer_ids != ref.answer_ids:
            mismatches.append(q.question_id)
    report.checks.append(Check("total_retrieval_qa", not mismatches and qa_dev < 1e-4,
                               f"{len(questions)} questions" + (f"; mismatched {mismatches}" if mismatches else ""),
                               qa_dev))

    # Store round trip through the disk tier.
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(workdir) if workdir is not None else Path(tmp)
        store = TieredStore(cfg, root / "store", sink_frames=0, hot_frames=0)
        originals = runs[2]
        for f in originals:
            store.append(f)
        store.offload_to_disk(range(len(originals)))
        payload = sum((root / "store" / f"frame_{f.frame_index}.rkv").stat().st_size for f in originals)
        if corrupt_frame is not None:
            path = root / "store" / f"frame_{corrupt_frame}.rkv"
            blob = bytearray(path.read_bytes())
            blob[len(blob) // 2] ^= 0xFF
            path.write_bytes(bytes(blob))
        try:
            loaded = store.load(range(len(originals)))
            ok = _frames_bit_equal(originals, loaded)
            detail = f"{len(originals)} frames"
        except CorruptionError as exc:
            ok, detail = False, f"corrupted frame {exc.frame_index}"
        except StreamKVError as exc:
            ok, detail = False, str(exc)
        report.checks.append(Check("store_round_trip", ok, detail))
        overhead = (HEADER.size + CHECKSUM.size) * len(originals)
        sized = payload - overhead == size_bytes(cfg, len(originals))
        report.checks.append(Check("size_accounting", sized, f"{payload - overhead} payload bytes"))
    return report
