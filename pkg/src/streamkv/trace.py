"""Line-delimited trace files.

Frames file, one record per line::

    {"frame_index": 0, "tokens": [...M ids...], "labels": ["needle:0"]}

Questions live in a sibling file ``<stem>.questions.jsonl``::

    {"question_id": "q0", "admission_frame": 90, "tokens": [...],
     "relevant": [40, 41, 42]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .errors import ShapeError, SpecError


@dataclass(frozen=True)
class TraceFrame:
    frame_index: int
    tokens: tuple[int, ...]
    labels: tuple[str, ...] = ()
    timestamp: float | None = None


@dataclass(frozen=True)
class TraceQuestion:
    question_id: str
    admission_frame: int
    tokens: tuple[int, ...]
    relevant: tuple[int, ...] = ()


@dataclass
class Trace:
    frames: list[TraceFrame] = field(default_factory=list)
    questions: list[TraceQuestion] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def tokens(self) -> list[tuple[int, ...]]:
        return [f.tokens for f in self.frames]


def _dump(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def questions_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".questions.jsonl")


def write_trace(trace: Trace, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for f in trace.frames:
            rec = {"frame_index": f.frame_index, "tokens": list(f.tokens), "labels": list(f.labels)}
            if f.timestamp is not None:
                rec["timestamp"] = f.timestamp
            fh.write(_dump(rec) + "\n")
    with questions_path(path).open("w") as fh:
        for q in trace.questions:
            fh.write(_dump({
                "question_id": q.question_id,
                "admission_frame": q.admission_frame,
                "tokens": list(q.tokens),
                "relevant": list(q.relevant),
            }) + "\n")
    return path


def iter_frames(path: str | Path, tokens_per_frame: int | None = None) -> Iterator[TraceFrame]:
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            tokens = tuple(int(t) for t in rec["tokens"])
            if tokens_per_frame is not None and len(tokens) != tokens_per_frame:
                raise ShapeError(f"line {lineno}: expected {tokens_per_frame} tokens, got {len(tokens)}")
            yield TraceFrame(int(rec["frame_index"]), tokens, tuple(rec.get("labels", ())), rec.get("timestamp"))


def read_trace(path: str | Path, tokens_per_frame: int | None = None) -> Trace:
    frames = list(iter_frames(path, tokens_per_frame))
    for i, f in enumerate(frames):
        if f.frame_index != i:
            raise SpecError(f"trace frames must be numbered 0..T-1; line {i + 1} has {f.frame_index}")
    questions = []
    qpath = questions_path(path)
    if qpath.exists():
        for line in qpath.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                questions.append(TraceQuestion(
                    str(rec["question_id"]), int(rec["admission_frame"]),
                    tuple(int(t) for t in rec["tokens"]), tuple(int(i) for i in rec.get("relevant", ())),
                ))
    return Trace(frames, questions)


def frames_from_tokens(token_frames: Iterable[Iterable[int]]) -> list[TraceFrame]:
    return [TraceFrame(i, tuple(int(t) for t in toks)) for i, toks in enumerate(token_frames)]
