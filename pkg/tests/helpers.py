"""Shared oracles and fixtures for the test suites."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from streamkv.model import ModelConfig, init_model
from streamkv.retrieval import BagOfTokensEmbedder
from streamkv.serving import QARequest, ServingSession, WorkerPoolConfig
from streamkv.store import TieredStore
from streamkv.tensor import rope_rotate
from streamkv.trace import TraceFrame

# Four-frame window, one sink frame, no end token so answers are fixed length.
TINY = ModelConfig(num_layers=2, num_heads=2, head_dim=4, tokens_per_frame=4, vocab_size=32,
                   local_window=16, chunk_size=8, sink_frames=1, eos_id=None)
FPS = 0.5


def dense_reference(model, tokens):
    """Full causal attention, one query row and head at a time, no cache.

    Returns per-layer rotated keys, values and the hidden rows entering each
    layer plus the final hidden rows.
    """
    cfg = model.config
    h = model.embedding[np.asarray(tokens)].astype(np.float64)
    n, D = len(tokens), cfg.head_dim
    pos = np.arange(n)
    keys, values, hidden = [], [], [h]
    for w in model.layers:
        q = rope_rotate((h @ w.w_q).astype(np.float32), pos, D).astype(np.float64)
        k = rope_rotate((h @ w.w_k).astype(np.float32), pos, D).astype(np.float64)
        v = h @ w.w_v
        attn = np.zeros_like(h)
        for t in range(n):
            for head in range(cfg.num_heads):
                sl = slice(head * D, (head + 1) * D)
                s = k[:t + 1, sl] @ q[t, sl] / math.sqrt(D)
                e = np.exp(s - s.max())
                attn[t, sl] = (e / e.sum()) @ v[:t + 1, sl]
        keys.append(k)
        values.append(v)
        h = h + attn @ w.w_o
        hidden.append(h)
    return keys, values, hidden


def sort_all_oracle(vectors, qvec, r, b):
    """Score every block with scalar loops, sort everything, keep the first ceil(r/b)."""
    n = len(vectors)
    blocks = []
    for start in range(0, n, b):
        members = list(range(start, min(start + b, n)))
        vec = [sum(float(vectors[i][d]) for i in members) / len(members) for d in range(len(qvec))]
        dot = sum(v * float(q) for v, q in zip(vec, qvec))
        nv = math.sqrt(sum(v * v for v in vec))
        nq = math.sqrt(sum(float(q) ** 2 for q in qvec))
        blocks.append((-(dot / (nv * nq)), members[0], members))
    blocks.sort()
    picked = []
    for _, _, members in blocks[:math.ceil(r / b)]:
        picked.extend(members)
    return sorted(picked)


def frames_from(tokens, fps=FPS):
    return [TraceFrame(i, tuple(t), (), i / fps) for i, t in enumerate(tokens)]


@dataclass
class GatingOutcome:
    workers: int
    cut: int
    compared: int
    mismatched: list
    leaked: list  # (question_id, frame) pairs retrieved past admission


class UngatedSession(ServingSession):
    """Deliberately broken: answers against whatever the store holds right now."""

    def _answer(self, job):
        from streamkv.qa import QAPipeline
        snap = self.store.snapshot()
        pipe = QAPipeline(self.model, snap, self.index, self.pool.retrieval(), self.embedder)
        return pipe.run(job.request.tokens, self.pool.max_new_tokens, job.request.question_id)


def _run(frames, model, pool, plan, session_cls):
    embedder = BagOfTokensEmbedder(model.config.vocab_size, dim=16, seed=0)
    session = session_cls(frames, model, TieredStore(model.config), pool, embedder=embedder, fps=FPS)
    futures = {}
    for req, when in plan:
        if when < 0:
            futures[req.question_id] = session.submit(req)
    session.start()
    for req, when in sorted((p for p in plan if p[1] >= 0), key=lambda p: p[1]):
        session.wait_for_frame(when)
        futures[req.question_id] = session.submit(req)
    session.join()
    return {qid: fut.result() for qid, fut in futures.items()}


def gating_trial(seed: int, session_cls=ServingSession) -> GatingOutcome:
    """One randomized schedule: perturb every frame after a cut and compare answers.

    Questions are admitted at or before the cut (some at a timestamp before the
    first frame). Each is submitted either before the stream starts or once a
    random frame has been stored, so workers race the encoder.
    """
    rng = np.random.default_rng(seed)
    cfg = TINY
    model = init_model(cfg, int(rng.integers(0, 4)))
    T = int(rng.integers(6, 17))
    cut = int(rng.integers(0, T - 1))
    workers = int(rng.integers(1, 9))
    base = rng.integers(0, cfg.vocab_size, (T, cfg.tokens_per_frame))
    perturbed = base.copy()
    perturbed[cut + 1:] = rng.integers(0, cfg.vocab_size, (T - cut - 1, cfg.tokens_per_frame))
    mode = str(rng.choice(["internal", "external", "uniform"]))
    pool = WorkerPoolConfig(workers=workers, queue_capacity=64, r=int(rng.choice([1, 2, 4])),
                            b=int(rng.choice([1, 2])), mode=mode, max_new_tokens=3)
    plan = []
    for i in range(int(rng.integers(1, 6))):
        admission = -1.0 if rng.random() < 0.15 else float(rng.integers(0, cut + 1)) / FPS
        tokens = tuple(int(t) for t in rng.integers(0, cfg.vocab_size, int(rng.integers(1, 4))))
        when = -1 if rng.random() < 0.5 else int(rng.integers(0, T))
        plan.append((QARequest(f"q{i}", tokens, admission), when))
    a = _run(frames_from(base), model, pool, plan, session_cls)
    b = _run(frames_from(perturbed), model, pool, plan, session_cls)
    mismatched, leaked = [], []
    for req, _ in plan:
        ra, rb = a[req.question_id], b[req.question_id]
        if ra.answer_ids != rb.answer_ids or ra.first_logits.tobytes() != rb.first_logits.tobytes():
            mismatched.append(req.question_id)
        limit = req.admission_timestamp * FPS
        for layer in ra.retrieved:
            leaked.extend((req.question_id, f) for f in layer if f > limit)
    return GatingOutcome(workers, cut, len(plan), mismatched, leaked)
