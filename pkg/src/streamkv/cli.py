"""Command-line front end: ``streamkv {gen,encode,ask,serve,bench,verify}``.

One ``key = value`` config file may hold both model keys (``num_layers``,
``local_window``...) and session keys (``workers``, ``queue_capacity``...);
unknown keys are ignored by each reader.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .errors import StreamKVError
from .harness import (BenchSweep, Needle, QuestionSpec, SyntheticTraceSpec, build_trace, encode_trace,
                      gen_trace, needle_spec, run_bench, verify_oracle)
from .model import ModelConfig, init_model, load_config
from .qa import RetrievalSettings, oracle_answer, run_qa
from .retrieval import BagOfTokensEmbedder
from .serving import QARequest, SessionConfig, replay, run_stream, write_metrics
from .store import TieredStore
from .trace import read_trace

MODES = ("internal", "external", "uniform", "oracle")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _needle(text: str) -> Needle:
    start, end, pattern = (int(x) for x in text.split(":"))
    return Needle(start, end, pattern)


def _question(text: str) -> QuestionSpec:
    qid, admission, pattern = text.split(":")
    return QuestionSpec(qid, int(admission), int(pattern))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--fps", type=float, default=0.5)
    common.add_argument("--window", type=int, help="local attention window l_L in tokens")
    common.add_argument("--r", type=int, default=64, help="frames retrieved per question")
    common.add_argument("--b", type=int, default=1, help="frames per retrieval block")
    common.add_argument("--mode", choices=MODES, default="internal")
    common.add_argument("--out", type=Path, help="output file or directory")
    common.add_argument("--identity", action="store_true", help="identity query/key projections")
    common.add_argument("--pooling", choices=("post_rope", "pre_rope"), default="post_rope")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="streamkv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen", parents=[common], help="write a synthetic planted-needle trace")
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--tokens-per-frame", type=int, default=16)
    p.add_argument("--vocab", type=int, default=256)
    p.add_argument("--needle", type=_needle, action="append", default=[], metavar="START:END:PATTERN")
    p.add_argument("--question", type=_question, action="append", default=[], metavar="ID:FRAME:PATTERN")

    p = sub.add_parser("encode", parents=[common], help="encode a trace into an on-disk store")
    p.add_argument("trace", type=Path)
    p.add_argument("--offload", action="store_true", help="move every non-hot frame to disk")

    p = sub.add_parser("ask", parents=[common], help="answer one question from a trace")
    p.add_argument("trace", type=Path)
    p.add_argument("--question-id", help="question from the trace's question file")
    p.add_argument("--tokens", type=_ints, help="question tokens, comma or space separated")
    p.add_argument("--at-frame", type=int, help="admission frame for --tokens (default: last frame)")
    p.add_argument("--max-new-tokens", type=int, default=8)

    p = sub.add_parser("serve", parents=[common], help="replay a trace through the serving runtime")
    p.add_argument("trace", type=Path)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("bench", parents=[common], help="sweep r, b and retrieval modes")
    p.add_argument("trace", type=Path)
    p.add_argument("--r-list", type=_ints, default=(8, 16, 32, 64))
    p.add_argument("--b-list", type=_ints, default=(1,))
    p.add_argument("--modes", default="internal,external,uniform")
    p.add_argument("--max-new-tokens", type=int, default=4)

    p = sub.add_parser("verify", parents=[common], help="cross-check against dense oracles")
    p.add_argument("trace", type=Path, nargs="?", help="default: a 20-frame synthetic trace")
    p.add_argument("--corrupt-frame", type=int, help="flip a byte in this frame's block first")
    return parser


def model_config(args) -> ModelConfig:
    cfg = load_config(args.config) if args.config else ModelConfig()
    if args.window is not None:
        cfg = cfg.replace(local_window=args.window, chunk_size=min(cfg.chunk_size, args.window))
    if args.identity:
        cfg = cfg.replace(projection_mode="identity")
    return cfg


def _emit(records, out: Path | None, table: str):
    if out is not None:
        with out.open("w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(table)


def cmd_gen(args) -> int:
    questions = args.question or [QuestionSpec("q0", args.frames - 1, 0)]
    needles = args.needle or needle_spec(args.seed, args.frames).needles
    spec = SyntheticTraceSpec(args.seed, args.frames, args.tokens_per_frame, args.vocab,
                              tuple(needles), tuple(questions), args.fps)
    out = args.out or Path("trace.jsonl")
    trace = gen_trace(spec, out)
    print(f"wrote {trace.num_frames} frames, {len(trace.questions)} questions to {out}")
    return 0


def cmd_encode(args) -> int:
    cfg = model_config(args)
    trace = read_trace(args.trace, cfg.tokens_per_frame)
    root = args.out or Path("store")
    store = TieredStore(cfg, root)
    enc = encode_trace(trace, init_model(cfg, args.seed), store, fps=args.fps)
    if args.offload:
        store.offload_to_disk(store.tier_members("ram"))
    store.write_manifest()
    by_tier = store.bytes_by_tier()
    print(f"frames {store.num_frames}  encode_s {enc.encoder.encode_seconds:.3f}")
    print("  ".join(f"{t} {n} B" for t, n in by_tier.items()))
    return 0


def cmd_ask(args) -> int:
    cfg = model_config(args)
    trace = read_trace(args.trace, cfg.tokens_per_frame)
    if args.question_id is not None:
        matches = [q for q in trace.questions if q.question_id == args.question_id]
        if not matches:
            raise StreamKVError(f"no question {args.question_id!r} in trace")
        q = matches[0]
        qid, tokens, frame, relevant = q.question_id, q.tokens, q.admission_frame, q.relevant
    elif args.tokens is not None:
        qid, tokens, relevant = "cli", args.tokens, ()
        frame = trace.num_frames - 1 if args.at_frame is None else args.at_frame
    else:
        raise StreamKVError("ask needs --question-id or --tokens")
    model = init_model(cfg, args.seed)
    if args.mode == "oracle":
        res = oracle_answer(model, [f.tokens for f in trace.frames[:frame + 1]], tokens, args.max_new_tokens, qid)
    else:
        enc = encode_trace(trace, model, fps=args.fps)
        settings = RetrievalSettings(args.mode, args.r, args.b, 1.0, args.pooling)
        res = run_qa(model, enc.store.snapshot(frame), tokens, settings, enc.index, enc.embedder,
                     args.max_new_tokens, qid, relevant or None)
    rec = res.as_record()
    _emit([rec], args.out, json.dumps(rec, sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    cfg = model_config(args)
    session_cfg = SessionConfig.load(args.config) if args.config else SessionConfig()
    overrides = {"r": args.r, "b": args.b, "mode": args.mode, "pooling": args.pooling, "fps": args.fps}
    if args.workers is not None:
        overrides["workers"] = args.workers
    session_cfg = dataclasses.replace(session_cfg, **overrides)
    trace = read_trace(args.trace, cfg.tokens_per_frame)
    model = init_model(cfg, args.seed)
    session = run_stream(trace.frames, model, TieredStore(cfg), session_cfg.pool(),
                         embedder=BagOfTokensEmbedder(cfg.vocab_size, seed=args.seed), fps=session_cfg.fps,
                         frames_per_chunk=session_cfg.frames_per_chunk)
    requests = [(q.admission_frame, QARequest(q.question_id, q.tokens, q.admission_frame / session_cfg.fps,
                                              relevant=q.relevant)) for q in trace.questions]
    futures = replay(session, requests)
    session.join()
    for fut in futures:
        print(json.dumps(fut.result().as_record(), sort_keys=True))
    m = session.metrics()
    if args.out is not None:
        write_metrics(m, args.out)
    print(m.summary_table())
    return 0


def cmd_bench(args) -> int:
    cfg = model_config(args)
    trace = read_trace(args.trace, cfg.tokens_per_frame)
    sweep = BenchSweep(args.r_list, args.b_list, tuple(m.strip() for m in args.modes.split(",") if m.strip()))
    report = run_bench(trace, cfg, sweep, args.seed, args.pooling, args.max_new_tokens)
    _emit(report.records(), args.out, report.summary_table())
    return 0


def cmd_verify(args) -> int:
    cfg = model_config(args)
    if args.trace is not None:
        trace = read_trace(args.trace, cfg.tokens_per_frame)
    else:
        trace = build_trace(needle_spec(args.seed, 20, span=2, tokens_per_frame=cfg.tokens_per_frame,
                                        vocab_size=cfg.vocab_size))
    report = verify_oracle(trace, cfg, args.seed, corrupt_frame=args.corrupt_frame)
    _emit(report.records(), args.out, report.summary_table())
    return 0 if report.passed else 1


COMMANDS = {"gen": cmd_gen, "encode": cmd_encode, "ask": cmd_ask, "serve": cmd_serve,
            "bench": cmd_bench, "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except (StreamKVError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
