"""Replay a synthetic stream through the serving runtime with questions arriving mid-stream.

    python3 scripts/streaming_demo.py --frames 300 --workers 4
"""

import argparse
import tempfile

from streamkv.harness import Needle, QuestionSpec, SyntheticTraceSpec, build_trace
from streamkv.model import ModelConfig, init_model
from streamkv.retrieval import BagOfTokensEmbedder
from streamkv.serving import QARequest, WorkerPoolConfig, replay, run_stream
from streamkv.store import TieredStore


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=300)
    ap.add_argument("--workers", type=int, default=4)
    ap.add_argument("--r", type=int, default=16)
    ap.add_argument("--mode", choices=("internal", "external", "uniform"), default="external")
    ap.add_argument("--fps", type=float, default=0.5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    T = args.frames
    needles = (Needle(T // 10, T // 10 + 2, 0), Needle(T // 2, T // 2 + 2, 1))
    questions = (QuestionSpec("early-needle", T // 3, 0), QuestionSpec("late-needle-before", T // 3, 1),
                 QuestionSpec("late-needle-after", T - 1, 1))
    trace = build_trace(SyntheticTraceSpec(args.seed, T, needles=needles, questions=questions, fps=args.fps))

    cfg = ModelConfig()
    model = init_model(cfg, args.seed)
    pool = WorkerPoolConfig(workers=args.workers, r=args.r, mode=args.mode, max_new_tokens=4)
    with tempfile.TemporaryDirectory() as root:
        # Small RAM budget so older frames spill to disk while the stream runs.
        store = TieredStore(cfg, root, ram_budget_bytes=64 * cfg.num_layers * 2 * cfg.tokens_per_frame
                            * cfg.model_dim * 4)
        session = run_stream(trace.frames, model, store, pool, embedder=BagOfTokensEmbedder(cfg.vocab_size),
                             fps=args.fps)
        futures = replay(session, [(q.admission_frame, QARequest(q.question_id, q.tokens, q.admission_frame / args.fps,
                                                                 relevant=q.relevant)) for q in trace.questions])
        session.join()
        for q, fut in zip(trace.questions, futures):
            res = fut.result()
            hits = sorted(set().union(*res.retrieved) & set(q.relevant))
            print(f"{q.question_id:<20} admitted at frame {res.admission_frame:<4} relevant {list(q.relevant)} "
                  f"retrieved-relevant {hits} answer {res.answer_ids}")
        print(session.metrics().summary_table())
        print("tiers:", store.bytes_by_tier())


if __name__ == "__main__":
    main()
