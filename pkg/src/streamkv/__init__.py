"""Streaming video question answering over a tiered key-value cache."""

from .encoder import StreamingEncoder
from .harness import BenchSweep, SyntheticTraceSpec, build_trace, run_bench, verify_oracle
from .model import ModelConfig, init_model
from .qa import RetrievalSettings, oracle_answer, run_qa
from .retrieval import RetrievalIndex, recall, retrieve, uniform_sample
from .serving import QARequest, WorkerPoolConfig, run_stream
from .store import FrameKV, TieredStore, size_bytes

__all__ = [
    "BenchSweep", "FrameKV", "ModelConfig", "QARequest", "RetrievalIndex", "RetrievalSettings",
    "StreamingEncoder", "SyntheticTraceSpec", "TieredStore", "WorkerPoolConfig", "build_trace",
    "init_model", "oracle_answer", "recall", "retrieve", "run_bench", "run_qa", "run_stream",
    "size_bytes", "uniform_sample", "verify_oracle",
]
