"""Offline teacher traces: per-position top-K distributions and seq-KD export.

Teachers are forced-decoded over the ground-truth prefixes once, and the K
largest output probabilities per target position are renormalized and stored.
Training then never needs a teacher in memory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import Batch, ParallelCorpus, collate
from .evaluation import translate_corpus
from .model import TranslationModel

_MAGIC = b"PDTK"
_VERSION = 1


class TraceError(ValueError):
    pass


class TraceFormatError(TraceError):
    pass


class TraceMismatchError(TraceError):
    pass


@dataclass
class TeacherTrace:
    """Top-K records for every target token of every example of one corpus."""

    pair_id: int
    k: int
    vocab_size: int
    ids: list[torch.Tensor]    # per example [T_i, K] int64
    probs: list[torch.Tensor]  # per example [T_i, K] float32

    @property
    def num_examples(self) -> int:
        return len(self.ids)

    def validate_against(self, corpus: ParallelCorpus) -> None:
        if self.num_examples != len(corpus.examples):
            raise TraceMismatchError(
                f"trace has {self.num_examples} examples, corpus has {len(corpus.examples)}"
            )
        for i, (ids, (_, tgt)) in enumerate(zip(self.ids, corpus.examples)):
            if ids.shape[0] != len(tgt):
                raise TraceMismatchError(
                    f"example {i}: trace has {ids.shape[0]} records, target has {len(tgt)} tokens"
                )


def compute_topk_trace(
    teacher: TranslationModel,
    corpus: ParallelCorpus,
    k: int,
    chunk_size: int = 64,
) -> TeacherTrace:
    """Force-decode the corpus through the teacher and keep the top-K mass.

    Probability ties resolve to the lower token id; the kept mass is
    renormalized to sum to one.
    """
    vocab = teacher.config.vocab_size
    if not 1 <= k <= vocab:
        raise TraceError(f"k must be in [1, {vocab}], got {k}")
    max_id = max(max(max(s), max(t)) for s, t in corpus.examples)
    if max_id >= vocab:
        raise TraceMismatchError(
            f"corpus token id {max_id} outside teacher vocabulary of {vocab}"
        )
    all_ids: list[torch.Tensor] = []
    all_probs: list[torch.Tensor] = []
    for start in range(0, len(corpus.examples), chunk_size):
        chunk = corpus.examples[start : start + chunk_size]
        batch = collate(chunk, corpus.pair.id, range(start, start + len(chunk)))
        logprobs = teacher.forward_batch(batch, train=False)
        probs = logprobs.exp()
        # Stable descending sort breaks probability ties by ascending token id.
        sorted_probs, sorted_ids = torch.sort(probs, dim=-1, descending=True, stable=True)
        top_p = sorted_probs[:, :, :k]
        top_i = sorted_ids[:, :, :k]
        top_p = top_p / top_p.sum(dim=-1, keepdim=True)
        for b, (_, tgt) in enumerate(chunk):
            t_len = len(tgt)
            all_ids.append(top_i[b, :t_len].to(torch.int64).clone())
            all_probs.append(top_p[b, :t_len].to(torch.float32).clone())
    return TeacherTrace(corpus.pair.id, k, vocab, all_ids, all_probs)


def save_trace(trace: TeacherTrace, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IIIIQ", _VERSION, trace.pair_id, trace.k, trace.vocab_size, trace.num_examples))
        for ids, probs in zip(trace.ids, trace.probs):
            t_len = ids.shape[0]
            f.write(struct.pack("<I", t_len))
            f.write(ids.numpy().astype("<u4").tobytes())
            f.write(probs.numpy().astype("<f4").tobytes())


def export_topk(
    teacher: TranslationModel,
    corpus: ParallelCorpus,
    k: int,
    out_path: str | Path,
    chunk_size: int = 64,
) -> TeacherTrace:
    trace = compute_topk_trace(teacher, corpus, k, chunk_size)
    save_trace(trace, out_path)
    return trace


def load_trace(path: str | Path, expected_k: int | None = None) -> TeacherTrace:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise TraceFormatError(f"{path}: truncated trace file")
        chunk = view[off : off + n]
        off += n
        return chunk

    if bytes(take(4)) != _MAGIC:
        raise TraceFormatError(f"{path}: bad magic, not a trace file")
    version, pair_id, k, vocab_size, num_examples = struct.unpack("<IIIIQ", take(24))
    if version != _VERSION:
        raise TraceFormatError(f"{path}: unsupported trace version {version}")
    if expected_k is not None and k != expected_k:
        raise TraceMismatchError(f"{path}: trace has K={k}, expected K={expected_k}")
    ids: list[torch.Tensor] = []
    probs: list[torch.Tensor] = []
    for _ in range(num_examples):
        (t_len,) = struct.unpack("<I", take(4))
        id_arr = np.frombuffer(take(4 * t_len * k), dtype="<u4").reshape(t_len, k)
        prob_arr = np.frombuffer(take(4 * t_len * k), dtype="<f4").reshape(t_len, k)
        rec_ids = torch.from_numpy(id_arr.astype(np.int64))
        rec_probs = torch.from_numpy(prob_arr.astype(np.float32))
        if int(rec_ids.max()) >= vocab_size:
            raise TraceFormatError(f"{path}: record token id outside vocabulary of {vocab_size}")
        sums = rec_probs.sum(dim=-1)
        if bool((sums - 1.0).abs().max() > 1e-6):
            raise TraceFormatError(f"{path}: record probabilities do not sum to 1")
        if bool((rec_probs[:, 1:] > rec_probs[:, :-1]).any()):
            raise TraceFormatError(f"{path}: record probabilities are not descending")
        if k > 1:
            s, _ = rec_ids.sort(dim=-1)
            if bool((s[:, 1:] == s[:, :-1]).any()):
                raise TraceFormatError(f"{path}: duplicate token ids within a record")
        ids.append(rec_ids)
        probs.append(rec_probs)
    if off != len(view):
        raise TraceFormatError(f"{path}: {len(view) - off} trailing bytes")
    return TeacherTrace(pair_id, k, vocab_size, ids, probs)


def batch_records(trace: TeacherTrace, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
    """Assemble [B, T, K] record tensors for a batch; pad rows carry zero mass."""
    bsz, t_max = batch.tgt_out.shape
    ids = torch.zeros((bsz, t_max, trace.k), dtype=torch.int64)
    probs = torch.zeros((bsz, t_max, trace.k), dtype=torch.float32)
    for b, ex_id in enumerate(batch.example_ids):
        rec_ids = trace.ids[ex_id]
        t_len = rec_ids.shape[0]
        ids[b, :t_len] = rec_ids
        probs[b, :t_len] = trace.probs[ex_id]
    return ids, probs


def export_seqkd(
    teacher: TranslationModel,
    corpus: ParallelCorpus,
    beam: int,
    alpha: float,
    max_len: int,
    out_src: str | Path,
    out_tgt: str | Path,
    bpe,
) -> dict:
    """Beam-decode every source and write the 1-best output as a pseudo target.

    Returns the sidecar report (also written next to out_tgt) listing the
    0-based line numbers that hit max_len without producing eos.
    """
    sources = [src for src, _ in corpus.examples]
    hyps = translate_corpus(teacher, sources, beam, alpha, max_len)
    src_lines = [bpe.decode(src) for src in sources]
    tgt_lines = [bpe.decode(h.tokens) for h in hyps]
    Path(out_src).write_text("\n".join(src_lines) + "\n", encoding="utf-8")
    Path(out_tgt).write_text("\n".join(tgt_lines) + "\n", encoding="utf-8")
    report = {
        "pair": corpus.pair.key,
        "sentences": len(sources),
        "beam": beam,
        "alpha": alpha,
        "truncated_lines": [i for i, h in enumerate(hyps) if h.truncated],
    }
    report_path = Path(str(out_tgt) + ".report.json")
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report
