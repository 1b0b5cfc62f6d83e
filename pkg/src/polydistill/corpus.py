"""Parallel corpora, upsampling, and token-budgeted batch sampling."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .bpe import BOS_ID, EOS_ID, PAD_ID, BpeModel
from .seeding import derive_seed


class CorpusError(ValueError):
    pass


class LineCountMismatchError(CorpusError):
    def __init__(self, src_count: int, tgt_count: int):
        super().__init__(f"source has {src_count} lines but target has {tgt_count}")
        self.src_count = src_count
        self.tgt_count = tgt_count


class CorpusEncodingError(CorpusError):
    def __init__(self, path: str, line_no: int):
        super().__init__(f"{path}: line {line_no} is not valid UTF-8")
        self.path = path
        self.line_no = line_no


class TokenBudgetError(CorpusError):
    pass


@dataclass(frozen=True)
class LanguagePair:
    """One translation direction; ids are dense 0..L-1 across a run."""

    id: int
    src_code: str
    tgt_code: str

    def __post_init__(self):
        if self.id < 0:
            raise CorpusError("pair id must be >= 0")
        if self.src_code == self.tgt_code:
            raise CorpusError(f"source and target code are both {self.src_code!r}")

    @property
    def key(self) -> str:
        return f"{self.src_code}-{self.tgt_code}"


@dataclass
class ParallelCorpus:
    pair: LanguagePair
    examples: list[tuple[list[int], list[int]]]
    dropped_overlong: int = 0
    dropped_empty: int = 0

    def __len__(self) -> int:
        return len(self.examples)


@dataclass
class Batch:
    """Padded tensors for one mini-batch of a single language pair.

    tgt_in is tgt_out shifted right behind a BOS; tgt_mask marks non-pad
    target positions, whose count is what the token budget limits.
    example_ids are indices into the pre-upsampling corpus so teacher trace
    entries can be looked up for duplicated samples.
    """

    pair_id: int
    src: torch.Tensor
    src_mask: torch.Tensor
    tgt_in: torch.Tensor
    tgt_out: torch.Tensor
    tgt_mask: torch.Tensor
    example_ids: list[int]

    @property
    def token_count(self) -> int:
        return int(self.tgt_mask.sum())


def _read_lines(path: str | Path) -> list[str]:
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    out = []
    for i, line in enumerate(lines):
        try:
            out.append(line.decode("utf-8"))
        except UnicodeDecodeError:
            raise CorpusEncodingError(str(path), i + 1) from None
    return out


def load_parallel(
    src_path: str | Path,
    tgt_path: str | Path,
    pair: LanguagePair,
    bpe: BpeModel,
    max_len: int = 256,
    tgt_tag: str | None = None,
) -> ParallelCorpus:
    """Tokenize two aligned text files into one corpus.

    Pairs longer than max_len subwords on either side are dropped rather than
    truncated, so teacher traces stay aligned with what the student trains on.
    """
    src_lines = _read_lines(src_path)
    tgt_lines = _read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise LineCountMismatchError(len(src_lines), len(tgt_lines))
    examples: list[tuple[list[int], list[int]]] = []
    dropped_overlong = 0
    dropped_empty = 0
    for src_line, tgt_line in zip(src_lines, tgt_lines):
        src_ids = bpe.encode(src_line, tgt_tag=tgt_tag)
        tgt_ids = bpe.encode(tgt_line)
        if not src_ids or not tgt_ids:
            dropped_empty += 1
            continue
        src_ids.append(EOS_ID)
        tgt_ids.append(EOS_ID)
        if len(src_ids) > max_len or len(tgt_ids) > max_len:
            dropped_overlong += 1
            continue
        examples.append((src_ids, tgt_ids))
    return ParallelCorpus(pair, examples, dropped_overlong, dropped_empty)


@dataclass
class MultiDataset:
    """All pairs' corpora with per-pair upsampled index lists of equal length.

    Immutable after construction; samplers hold their own cursor and RNG.
    """

    corpora: dict[int, ParallelCorpus]
    upsampled: dict[int, list[int]]
    target_size: int

    def pair_ids(self) -> list[int]:
        return sorted(self.corpora)


def upsample(corpora: Sequence[ParallelCorpus], rng_seed: int) -> MultiDataset:
    """Extend every pair's example list, sampling with replacement, until all
    pairs match the largest corpus. Originals always come first."""
    if not corpora:
        raise CorpusError("no corpora to upsample")
    for c in corpora:
        if not c.examples:
            raise CorpusError(f"pair {c.pair.key} has no examples")
    ids = [c.pair.id for c in corpora]
    if len(set(ids)) != len(ids) or sorted(ids) != list(range(len(ids))):
        raise CorpusError(f"pair ids must be dense and unique, got {sorted(ids)}")
    target = max(len(c) for c in corpora)
    upsampled: dict[int, list[int]] = {}
    for c in corpora:
        rng = random.Random(derive_seed(rng_seed, f"upsample:{c.pair.id}"))
        idxs = list(range(len(c)))
        idxs.extend(rng.randrange(len(c)) for _ in range(target - len(c)))
        upsampled[c.pair.id] = idxs
    return MultiDataset({c.pair.id: c for c in corpora}, upsampled, target)


def collate(
    examples: Sequence[tuple[list[int], list[int]]],
    pair_id: int,
    example_ids: Sequence[int],
) -> Batch:
    bsz = len(examples)
    max_src = max(len(s) for s, _ in examples)
    max_tgt = max(len(t) for _, t in examples)
    src = torch.full((bsz, max_src), PAD_ID, dtype=torch.long)
    tgt_in = torch.full((bsz, max_tgt), PAD_ID, dtype=torch.long)
    tgt_out = torch.full((bsz, max_tgt), PAD_ID, dtype=torch.long)
    tgt_mask = torch.zeros((bsz, max_tgt), dtype=torch.bool)
    for b, (s, t) in enumerate(examples):
        src[b, : len(s)] = torch.tensor(s, dtype=torch.long)
        tgt_in[b, 0] = BOS_ID
        tgt_in[b, 1 : len(t)] = torch.tensor(t[:-1], dtype=torch.long)
        tgt_out[b, : len(t)] = torch.tensor(t, dtype=torch.long)
        tgt_mask[b, : len(t)] = True
    return Batch(
        pair_id=pair_id,
        src=src,
        src_mask=src != PAD_ID,
        tgt_in=tgt_in,
        tgt_out=tgt_out,
        tgt_mask=tgt_mask,
        example_ids=list(example_ids),
    )


class PairSampler:
    """Epoch-permutation batch sampler for one pair of a MultiDataset.

    Walks a shuffled copy of the pair's upsampled index list, closing each
    batch when the next example would push the target-token count past the
    budget. Upsampling extras are redrawn every epoch; the first epoch uses
    the draw materialized in the dataset.
    """

    def __init__(self, dataset: MultiDataset, pair_id: int, token_budget: int, seed: int):
        if pair_id not in dataset.corpora:
            raise CorpusError(f"pair id {pair_id} not in dataset")
        self.corpus = dataset.corpora[pair_id]
        self.pair_id = pair_id
        self.token_budget = token_budget
        self.target_size = dataset.target_size
        self._initial = dataset.upsampled[pair_id]
        self._rng = random.Random(derive_seed(seed, f"sampler:{pair_id}"))
        self._epoch = -1
        self._order: list[int] = []
        self._pos = 0
        longest = max(len(t) for _, t in self.corpus.examples)
        if token_budget < longest:
            raise TokenBudgetError(
                f"token budget {token_budget} is below the longest target "
                f"sentence ({longest} tokens) of pair {self.corpus.pair.key}"
            )

    def _start_epoch(self) -> None:
        self._epoch += 1
        n = len(self.corpus)
        if self._epoch == 0:
            order = list(self._initial)
        else:
            order = list(range(n))
            order.extend(self._rng.randrange(n) for _ in range(self.target_size - n))
        self._rng.shuffle(order)
        self._order = order
        self._pos = 0

    def next_batch(self) -> Batch:
        if self._pos >= len(self._order):
            self._start_epoch()
        chosen: list[int] = []
        tokens = 0
        while self._pos < len(self._order):
            ex_id = self._order[self._pos]
            t_len = len(self.corpus.examples[ex_id][1])
            if chosen and tokens + t_len > self.token_budget:
                break
            self._pos += 1
            chosen.append(ex_id)
            tokens += t_len
        return collate(
            [self.corpus.examples[i] for i in chosen],
            self.pair_id,
            chosen,
        )
