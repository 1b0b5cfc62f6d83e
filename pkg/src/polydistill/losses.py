"""Training losses: one-hot NLL, top-K word-level distillation, and their blend.

Every loss is expressed as a per-position weight tensor W over the vocabulary
with value -sum(W * logprobs); the same contraction drives both the reported
total and the backward pass, so gradient blending is exactly linear in the
weights. Totals are token sums; callers divide by token_count when they want
per-token means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossValue:
    total: float
    token_count: int

    def __post_init__(self):
        if not math.isfinite(self.total):
            raise LossError(f"non-finite loss total {self.total}")

    @property
    def per_token(self) -> float:
        return self.total / max(self.token_count, 1)


@dataclass(frozen=True)
class TopKRecord:
    """One target position's renormalized teacher distribution."""

    token_ids: tuple[int, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.token_ids) != len(self.probs):
            raise LossError("token_ids and probs must have equal length")
        if len(set(self.token_ids)) != len(self.token_ids):
            raise LossError(f"duplicate token ids in record: {self.token_ids}")
        if any(self.probs[i] < self.probs[i + 1] for i in range(len(self.probs) - 1)):
            raise LossError("record probabilities must be descending")
        if abs(sum(self.probs) - 1.0) > 1e-6:
            raise LossError(f"record probabilities sum to {sum(self.probs)}, expected 1")


def weighted_xent(logprobs: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    return -(weights * logprobs).sum()


def nll_loss(
    logprobs: torch.Tensor, tgt_out: torch.Tensor, tgt_mask: torch.Tensor
) -> tuple[LossValue, torch.Tensor]:
    """Negative log-likelihood against one-hot targets on non-pad positions."""
    vocab = logprobs.shape[-1]
    if int(tgt_out.max()) >= vocab:
        raise LossError(f"target id {int(tgt_out.max())} >= vocab size {vocab}")
    weights = torch.zeros_like(logprobs)
    weights.scatter_(2, tgt_out.unsqueeze(2), 1.0)
    weights = weights * tgt_mask.unsqueeze(2).to(weights.dtype)
    total = float(weighted_xent(logprobs.detach(), weights))
    return LossValue(total, int(tgt_mask.sum())), weights


def kd_loss(
    logprobs: torch.Tensor,
    record_ids: torch.Tensor,
    record_probs: torch.Tensor,
    tgt_mask: torch.Tensor,
) -> tuple[LossValue, torch.Tensor]:
    """Cross-entropy between the teacher's top-K records and the model.

    record_ids/record_probs are [B, T, K]; pad positions must carry all-zero
    probabilities. Records are assumed renormalized at load time.
    """
    vocab = logprobs.shape[-1]
    if int(record_ids.max()) >= vocab:
        raise LossError(f"record token id {int(record_ids.max())} >= vocab size {vocab}")
    if record_ids.shape[2] > 1:
        sorted_ids, _ = record_ids.sort(dim=2)
        dup = (sorted_ids[:, :, 1:] == sorted_ids[:, :, :-1]).any(dim=2) & tgt_mask
        if bool(dup.any()):
            b, t = [int(x[0]) for x in dup.nonzero(as_tuple=True)]
            raise LossError(f"duplicate token ids in record at position ({b}, {t})")
    weights = torch.zeros_like(logprobs)
    weights.scatter_(2, record_ids, record_probs.to(weights.dtype))
    weights = weights * tgt_mask.unsqueeze(2).to(weights.dtype)
    total = float(weighted_xent(logprobs.detach(), weights))
    return LossValue(total, int(tgt_mask.sum())), weights


def combined_loss(
    nll: LossValue,
    kd: LossValue,
    lam: float,
    nll_weights: torch.Tensor | None = None,
    kd_weights: torch.Tensor | None = None,
) -> tuple[LossValue, torch.Tensor | None]:
    """(1 - lam) * NLL + lam * KD, applied to totals and gradient weights alike."""
    if not 0.0 <= lam <= 1.0:
        raise LossError(f"lambda must be in [0, 1], got {lam}")
    if nll.token_count != kd.token_count:
        raise LossError(
            f"loss terms cover different batches: {nll.token_count} vs {kd.token_count} tokens"
        )
    value = LossValue((1.0 - lam) * nll.total + lam * kd.total, nll.token_count)
    if nll_weights is None or kd_weights is None:
        return value, None
    return value, (1.0 - lam) * nll_weights + lam * kd_weights
