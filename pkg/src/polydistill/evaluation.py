"""Beam-search decoding with length penalty and multi-bleu style corpus BLEU."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import torch

from .bpe import BOS_ID, EOS_ID, PAD_ID
from .model import TranslationModel


class EvalError(ValueError):
    pass


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    truncated: bool = False


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def _stable_topk(values: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Top-k along the last dim with ties resolved toward lower indices."""
    sorted_vals, sorted_idx = torch.sort(values, dim=-1, descending=True, stable=True)
    return sorted_vals[..., :k], sorted_idx[..., :k]


def beam_search_batch(
    model: TranslationModel,
    sources: Sequence[Sequence[int]],
    beam: int,
    alpha: float,
    max_len: int,
) -> list[Hypothesis]:
    """Decode a batch of source sentences, one best hypothesis each.

    Finished hypotheses are ranked by sum-logprob / length_penalty. A sentence
    stops early once no live prefix's best reachable score can beat its best
    finished one. Score ties during expansion resolve to the lower flattened
    (beam, token) index, so decoding is deterministic.
    """
    if beam < 1:
        raise EvalError(f"beam must be >= 1, got {beam}")
    if any(len(s) == 0 for s in sources):
        raise EvalError("cannot decode an empty source sentence")
    if not sources:
        return []

    n = len(sources)
    vocab = model.config.vocab_size
    device = next(model.parameters()).device
    src_len = max(len(s) for s in sources)
    src = torch.full((n, src_len), PAD_ID, dtype=torch.long, device=device)
    for i, s in enumerate(sources):
        src[i, : len(s)] = torch.tensor(list(s), dtype=torch.long, device=device)
    src_mask = src != PAD_ID

    with torch.no_grad():
        enc = model.encode(src, src_mask)
        state = model.start_decoder(
            enc.repeat_interleave(beam, dim=0), src_mask.repeat_interleave(beam, dim=0)
        )

        last = torch.full((n * beam,), BOS_ID, dtype=torch.long, device=device)
        ys = torch.zeros((n * beam, 0), dtype=torch.long, device=device)
        # Only beam slot 0 is live at the start so the first step spreads one
        # prefix over distinct tokens instead of duplicating it.
        beam_scores = torch.full((n, beam), float("-inf"))
        beam_scores[:, 0] = 0.0

        best: list[Hypothesis | None] = [None] * n
        done = [False] * n

        # With alpha >= 0 the penalty grows with length, so a negative running
        # sum can only improve (toward 0) by at most 1/lp(max_len); that gives
        # the admissible bound used for early stopping.
        def bound_denominator(cur_len: int) -> float:
            if alpha >= 0:
                return length_penalty(max_len, alpha)
            return length_penalty(cur_len, alpha)

        for step in range(1, max_len + 1):
            logprobs = model.decode_step(last, state, pos=step - 1)
            cand = (beam_scores.reshape(-1, 1) + logprobs).view(n, beam * vocab)
            take = min(2 * beam, beam * vocab)
            top_vals_t, top_idx_t = _stable_topk(cand, take)
            top_vals = top_vals_t.tolist()
            top_idx = top_idx_t.tolist()

            new_rows = []
            new_scores = torch.full((n, beam), float("-inf"))
            for i in range(n):
                if done[i]:
                    new_rows.extend((i * beam, BOS_ID) for _ in range(beam))
                    continue
                live = 0
                for c in range(take):
                    val = top_vals[i][c]
                    if val == float("-inf"):
                        break
                    flat = top_idx[i][c]
                    b_idx, tok = divmod(flat, vocab)
                    if tok == EOS_ID:
                        # eos finalizes only from the top `beam` ranks (the
                        # extra candidates exist to refill live slots), which
                        # keeps beam=1 identical to greedy decoding.
                        if c < beam:
                            norm = val / length_penalty(step, alpha)
                            if best[i] is None or norm > best[i].score:
                                tokens = ys[i * beam + b_idx].tolist() + [EOS_ID]
                                best[i] = Hypothesis(tokens, norm)
                    elif live < beam:
                        new_rows.append((i * beam + b_idx, tok))
                        new_scores[i, live] = val
                        live += 1
                while live < beam:
                    new_rows.append((i * beam, BOS_ID))
                    live += 1
                top_live = float(new_scores[i, 0])
                if best[i] is not None and (
                    top_live == float("-inf")
                    or top_live / bound_denominator(step + 1) <= best[i].score
                ):
                    done[i] = True
                    new_scores[i, :] = float("-inf")
            if all(done) or step == max_len:
                if step == max_len:
                    # Keep the final live prefixes around for truncation below.
                    origin = torch.tensor([r for r, _ in new_rows], dtype=torch.long, device=device)
                    tokens = torch.tensor([t for _, t in new_rows], dtype=torch.long, device=device)
                    ys = torch.cat([ys[origin], tokens.unsqueeze(1)], dim=1)
                    beam_scores = new_scores
                break

            origin = torch.tensor([r for r, _ in new_rows], dtype=torch.long, device=device)
            tokens = torch.tensor([t for _, t in new_rows], dtype=torch.long, device=device)
            state.reorder(origin)
            ys = torch.cat([ys[origin], tokens.unsqueeze(1)], dim=1)
            beam_scores = new_scores
            last = tokens

        # Live prefixes cut off at max_len compete on the same normalized
        # score; they win only when they outscore every finished hypothesis
        # (always, when no hypothesis produced eos at all).
        for i in range(n):
            if done[i]:
                continue
            live_vals = beam_scores[i]
            b_idx = int(torch.argmax(live_vals))
            val = float(live_vals[b_idx])
            if val == float("-inf"):
                continue
            tokens = ys[i * beam + b_idx].tolist()
            norm = val / length_penalty(len(tokens), alpha)
            if best[i] is None or norm > best[i].score:
                best[i] = Hypothesis(tokens, norm, truncated=True)

    return [h for h in best if h is not None]


def beam_search(
    model: TranslationModel,
    src: Sequence[int],
    beam: int,
    alpha: float,
    max_len: int,
) -> Hypothesis:
    return beam_search_batch(model, [src], beam, alpha, max_len)[0]


def translate_corpus(
    model: TranslationModel,
    sources: Sequence[Sequence[int]],
    beam: int,
    alpha: float,
    max_len: int,
    chunk_size: int = 32,
) -> list[Hypothesis]:
    out: list[Hypothesis] = []
    for start in range(0, len(sources), chunk_size):
        out.extend(beam_search_batch(model, sources[start : start + chunk_size], beam, alpha, max_len))
    return out


@dataclass(frozen=True)
class BleuReport:
    bleu: float
    precisions: tuple[float, float, float, float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def to_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "precisions": list(self.precisions),
            "brevity_penalty": self.brevity_penalty,
            "hyp_len": self.hyp_len,
            "ref_len": self.ref_len,
        }


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[str], references: Sequence[str]) -> BleuReport:
    """Corpus-level 4-gram BLEU with clipped counts and no smoothing.

    Matches multi-bleu semantics for the single-reference case: any zero
    n-gram precision makes the whole score zero.
    """
    if len(hypotheses) != len(references):
        raise EvalError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    matches = [0] * 4
    totals = [0] * 4
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h = hyp.split()
        r = ref.split()
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, 5):
            h_counts = _ngrams(h, n)
            if not h_counts:
                continue
            r_counts = _ngrams(r, n)
            totals[n - 1] += sum(h_counts.values())
            matches[n - 1] += sum(min(c, r_counts[g]) for g, c in h_counts.items())
    precisions = tuple(m / t if t > 0 else 0.0 for m, t in zip(matches, totals))
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len > ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_len / hyp_len)
    if min(precisions) > 0.0:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / 4.0)
    else:
        score = 0.0
    return BleuReport(score, precisions, bp, hyp_len, ref_len)
