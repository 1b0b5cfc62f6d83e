import itertools
import math
import random
from collections import Counter

import pytest
import torch

from polydistill.bpe import BOS_ID, EOS_ID, PAD_ID
from polydistill.evaluation import (
    BleuReport,
    EvalError,
    Hypothesis,
    beam_search,
    beam_search_batch,
    bleu,
    length_penalty,
    translate_corpus,
)
from polydistill.model import ModelConfig, build_model

TOY = ModelConfig(vocab_size=7, d_model=8, d_ff=16, n_layers=1, n_heads=2, dropout=0.0, max_len=12)


def _model(seed, cfg=TOY):
    return build_model(cfg, seed)


def _full_logprobs(model, src, prefix):
    """Next-token distribution via the full (non-incremental) decoder."""
    src_t = torch.tensor([src])
    src_mask = src_t != PAD_ID
    tgt = torch.tensor([[BOS_ID] + prefix])
    with torch.no_grad():
        enc = model.encode(src_t, src_mask)
        out = model.decode(tgt, enc, torch.ones_like(tgt, dtype=torch.bool), src_mask)
    return out[0, -1]


def _greedy_oracle(model, src, max_len):
    """Independent greedy decoder over full forward passes."""
    prefix = []
    for _ in range(max_len):
        logprobs = _full_logprobs(model, src, prefix)
        # lowest token id wins ties, like the search contract
        best = int(torch.arange(len(logprobs))[logprobs == logprobs.max()][0])
        prefix.append(best)
        if best == EOS_ID:
            break
    return prefix


def _score_sequence(model, src, tokens, alpha):
    total = 0.0
    prefix = []
    for tok in tokens:
        logprobs = _full_logprobs(model, src, prefix)
        total += float(logprobs[tok])
        prefix.append(tok)
    return total / length_penalty(len(tokens), alpha)


def _exhaustive_oracle(model, src, alpha, max_len):
    """Argmax of the length-penalized score over every emittable sequence:
    eos-terminated up to max_len, plus eos-free sequences of exactly max_len."""
    vocab = model.config.vocab_size
    non_eos = [i for i in range(vocab) if i != EOS_ID]
    best_tokens, best_score = None, float("-inf")
    for content_len in range(0, max_len):
        for body in itertools.product(non_eos, repeat=content_len):
            tokens = list(body) + [EOS_ID]
            score = _score_sequence(model, src, tokens, alpha)
            if score > best_score:
                best_tokens, best_score = tokens, score
    for body in itertools.product(non_eos, repeat=max_len):
        score = _score_sequence(model, src, list(body), alpha)
        if score > best_score:
            best_tokens, best_score = list(body), score
    return best_tokens, best_score


def test_beam_one_equals_greedy_on_random_models():
    for seed in range(10):
        model = _model(seed)
        src = [4, 5, 6, EOS_ID]
        hyp = beam_search(model, src, beam=1, alpha=0.0, max_len=8)
        assert hyp.tokens == _greedy_oracle(model, src, 8), f"seed {seed}"


def test_beam_equals_exhaustive_argmax_on_toy_model():
    for seed in (0, 1, 2):
        model = _model(seed)
        src = [4, 6, EOS_ID]
        oracle_tokens, oracle_score = _exhaustive_oracle(model, src, alpha=1.0, max_len=4)
        hyp = beam_search(model, src, beam=TOY.vocab_size, alpha=1.0, max_len=4)
        assert hyp.tokens == oracle_tokens, f"seed {seed}"
        assert abs(hyp.score - oracle_score) < 1e-5


def test_larger_beam_never_scores_worse():
    # Tolerance covers float32 noise across batch shapes, not search slack.
    for seed in range(8):
        model = _model(seed)
        src = [5, 4, EOS_ID]
        scores = [beam_search(model, src, beam=b, alpha=1.0, max_len=8).score for b in (1, 2, 4)]
        assert scores[0] <= scores[1] + 1e-5
        assert scores[1] <= scores[2] + 1e-5


def test_alpha_zero_is_pure_sum_ranking():
    model = _model(3)
    src = [4, EOS_ID]
    hyp = beam_search(model, src, beam=2, alpha=0.0, max_len=6)
    assert abs(hyp.score - _score_sequence(model, src, hyp.tokens, 0.0)) < 1e-5
    assert length_penalty(5, 0.0) == 1.0


def test_length_penalty_formula():
    assert length_penalty(1, 1.0) == 1.0
    assert abs(length_penalty(7, 1.0) - 2.0) < 1e-12
    assert abs(length_penalty(7, 0.5) - math.sqrt(2.0)) < 1e-12


def test_empty_source_rejected():
    with pytest.raises(EvalError):
        beam_search(_model(0), [], beam=2, alpha=1.0, max_len=4)


def test_beam_zero_rejected():
    with pytest.raises(EvalError):
        beam_search(_model(0), [4], beam=0, alpha=1.0, max_len=4)


class _NoEosModel:
    """Stub with beam-search's model interface; eos never leaves the floor."""

    def __init__(self, vocab_size):
        self.config = ModelConfig(vocab_size=vocab_size, d_model=8, d_ff=16,
                                  n_layers=1, n_heads=1, dropout=0.0, max_len=32)

    def parameters(self):
        return iter([torch.zeros(1)])

    def encode(self, src, src_mask, train=False, rng=None):
        return torch.zeros((src.shape[0], src.shape[1], 8))

    def start_decoder(self, enc, src_mask):
        class _State:
            def reorder(self, origin):
                pass

        return _State()

    def decode_step(self, last_ids, state, pos):
        v = self.config.vocab_size
        logits = torch.zeros((last_ids.shape[0], v))
        logits[:, EOS_ID] = -1000.0
        logits[:, 4] = 1.0  # a clear favourite so the search is deterministic
        return torch.log_softmax(logits, dim=-1)


def test_truncation_when_eos_unreachable():
    model = _NoEosModel(7)
    hyp = beam_search(model, [4, 5], beam=2, alpha=1.0, max_len=5)
    assert hyp.truncated
    assert len(hyp.tokens) == 5
    assert EOS_ID not in hyp.tokens


def test_batch_decoding_matches_single_sentence():
    model = _model(4)
    sources = [[4, 5, EOS_ID], [6, EOS_ID], [5, 5, 4, EOS_ID]]
    batched = beam_search_batch(model, sources, beam=3, alpha=1.0, max_len=8)
    for src, hyp in zip(sources, batched):
        solo = beam_search(model, src, beam=3, alpha=1.0, max_len=8)
        assert hyp.tokens == solo.tokens
        assert abs(hyp.score - solo.score) < 1e-5


def test_translate_corpus_chunking_is_transparent():
    model = _model(5)
    sources = [[4, EOS_ID], [5, EOS_ID], [6, 4, EOS_ID], [4, 4, EOS_ID], [6, EOS_ID]]
    a = translate_corpus(model, sources, 2, 1.0, 8, chunk_size=1)
    b = translate_corpus(model, sources, 2, 1.0, 8, chunk_size=5)
    assert [h.tokens for h in a] == [h.tokens for h in b]


# --- BLEU ---


def _bleu_oracle(hyps, refs):
    """Brute-force multi-bleu: dict-counted clipped n-grams, corpus level."""
    match = {n: 0 for n in range(1, 5)}
    total = {n: 0 for n in range(1, 5)}
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        h, r = hyp.split(), ref.split()
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, 5):
            hc = Counter(tuple(h[i : i + n]) for i in range(len(h) - n + 1))
            rc = Counter(tuple(r[i : i + n]) for i in range(len(r) - n + 1))
            total[n] += max(len(h) - n + 1, 0)
            match[n] += sum(min(c, rc[g]) for g, c in hc.items())
    ps = [match[n] / total[n] if total[n] else 0.0 for n in range(1, 5)]
    if hyp_len == 0:
        bp = 0.0
    else:
        bp = min(1.0, math.exp(1 - ref_len / hyp_len))
    if min(ps) == 0.0:
        return 0.0
    return 100.0 * bp * math.exp(sum(math.log(p) for p in ps) / 4)


def test_bleu_identity_is_100():
    sents = ["the cat sat", "a dog", "hello world again today"]
    report = bleu(sents, sents)
    assert report.bleu == 100.0
    assert report.brevity_penalty == 1.0
    assert report.precisions == (1.0, 1.0, 1.0, 1.0)


def test_bleu_the_the_the_the():
    report = bleu(["the the the the"], ["the cat"])
    assert report.bleu == 0.0
    assert report.precisions[0] == pytest.approx(1 / 4)
    assert report.precisions[1] == 0.0


def test_bleu_matches_brute_force_on_random_fixtures():
    rng = random.Random(0)
    vocab = ["alpha", "beta", "gamma", "delta", "eps"]
    for _ in range(25):
        n = rng.randint(3, 20)
        hyps = [" ".join(rng.choices(vocab, k=rng.randint(1, 12))) for _ in range(n)]
        refs = [" ".join(rng.choices(vocab, k=rng.randint(1, 12))) for _ in range(n)]
        assert bleu(hyps, refs).bleu == pytest.approx(_bleu_oracle(hyps, refs), abs=1e-9)


def test_bleu_permutation_invariant():
    rng = random.Random(1)
    vocab = ["a", "b", "c", "d"]
    hyps = [" ".join(rng.choices(vocab, k=rng.randint(4, 9))) for _ in range(10)]
    refs = [" ".join(rng.choices(vocab, k=rng.randint(4, 9))) for _ in range(10)]
    perm = list(range(10))
    rng.shuffle(perm)
    direct = bleu(hyps, refs)
    shuffled = bleu([hyps[i] for i in perm], [refs[i] for i in perm])
    assert direct.bleu == pytest.approx(shuffled.bleu, abs=1e-12)


def test_brevity_penalty_monotone_in_shortening():
    refs = ["one two three four five six"] * 4
    full = ["one two three four five six"] * 4
    shorter = ["one two three four five"] * 4
    shortest = ["one two three"] * 4
    bps = [bleu(h, refs).brevity_penalty for h in (full, shorter, shortest)]
    assert bps[0] == 1.0
    assert bps[0] > bps[1] > bps[2]


def test_bleu_length_mismatch_rejected():
    with pytest.raises(EvalError):
        bleu(["a"], ["a", "b"])


def test_bleu_report_identity_formula():
    report = bleu(["a b c d e"], ["a b c x e"])
    if min(report.precisions) > 0:
        expected = report.brevity_penalty * math.exp(
            sum(math.log(p) for p in report.precisions) / 4
        ) * 100.0
        assert report.bleu == pytest.approx(expected, abs=1e-12)
