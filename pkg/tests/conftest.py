import torch

from polydistill.bpe import BOS_ID, EOS_ID, PAD_ID
from polydistill.corpus import Batch
from polydistill.losses import weighted_xent


def make_batch(pair_id, examples):
    """Batch from (src_ids, tgt_ids) lists; tgt_ids must end with EOS."""
    bsz = len(examples)
    max_src = max(len(s) for s, _ in examples)
    max_tgt = max(len(t) for _, t in examples)
    src = torch.full((bsz, max_src), PAD_ID, dtype=torch.long)
    tgt_in = torch.full((bsz, max_tgt), PAD_ID, dtype=torch.long)
    tgt_out = torch.full((bsz, max_tgt), PAD_ID, dtype=torch.long)
    tgt_mask = torch.zeros((bsz, max_tgt), dtype=torch.bool)
    for b, (s, t) in enumerate(examples):
        src[b, : len(s)] = torch.tensor(s)
        tgt_in[b, 0] = BOS_ID
        tgt_in[b, 1 : len(t)] = torch.tensor(t[:-1])
        tgt_out[b, : len(t)] = torch.tensor(t)
        tgt_mask[b, : len(t)] = True
    return Batch(pair_id, src, src != PAD_ID, tgt_in, tgt_out, tgt_mask, list(range(bsz)))


def random_batch(rng, vocab, bsz=2, src_len=4, tgt_len=4):
    examples = []
    for _ in range(bsz):
        s = [int(torch.randint(4, vocab, (1,), generator=rng)) for _ in range(src_len)] + [EOS_ID]
        t = [int(torch.randint(4, vocab, (1,), generator=rng)) for _ in range(tgt_len)] + [EOS_ID]
        examples.append((s, t))
    return make_batch(0, examples)


def finite_difference_grads(model, batch, weights, h=1e-4):
    """Central finite differences of -sum(weights * logprobs) per parameter.

    Model must be in float64; forward runs in eval mode (deterministic) so the
    differences probe exactly the function autograd differentiates.
    """

    def loss_at_current():
        logprobs = model.forward_batch(batch, train=False)
        return float(weighted_xent(logprobs, weights))

    fd = {}
    for name, p in model.named_parameters():
        grad = torch.zeros_like(p)
        flat = p.data.view(-1)
        gflat = grad.view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            up = loss_at_current()
            flat[i] = orig - h
            down = loss_at_current()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        fd[name] = grad
    return fd


def max_relative_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for name in analytic:
        a = analytic[name].reshape(-1)
        n = numeric[name].reshape(-1)
        denom = torch.maximum(a.abs().maximum(n.abs()), torch.tensor(floor, dtype=a.dtype))
        err = ((a - n).abs() / denom).max()
        worst = max(worst, float(err))
    return worst
