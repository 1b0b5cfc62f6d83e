import dataclasses

import pytest
import torch

from conftest import finite_difference_grads, make_batch, max_relative_error, random_batch
from polydistill.bpe import EOS_ID, PAD_ID
from polydistill.losses import nll_loss
from polydistill.model import (
    CheckpointError,
    ModelConfig,
    ModelError,
    SequenceTooLongError,
    StaleGraphError,
    backward,
    build_model,
    load_checkpoint,
    parameter_mean,
    perturb,
    save_checkpoint,
)

TINY = ModelConfig(vocab_size=11, d_model=8, d_ff=16, n_layers=1, n_heads=1, dropout=0.0, max_len=16)
SMALL = ModelConfig(vocab_size=23, d_model=16, d_ff=32, n_layers=2, n_heads=4, dropout=0.1, max_len=16)


def test_config_rejects_bad_heads():
    with pytest.raises(ModelError):
        ModelConfig(vocab_size=10, d_model=10, n_heads=3)


def test_config_rejects_bad_dropout():
    with pytest.raises(ModelError):
        ModelConfig(vocab_size=10, d_model=8, n_heads=2, dropout=1.0)


def test_init_deterministic():
    a = build_model(SMALL, seed=123)
    b = build_model(SMALL, seed=123)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        assert torch.equal(pa, pb)
    c = build_model(SMALL, seed=124)
    assert any(
        not torch.equal(pa, pc) for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters())
    )


def expected_param_count(cfg: ModelConfig) -> int:
    # Independent shape accounting: shared embedding, per-layer attention
    # (4 projections with bias), two/three layer norms, and the two FFN mats.
    d, ff = cfg.d_model, cfg.d_ff
    attn = 4 * (d * d + d)
    ln = 2 * d
    ffn = d * ff + ff + ff * d + d
    enc_layer = attn + ffn + 2 * ln
    dec_layer = 2 * attn + ffn + 3 * ln
    return cfg.vocab_size * d + cfg.n_layers * (enc_layer + dec_layer)


@pytest.mark.parametrize("cfg", [TINY, SMALL, ModelConfig(vocab_size=1000, d_model=256, d_ff=1024, n_layers=2, n_heads=4)])
def test_parameter_count_matches_shape_audit(cfg):
    model = build_model(cfg, 0)
    assert sum(p.numel() for p in model.parameters()) == expected_param_count(cfg)


def test_forward_rows_are_log_distributions():
    model = build_model(SMALL, 7)
    rng = torch.Generator().manual_seed(0)
    batch = random_batch(rng, SMALL.vocab_size, bsz=3, src_len=5, tgt_len=4)
    logprobs = model.forward_batch(batch, train=False)
    sums = logprobs.exp().sum(dim=-1)
    assert float((sums[batch.tgt_mask] - 1.0).abs().max()) < 1e-6


def test_forward_eval_deterministic_and_single_token_shape():
    model = build_model(SMALL, 7)
    batch = make_batch(0, [([5, EOS_ID], [EOS_ID])])
    a = model.forward_batch(batch, train=False)
    b = model.forward_batch(batch, train=False)
    assert torch.equal(a, b)
    one = make_batch(0, [([5], [9])])  # B=1, T=1
    out = model.forward_batch(one, train=False)
    assert out.shape == (1, 1, SMALL.vocab_size)


def test_train_mode_dropout_reproducible_with_seeded_generator():
    model = build_model(SMALL, 7)
    rng = torch.Generator().manual_seed(0)
    batch = random_batch(rng, SMALL.vocab_size)
    a = model.forward_batch(batch, train=True, rng=torch.Generator().manual_seed(5))
    b = model.forward_batch(batch, train=True, rng=torch.Generator().manual_seed(5))
    c = model.forward_batch(batch, train=True, rng=torch.Generator().manual_seed(6))
    assert torch.equal(a.detach(), b.detach())
    assert not torch.equal(a.detach(), c.detach())


def test_sequence_longer_than_max_len_rejected():
    model = build_model(TINY, 0)
    long_src = list(range(4, 9)) * 4
    batch = make_batch(0, [(long_src, [5, EOS_ID])])
    with pytest.raises(SequenceTooLongError):
        model.forward_batch(batch)


def test_batch_independence_matches_single_example_forward():
    model = build_model(SMALL, 3)
    rng = torch.Generator().manual_seed(1)
    examples = []
    for length in (2, 5, 3):
        s = [int(torch.randint(4, SMALL.vocab_size, (1,), generator=rng)) for _ in range(length)] + [EOS_ID]
        t = [int(torch.randint(4, SMALL.vocab_size, (1,), generator=rng)) for _ in range(length + 1)] + [EOS_ID]
        examples.append((s, t))
    batched = model.forward_batch(make_batch(0, examples), train=False)
    for b, (s, t) in enumerate(examples):
        solo = model.forward_batch(make_batch(0, [(s, t)]), train=False)
        assert float((batched[b, : len(t)] - solo[0]).abs().max()) < 1e-5


def test_masked_positions_contribute_nothing():
    model = build_model(SMALL, 3)
    examples = [([4, 5, EOS_ID], [6, EOS_ID]), ([4, EOS_ID], [7, 8, 9, EOS_ID])]
    batch = make_batch(0, examples)
    logprobs = model.forward_batch(batch, train=True, rng=torch.Generator().manual_seed(0))
    value, weights = nll_loss(logprobs, batch.tgt_out, batch.tgt_mask)
    grads = backward(model, logprobs, weights)

    # Rewriting the padded tail of the shorter example must change nothing.
    altered = make_batch(0, examples)
    pad_tail = ~altered.tgt_mask[0]
    altered.tgt_out[0, pad_tail] = 9
    altered.tgt_in[0, ~altered.tgt_mask[0]] = 9
    logprobs2 = model.forward_batch(altered, train=True, rng=torch.Generator().manual_seed(0))
    value2, weights2 = nll_loss(logprobs2, altered.tgt_out, altered.tgt_mask)
    grads2 = backward(model, logprobs2, weights2)
    assert value.total == value2.total
    for name in grads:
        assert torch.equal(grads[name], grads2[name]), name


def test_zero_loss_weights_give_zero_gradients():
    model = build_model(TINY, 1)
    rng = torch.Generator().manual_seed(2)
    batch = random_batch(rng, TINY.vocab_size)
    logprobs = model.forward_batch(batch, train=True, rng=rng)
    grads = backward(model, logprobs, torch.zeros_like(logprobs))
    assert all(float(g.abs().max()) == 0.0 for g in grads.values())


def test_backward_requires_train_mode_graph():
    model = build_model(TINY, 1)
    rng = torch.Generator().manual_seed(2)
    batch = random_batch(rng, TINY.vocab_size)
    logprobs = model.forward_batch(batch, train=False)
    with pytest.raises(StaleGraphError):
        backward(model, logprobs, torch.ones_like(logprobs))


def test_backward_twice_on_same_graph_is_stale():
    model = build_model(TINY, 1)
    rng = torch.Generator().manual_seed(2)
    batch = random_batch(rng, TINY.vocab_size)
    logprobs = model.forward_batch(batch, train=True, rng=rng)
    backward(model, logprobs, torch.ones_like(logprobs))
    with pytest.raises(StaleGraphError):
        backward(model, logprobs, torch.ones_like(logprobs))


def test_gradients_match_finite_differences():
    # Tiny model in float64; NLL weights. The acceptance suite extends this
    # check to the KD and combined losses.
    model = build_model(TINY, 5).double()
    rng = torch.Generator().manual_seed(3)
    batch = random_batch(rng, TINY.vocab_size, bsz=2, src_len=3, tgt_len=3)
    logprobs = model.forward_batch(batch, train=True)
    _, weights = nll_loss(logprobs, batch.tgt_out, batch.tgt_mask)
    analytic = backward(model, logprobs, weights)
    numeric = finite_difference_grads(model, batch, weights)
    assert max_relative_error(analytic, numeric) < 1e-4


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    model = build_model(SMALL, 11)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    for (_, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b)


def test_checkpoint_truncated_rejected(tmp_path):
    model = build_model(TINY, 0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 100])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_vocab_mismatch(tmp_path):
    model = build_model(dataclasses.replace(TINY, vocab_size=1000), 0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expected_config=dataclasses.replace(TINY, vocab_size=999))


def test_perturb_sigma_zero_is_identity():
    model = build_model(SMALL, 4)
    out = perturb(model, 0.0, seed=9)
    for a, b in zip(model.parameters(), out.parameters()):
        assert torch.equal(a, b)


def test_perturb_same_seed_identical():
    model = build_model(SMALL, 4)
    a = perturb(model, 0.1, seed=9)
    b = perturb(model, 0.1, seed=9)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_perturb_matches_formula():
    model = build_model(SMALL, 4)
    sigma, seed = 0.25, 13
    out = perturb(model, sigma, seed)
    theta_bar = parameter_mean(model)
    rng = torch.Generator().manual_seed(seed)
    for p_in, p_out in zip(model.parameters(), out.parameters()):
        noise = torch.randn(p_in.shape, generator=rng, dtype=p_in.dtype)
        expected = p_in + theta_bar * sigma * noise
        assert torch.equal(p_out, expected)


def test_perturb_rejects_negative_sigma():
    model = build_model(TINY, 0)
    with pytest.raises(ModelError):
        perturb(model, -0.1, seed=0)


def test_perturb_paper_sigma_grid_runs():
    model = build_model(TINY, 0)
    for sigma in (0.05, 0.1, 0.15, 0.2, 0.25, 0.3):
        out = perturb(model, sigma, seed=1)
        assert all(torch.isfinite(p).all() for p in out.parameters())


def test_perturb_excludes_positional_table():
    model = build_model(SMALL, 4)
    out = perturb(model, 0.3, seed=2)
    assert torch.equal(model.pos_table, out.pos_table)
