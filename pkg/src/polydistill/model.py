"""Small post-layer-norm encoder/decoder transformer with seeded dropout.

Dropout draws from an explicit torch.Generator instead of the global RNG so
two runs that execute the same step sequence produce bit-identical parameters.
The token embedding is shared three ways: encoder input, decoder input, and
the output projection.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn


class ModelError(ValueError):
    pass


class SequenceTooLongError(ModelError):
    pass


class CheckpointError(ModelError):
    pass


class StaleGraphError(RuntimeError):
    """Raised when backward is asked for gradients a forward pass no longer holds."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 256
    d_ff: int = 1024
    n_layers: int = 2
    n_heads: int = 4
    dropout: float = 0.1
    max_len: int = 256

    def __post_init__(self):
        if self.vocab_size < 5:
            raise ModelError("vocab_size must cover the special tokens")
        if self.d_model % self.n_heads != 0:
            raise ModelError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout must be in [0, 1), got {self.dropout}")
        if min(self.d_model, self.d_ff, self.n_layers, self.n_heads, self.max_len) < 1:
            raise ModelError("all dimensions must be positive")


def seeded_dropout(x: torch.Tensor, p: float, train: bool, rng: torch.Generator | None) -> torch.Tensor:
    if not train or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=rng, dtype=x.dtype, device=x.device) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


def sinusoidal_table(max_len: int, d_model: int) -> torch.Tensor:
    pos = torch.arange(max_len, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float32) * (-math.log(10000.0) / d_model))
    table = torch.zeros(max_len, d_model)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)
    return table


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.p = dropout
        self.w_q = nn.Linear(d_model, d_model)
        self.w_k = nn.Linear(d_model, d_model)
        self.w_v = nn.Linear(d_model, d_model)
        self.w_o = nn.Linear(d_model, d_model)

    def _split(self, x):
        bsz, length, _ = x.shape
        return x.view(bsz, length, self.n_heads, self.d_head).transpose(1, 2)

    def project_kv(self, kv_in):
        return self._split(self.w_k(kv_in)), self._split(self.w_v(kv_in))

    def _attend(self, q, k, v, key_mask, causal, train, rng):
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if causal:
            q_len, k_len = scores.shape[-2:]
            future = torch.triu(
                torch.ones(q_len, k_len, dtype=torch.bool, device=q.device), diagonal=1
            )
            scores = scores.masked_fill(future, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        attn = seeded_dropout(attn, self.p, train, rng)
        out = (attn @ v).transpose(1, 2)
        return self.w_o(out.reshape(out.shape[0], out.shape[1], -1))

    def forward(self, q_in, kv_in, key_mask, causal, train, rng):
        # key_mask: [B, S_k] True on attendable (non-pad) keys.
        k, v = self.project_kv(kv_in)
        return self._attend(self._split(self.w_q(q_in)), k, v, key_mask, causal, train, rng)

    def step(self, q_in, k, v, key_mask):
        """One-query attention over precomputed K/V; q_in is [rows, 1, d_model]."""
        return self._attend(self._split(self.w_q(q_in)), k, v, key_mask, False, False, None)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__()
        self.w1 = nn.Linear(d_model, d_ff)
        self.w2 = nn.Linear(d_ff, d_model)
        self.p = dropout

    def forward(self, x, train, rng):
        return self.w2(seeded_dropout(torch.relu(self.w1(x)), self.p, train, rng))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.p = cfg.dropout

    def forward(self, x, src_mask, train, rng):
        x = self.ln1(x + seeded_dropout(self.attn(x, x, src_mask, False, train, rng), self.p, train, rng))
        return self.ln2(x + seeded_dropout(self.ffn(x, train, rng), self.p, train, rng))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ln3 = nn.LayerNorm(cfg.d_model)
        self.p = cfg.dropout

    def forward(self, y, enc, tgt_mask, src_mask, train, rng):
        y = self.ln1(y + seeded_dropout(self.self_attn(y, y, tgt_mask, True, train, rng), self.p, train, rng))
        y = self.ln2(y + seeded_dropout(self.cross_attn(y, enc, src_mask, False, train, rng), self.p, train, rng))
        return self.ln3(y + seeded_dropout(self.ffn(y, train, rng), self.p, train, rng))

    def step(self, y_last, self_k, self_v, cross_k, cross_v, src_mask):
        # Incremental path: y_last is [rows, 1, d]; caches already include the
        # current position's K/V, and every cached position is real (beam
        # search feeds no padding), so no causal or target mask is needed.
        y = self.ln1(y_last + self.self_attn.step(y_last, self_k, self_v, None))
        y = self.ln2(y + self.cross_attn.step(y, cross_k, cross_v, src_mask))
        return self.ln3(y + self.ffn(y, False, None))


@dataclass
class DecoderState:
    """Per-layer K/V caches for incremental decoding, rows = sentences x beams."""

    cross_k: list
    cross_v: list
    self_k: list
    self_v: list
    src_mask: torch.Tensor

    def reorder(self, origin: torch.Tensor) -> None:
        """Realign row-indexed caches after beam candidates pick their parents."""
        self.cross_k = [t.index_select(0, origin) for t in self.cross_k]
        self.cross_v = [t.index_select(0, origin) for t in self.cross_v]
        self.self_k = [t.index_select(0, origin) for t in self.self_k]
        self.self_v = [t.index_select(0, origin) for t in self.self_v]
        self.src_mask = self.src_mask.index_select(0, origin)


class TranslationModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.embed = nn.Embedding(config.vocab_size, config.d_model)
        self.enc_layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.n_layers))
        self.dec_layers = nn.ModuleList(DecoderLayer(config) for _ in range(config.n_layers))
        self.register_buffer("pos_table", sinusoidal_table(config.max_len, config.d_model))
        self.scale = math.sqrt(config.d_model)
        self.p = config.dropout

    def _embed(self, ids, train, rng):
        x = self.embed(ids) * self.scale + self.pos_table[: ids.shape[1]].to(self.embed.weight.dtype)
        return seeded_dropout(x, self.p, train, rng)

    def encode(self, src, src_mask, train=False, rng=None):
        if src.shape[1] > self.config.max_len:
            raise SequenceTooLongError(f"source length {src.shape[1]} > max_len {self.config.max_len}")
        x = self._embed(src, train, rng)
        for layer in self.enc_layers:
            x = layer(x, src_mask, train, rng)
        return x

    def decode(self, tgt_in, enc, tgt_mask, src_mask, train=False, rng=None):
        """Log-probabilities [B, T, V] for every target position."""
        if tgt_in.shape[1] > self.config.max_len:
            raise SequenceTooLongError(f"target length {tgt_in.shape[1]} > max_len {self.config.max_len}")
        y = self._embed(tgt_in, train, rng)
        for layer in self.dec_layers:
            y = layer(y, enc, tgt_mask, src_mask, train, rng)
        logits = F.linear(y, self.embed.weight)
        return F.log_softmax(logits, dim=-1)

    def start_decoder(self, enc, src_mask) -> "DecoderState":
        """Precompute per-layer cross-attention K/V for incremental decoding."""
        cross = [layer.cross_attn.project_kv(enc) for layer in self.dec_layers]
        return DecoderState(
            cross_k=[k for k, _ in cross],
            cross_v=[v for _, v in cross],
            self_k=[None] * len(self.dec_layers),
            self_v=[None] * len(self.dec_layers),
            src_mask=src_mask,
        )

    def decode_step(self, last_ids: torch.Tensor, state: "DecoderState", pos: int) -> torch.Tensor:
        """Next-token log-probabilities [rows, V] for one decode step.

        last_ids is the token just appended to each row's prefix; pos is its
        0-based position. Equivalent to slicing position pos out of a full
        eval-mode decode() over the prefix.
        """
        if pos >= self.config.max_len:
            raise SequenceTooLongError(f"decode position {pos} >= max_len {self.config.max_len}")
        dtype = self.embed.weight.dtype
        y = self.embed(last_ids).unsqueeze(1) * self.scale + self.pos_table[pos].to(dtype)
        for li, layer in enumerate(self.dec_layers):
            k_new, v_new = layer.self_attn.project_kv(y)
            if state.self_k[li] is None:
                state.self_k[li], state.self_v[li] = k_new, v_new
            else:
                state.self_k[li] = torch.cat([state.self_k[li], k_new], dim=2)
                state.self_v[li] = torch.cat([state.self_v[li], v_new], dim=2)
            y = layer.step(y, state.self_k[li], state.self_v[li],
                           state.cross_k[li], state.cross_v[li], state.src_mask)
        logits = F.linear(y[:, 0, :], self.embed.weight)
        return F.log_softmax(logits, dim=-1)

    def forward(self, src, tgt_in, src_mask, tgt_mask, train=False, rng=None):
        if int(src.max()) >= self.config.vocab_size or int(tgt_in.max()) >= self.config.vocab_size:
            raise ModelError("batch contains token ids outside the model vocabulary")
        if train:
            enc = self.encode(src, src_mask, True, rng)
            return self.decode(tgt_in, enc, tgt_mask, src_mask, True, rng)
        with torch.no_grad():
            enc = self.encode(src, src_mask, False, None)
            return self.decode(tgt_in, enc, tgt_mask, src_mask, False, None)

    def forward_batch(self, batch, train=False, rng=None):
        return self.forward(batch.src, batch.tgt_in, batch.src_mask, batch.tgt_mask, train, rng)


def build_model(config: ModelConfig, seed: int) -> TranslationModel:
    """Construct and deterministically initialize a model.

    Matrices get fan-scaled uniform init, biases zeros, layer-norm gains ones.
    Generator consumption follows named_parameters order, which is fixed by
    module construction order.
    """
    model = TranslationModel(config)
    rng = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.dim() >= 2:
                fan_out, fan_in = p.shape[0], p.shape[1]
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                p.uniform_(-bound, bound, generator=rng)
            elif "weight" in name:  # layer-norm gain
                p.fill_(1.0)
            else:
                p.zero_()
    return model


def backward(model: TranslationModel, logprobs: torch.Tensor, weights: torch.Tensor) -> dict[str, torch.Tensor]:
    """Gradients of -sum(weights * logprobs) with respect to every parameter."""
    if not logprobs.requires_grad:
        raise StaleGraphError("forward pass was not run in train mode; nothing to differentiate")
    loss = -(weights * logprobs).sum()
    names, params = zip(*model.named_parameters())
    try:
        grads = torch.autograd.grad(loss, params, allow_unused=True)
    except RuntimeError as e:
        raise StaleGraphError(str(e)) from e
    return {
        n: (g if g is not None else torch.zeros_like(p))
        for n, p, g in zip(names, params, grads)
    }


_MAGIC = b"PDCK"
_VERSION = 1


def save_checkpoint(model: TranslationModel, path: str | Path) -> None:
    """Little-endian binary: magic, version, JSON config block, named f32 tensors."""
    cfg_bytes = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<I", len(cfg_bytes)))
        f.write(cfg_bytes)
        state = model.state_dict()
        f.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            data = tensor.detach().to(torch.float32).contiguous()
            name_b = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", data.dim()))
            f.write(struct.pack(f"<{data.dim()}Q", *data.shape))
            f.write(data.numpy().tobytes())


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None) -> TranslationModel:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = view[off : off + n]
        off += n
        return chunk

    if bytes(take(4)) != _MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    cfg = ModelConfig(**json.loads(bytes(take(cfg_len)).decode("utf-8")))
    if expected_config is not None and cfg != expected_config:
        raise CheckpointError(f"{path}: checkpoint config {cfg} does not match expected {expected_config}")
    model = TranslationModel(cfg)
    state = model.state_dict()
    (n_tensors,) = struct.unpack("<I", take(4))
    if n_tensors != len(state):
        raise CheckpointError(f"{path}: checkpoint holds {n_tensors} tensors, model expects {len(state)}")
    loaded: dict[str, torch.Tensor] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = math.prod(shape)
        data = torch.frombuffer(bytearray(take(4 * count)), dtype=torch.float32).reshape(shape)
        if name not in state:
            raise CheckpointError(f"{path}: unexpected tensor {name!r}")
        if tuple(state[name].shape) != shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {shape}, config implies {tuple(state[name].shape)}"
            )
        loaded[name] = data
    if off != len(view):
        raise CheckpointError(f"{path}: {len(view) - off} trailing bytes")
    model.load_state_dict(loaded)
    return model


def parameter_mean(model: TranslationModel) -> float:
    """Mean over every learned scalar; the positional table is excluded."""
    total = 0.0
    count = 0
    for p in model.parameters():
        total += float(p.detach().to(torch.float64).sum())
        count += p.numel()
    return total / count


def perturb(model: TranslationModel, sigma: float, seed: int) -> TranslationModel:
    """Add mean(params) * N(0, sigma^2) noise to every learned parameter."""
    if sigma < 0:
        raise ModelError(f"sigma must be >= 0, got {sigma}")
    out = copy.deepcopy(model)
    if sigma == 0.0:
        return out
    theta_bar = parameter_mean(model)
    rng = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in out.parameters():
            noise = torch.randn(p.shape, generator=rng, dtype=p.dtype)
            p.add_(theta_bar * sigma * noise)
    return out
