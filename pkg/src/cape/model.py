"""Desk-scale transformer encoder-decoder for post-editing experiments.

One encoder consumes `src [SEP] mt` with segment embeddings telling the
two halves apart. The decoder's self-attention projections are the same
storage as the encoder self-attention of the same layer depth (mutating
one is visible through the other); its cross-attention starts as an exact
copy of those weights and may diverge with training. Token embeddings and
the output projection are a single matrix.

Training uses Adam without bias correction plus decoupled weight decay
(the BERT fine-tuning convention), a linear warmup / linear decay
schedule, token-budget batch packing, and per-sample loss weights.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import Triplet, Vocabulary
from .decoder import ScoreKind, StepScores, log_softmax as np_log_softmax

NEG_ATTN = -1e9  # finite mask value; keeps softmax rows NaN-free


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 256
    max_positions: int = 128
    vocab_size: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        for name in ("d_model", "n_layers", "n_heads", "ffn_dim", "max_positions"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.vocab_size < 5:
            raise ValueError("vocab_size must cover at least the special tokens")


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 3e-4
    total_steps: int = 200
    warmup_steps: int = 20
    tokens_per_batch: int = 2048
    seed: int = 0

    def __post_init__(self) -> None:
        if self.total_steps <= 0 or self.warmup_steps <= 0:
            raise ValueError("step counts must be positive")
        if self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be < total_steps")
        if self.tokens_per_batch <= 0:
            raise ValueError("tokens_per_batch must be positive")


class TrainingDiverged(Exception):
    """Loss became non-finite during training."""


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to peak, then linear decay to 0 at total_steps."""
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    return cfg.peak_lr * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)


def encode_input(
    t: Triplet, v: Vocabulary, max_positions: int | None = None
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Concatenate src and mt around SEP with segment ids 0/1.

    The src half and the separator carry segment 0, the mt half segment 1.
    """
    ids = t.src + (v.sep_id,) + t.mt
    segments = (0,) * (len(t.src) + 1) + (1,) * len(t.mt)
    if max_positions is not None and len(ids) > max_positions:
        raise ValueError(
            f"encoder input of length {len(ids)} exceeds max_positions {max_positions}"
        )
    return ids, segments


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def forward(
        self,
        query: torch.Tensor,
        memory: torch.Tensor,
        key_padding_mask: torch.Tensor | None = None,
        causal: bool = False,
    ) -> torch.Tensor:
        bsz, q_len, d_model = query.shape
        k_len = memory.shape[1]

        def split(x: torch.Tensor) -> torch.Tensor:
            return x.view(bsz, -1, self.n_heads, self.head_dim).transpose(1, 2)

        q = split(self.q(query))
        k = split(self.k(memory))
        v = split(self.v(memory))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if causal:
            future = torch.triu(
                torch.ones(q_len, k_len, dtype=torch.bool, device=query.device),
                diagonal=1,
            )
            scores = scores.masked_fill(future, NEG_ATTN)
        if key_padding_mask is not None:
            scores = scores.masked_fill(
                key_padding_mask[:, None, None, :], NEG_ATTN
            )
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bsz, q_len, d_model)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ffn_dim: int):
        super().__init__()
        self.up = nn.Linear(d_model, ffn_dim)
        self.down = nn.Linear(ffn_dim, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down(F.gelu(self.up(x)))


class EncoderLayer(nn.Module):
    def __init__(
        self, attn: MultiHeadAttention, d_model: int, ffn_dim: int, dropout: float
    ):
        super().__init__()
        self.attn = attn  # same module object as the decoder self-attention
        self.attn_norm = nn.LayerNorm(d_model, eps=1e-12)
        self.ffn = FeedForward(d_model, ffn_dim)
        self.ffn_norm = nn.LayerNorm(d_model, eps=1e-12)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None) -> torch.Tensor:
        x = self.attn_norm(x + self.dropout(self.attn(x, x, key_padding_mask=pad_mask)))
        return self.ffn_norm(x + self.dropout(self.ffn(x)))


class DecoderLayer(nn.Module):
    def __init__(
        self,
        self_attn: MultiHeadAttention,
        d_model: int,
        n_heads: int,
        ffn_dim: int,
        dropout: float,
    ):
        super().__init__()
        self.self_attn = self_attn  # shared storage with the encoder layer
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.self_norm = nn.LayerNorm(d_model, eps=1e-12)
        self.cross_norm = nn.LayerNorm(d_model, eps=1e-12)
        self.ffn = FeedForward(d_model, ffn_dim)
        self.ffn_norm = nn.LayerNorm(d_model, eps=1e-12)
        self.dropout = nn.Dropout(dropout)

    def forward(
        self,
        x: torch.Tensor,
        enc_states: torch.Tensor,
        enc_pad_mask: torch.Tensor | None,
    ) -> torch.Tensor:
        x = self.self_norm(x + self.dropout(self.self_attn(x, x, causal=True)))
        x = self.cross_norm(
            x
            + self.dropout(
                self.cross_attn(x, enc_states, key_padding_mask=enc_pad_mask)
            )
        )
        return self.ffn_norm(x + self.dropout(self.ffn(x)))


class ApeTransformer(nn.Module):
    """Encoder-decoder with shared self-attention and tied embeddings."""

    def __init__(self, config: ModelConfig, dropout: float = 0.1):
        super().__init__()
        self.config = config
        self.token_embeddings = nn.Embedding(config.vocab_size, config.d_model)
        self.segment_embeddings = nn.Embedding(2, config.d_model)
        self.position_embeddings = nn.Embedding(config.max_positions, config.d_model)
        self.enc_embed_norm = nn.LayerNorm(config.d_model, eps=1e-12)
        self.dec_embed_norm = nn.LayerNorm(config.d_model, eps=1e-12)
        self.dropout = nn.Dropout(dropout)
        shared = [
            MultiHeadAttention(config.d_model, config.n_heads)
            for _ in range(config.n_layers)
        ]
        self.encoder_layers = nn.ModuleList(
            EncoderLayer(shared[i], config.d_model, config.ffn_dim, dropout)
            for i in range(config.n_layers)
        )
        self.decoder_layers = nn.ModuleList(
            DecoderLayer(
                shared[i], config.d_model, config.n_heads, config.ffn_dim, dropout
            )
            for i in range(config.n_layers)
        )
        self._init_parameters(config.seed)

    def _init_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Embedding)):
                module.weight.data.normal_(0.0, 0.02, generator=gen)
                if isinstance(module, nn.Linear) and module.bias is not None:
                    module.bias.data.zero_()
            elif isinstance(module, nn.LayerNorm):
                module.weight.data.fill_(1.0)
                module.bias.data.zero_()
        # cross-attention starts as a copy of the shared self-attention
        # weights and is free to diverge afterwards
        for layer in self.decoder_layers:
            layer.cross_attn.load_state_dict(layer.self_attn.state_dict())

    def _positions(self, length: int) -> torch.Tensor:
        if length > self.config.max_positions:
            raise ValueError(
                f"sequence of length {length} exceeds max_positions "
                f"{self.config.max_positions}"
            )
        device = self.token_embeddings.weight.device
        return torch.arange(length, device=device)

    def encode(
        self,
        ids: torch.Tensor,
        segments: torch.Tensor,
        pad_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        pos = self._positions(ids.shape[1])
        x = (
            self.token_embeddings(ids)
            + self.segment_embeddings(segments)
            + self.position_embeddings(pos)[None, :, :]
        )
        x = self.dropout(self.enc_embed_norm(x))
        for layer in self.encoder_layers:
            x = layer(x, pad_mask)
        return x

    def decode(
        self,
        prefix: torch.Tensor,
        enc_states: torch.Tensor,
        enc_pad_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        pos = self._positions(prefix.shape[1])
        x = self.token_embeddings(prefix) + self.position_embeddings(pos)[None, :, :]
        x = self.dropout(self.dec_embed_norm(x))
        for layer in self.decoder_layers:
            x = layer(x, enc_states, enc_pad_mask)
        return x

    def output_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        # tied projection: same matrix as the input token embeddings
        return F.linear(hidden, self.token_embeddings.weight)

    def sequence_logits(
        self,
        enc_ids: torch.Tensor,
        enc_segments: torch.Tensor,
        enc_pad_mask: torch.Tensor | None,
        dec_prefix: torch.Tensor,
    ) -> torch.Tensor:
        """Logits for every decoder position, over the whole vocabulary."""
        enc_states = self.encode(enc_ids, enc_segments, enc_pad_mask)
        hidden = self.decode(dec_prefix, enc_states, enc_pad_mask)
        return self.output_logits(hidden)

    def forward(
        self, t: Triplet, v: Vocabulary, prefix: Sequence[int]
    ) -> StepScores:
        """Next-token logits for a BOS-initiated prefix of one triplet."""
        if not prefix or prefix[0] != v.bos_id:
            raise ValueError("decoder prefix must start with BOS")
        ids, segments = encode_input(t, v, self.config.max_positions)
        device = self.token_embeddings.weight.device
        enc_ids = torch.tensor([ids], dtype=torch.long, device=device)
        enc_segments = torch.tensor([segments], dtype=torch.long, device=device)
        dec_prefix = torch.tensor([list(prefix)], dtype=torch.long, device=device)
        with torch.no_grad():
            logits = self.sequence_logits(enc_ids, enc_segments, None, dec_prefix)
        return StepScores(
            values=logits[0, -1].double().numpy(), kind=ScoreKind.LOGITS
        )


class ModelScorer:
    """Adapts a model to the decoder's Scorer interface.

    Encoder states are cached for the most recent (src, mt) pair, which
    is the access pattern of beam search. `kind` selects raw logits or
    log-softmaxed output.
    """

    def __init__(
        self,
        model: ApeTransformer,
        vocab: Vocabulary,
        kind: ScoreKind = ScoreKind.LOGITS,
    ):
        self.model = model
        self.vocab = vocab
        self.kind = kind
        self._cache_key: tuple | None = None
        self._cache_val: tuple[torch.Tensor, ...] | None = None

    def _encoder_states(self, src: Sequence[int], mt: Sequence[int]) -> torch.Tensor:
        key = (tuple(src), tuple(mt))
        if key != self._cache_key:
            ids, segments = encode_input(
                Triplet(src=tuple(src), mt=tuple(mt)),
                self.vocab,
                self.model.config.max_positions,
            )
            device = self.model.token_embeddings.weight.device
            enc_ids = torch.tensor([ids], dtype=torch.long, device=device)
            enc_segments = torch.tensor([segments], dtype=torch.long, device=device)
            with torch.no_grad():
                states = self.model.encode(enc_ids, enc_segments, None)
            self._cache_key = key
            self._cache_val = (states,)
        return self._cache_val[0]

    def score_step(
        self, src: Sequence[int], mt: Sequence[int], prefix: Sequence[int]
    ) -> StepScores:
        was_training = self.model.training
        self.model.eval()
        try:
            enc_states = self._encoder_states(src, mt)
            device = enc_states.device
            dec_prefix = torch.tensor([list(prefix)], dtype=torch.long, device=device)
            with torch.no_grad():
                hidden = self.model.decode(dec_prefix, enc_states, None)
                logits = self.model.output_logits(hidden[0, -1])
        finally:
            if was_training:
                self.model.train()
        values = logits.double().numpy()
        if self.kind is ScoreKind.LOGPROBS:
            return StepScores(values=np_log_softmax(values), kind=ScoreKind.LOGPROBS)
        return StepScores(values=values, kind=ScoreKind.LOGITS)


def as_scorer(
    model: ApeTransformer, vocab: Vocabulary, kind: ScoreKind = ScoreKind.LOGITS
) -> ModelScorer:
    return ModelScorer(model, vocab, kind)


def _as_weighted_pairs(
    samples: Iterable,
) -> list[tuple[Triplet, float]]:
    pairs = []
    for sample in samples:
        if hasattr(sample, "triplet"):
            pairs.append((sample.triplet, float(sample.weight)))
        else:
            triplet, weight = sample
            pairs.append((triplet, float(weight)))
    return pairs


def weighted_loss(
    model: ApeTransformer, samples: Iterable, vocab: Vocabulary
) -> torch.Tensor:
    """Weight-averaged token cross-entropy over a batch.

    loss = sum_s(w_s * sum_t CE) / sum_s(w_s * n_tokens_s); a sample with
    weight 0 contributes exactly nothing to the loss or its gradient.
    Samples are (Triplet, weight) pairs or objects with those attributes;
    every triplet needs a pe side.
    """
    pairs = _as_weighted_pairs(samples)
    if not pairs:
        raise ValueError("empty batch")
    for triplet, weight in pairs:
        if triplet.pe is None:
            raise ValueError("weighted loss requires pe on every sample")
        if not 0.0 <= weight <= 1.0:
            raise ValueError(f"sample weight {weight} outside [0, 1]")
    device = model.token_embeddings.weight.device
    dtype = model.token_embeddings.weight.dtype
    enc_rows = [encode_input(t, vocab, model.config.max_positions) for t, _ in pairs]
    enc_len = max(len(ids) for ids, _ in enc_rows)
    dec_len = max(len(t.pe) + 1 for t, _ in pairs)
    if dec_len > model.config.max_positions:
        raise ValueError(
            f"decoder input of length {dec_len} exceeds max_positions "
            f"{model.config.max_positions}"
        )
    batch = len(pairs)
    enc_ids = torch.full((batch, enc_len), vocab.pad_id, dtype=torch.long)
    enc_segments = torch.zeros((batch, enc_len), dtype=torch.long)
    enc_pad = torch.ones((batch, enc_len), dtype=torch.bool)
    dec_in = torch.full((batch, dec_len), vocab.pad_id, dtype=torch.long)
    targets = torch.full((batch, dec_len), vocab.pad_id, dtype=torch.long)
    for row, ((ids, segments), (triplet, _)) in enumerate(zip(enc_rows, pairs)):
        enc_ids[row, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        enc_segments[row, : len(segments)] = torch.tensor(segments, dtype=torch.long)
        enc_pad[row, : len(ids)] = False
        out = triplet.pe + (vocab.eos_id,)
        dec_in[row, : len(out)] = torch.tensor((vocab.bos_id,) + triplet.pe)
        targets[row, : len(out)] = torch.tensor(out, dtype=torch.long)
    enc_ids, enc_segments, enc_pad = (
        enc_ids.to(device),
        enc_segments.to(device),
        enc_pad.to(device),
    )
    dec_in, targets = dec_in.to(device), targets.to(device)
    logits = model.sequence_logits(enc_ids, enc_segments, enc_pad, dec_in)
    ce = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none"
    ).view(batch, dec_len)
    target_mask = (targets != vocab.pad_id).to(dtype)
    weights = torch.tensor([w for _, w in pairs], dtype=dtype, device=device)
    token_counts = target_mask.sum(dim=1)
    denom = (weights * token_counts).sum()
    if denom.item() == 0.0:
        raise ValueError("total sample weight is zero; nothing to learn from")
    numer = (weights * (ce * target_mask).sum(dim=1)).sum()
    return numer / denom


class BertAdam(torch.optim.Optimizer):
    """Adam without bias correction, with decoupled weight decay."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-6, weight_decay=0.01):
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure: Callable | None = None):
        loss = closure() if closure is not None else None
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                grad = p.grad
                state = self.state[p]
                if not state:
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                exp_avg, exp_avg_sq = state["exp_avg"], state["exp_avg_sq"]
                exp_avg.mul_(beta1).add_(grad, alpha=1 - beta1)
                exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
                update = exp_avg / (exp_avg_sq.sqrt() + group["eps"])
                if group["weight_decay"] > 0.0:
                    update = update + group["weight_decay"] * p
                p.add_(update, alpha=-group["lr"])
        return loss


def _optimizer_param_groups(model: nn.Module, weight_decay: float):
    decay, no_decay = [], []
    for name, param in model.named_parameters():
        if name.endswith("bias") or "norm" in name.lower():
            no_decay.append(param)
        else:
            decay.append(param)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


@dataclass(frozen=True)
class TrainLogEntry:
    step: int
    lr: float
    loss: float


def _pack_batches(
    pairs: list[tuple[Triplet, float]], tokens_per_batch: int
) -> list[list[int]]:
    """Group sample indices into batches of roughly tokens_per_batch target tokens.

    Samples are length-sorted first so padded batches stay dense; the last
    partial batch is kept.
    """
    order = sorted(range(len(pairs)), key=lambda i: (len(pairs[i][0].pe), i))
    batches: list[list[int]] = []
    current: list[int] = []
    budget = 0
    for idx in order:
        current.append(idx)
        budget += len(pairs[idx][0].pe) + 1
        if budget >= tokens_per_batch:
            batches.append(current)
            current = []
            budget = 0
    if current:
        batches.append(current)
    return batches


def train(
    model: ApeTransformer,
    samples: Iterable,
    cfg: TrainConfig,
    vocab: Vocabulary,
    log_every: int = 10,
    weight_decay: float = 0.01,
    log_fn: Callable[[TrainLogEntry], None] | None = None,
) -> list[TrainLogEntry]:
    """Train in place and return the loss trace.

    Deterministic given cfg.seed. Zero-weight samples are dropped before
    packing (they cannot contribute loss or gradient). Raises
    TrainingDiverged if the loss goes non-finite.
    """
    pairs = [(t, w) for t, w in _as_weighted_pairs(samples) if w > 0.0]
    if not pairs:
        raise ValueError("no samples with positive weight")
    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    batches = _pack_batches(pairs, cfg.tokens_per_batch)
    order = list(range(len(batches)))
    optimizer = BertAdam(
        _optimizer_param_groups(model, weight_decay),
        lr=0.0,
        eps=1e-6,
        weight_decay=weight_decay,
    )
    trace: list[TrainLogEntry] = []
    model.train()
    for step in range(cfg.total_steps):
        if step % len(batches) == 0:
            rng.shuffle(order)
        batch = [pairs[i] for i in batches[order[step % len(batches)]]]
        lr = learning_rate(step, cfg)
        loss = weighted_loss(model, batch, vocab)
        loss_value = float(loss.item())
        if not math.isfinite(loss_value):
            raise TrainingDiverged(f"loss {loss_value} at step {step}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.step()
        if step % log_every == 0 or step == cfg.total_steps - 1:
            entry = TrainLogEntry(step=step, lr=lr, loss=loss_value)
            trace.append(entry)
            if log_fn is not None:
                log_fn(entry)
    model.eval()
    return trace
