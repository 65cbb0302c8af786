"""Causal-attention language model over instruction:text token sequences.

The loss covers the full sequence (instruction included) by default;
``mask_instruction_loss`` restricts it to positions after the separator.
The output head starts at zero, so a freshly initialized model emits the
uniform distribution, which pins the initial loss at ln V exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dpsynth.models import nn
from dpsynth.models.vocab import EOS_ID, PAD_ID, SEP_ID, TokenSequence, Vocabulary, decode
from dpsynth.rng import child_rng


@dataclass(frozen=True)
class ArConfig:
    vocab_size: int
    embedding_dim: int = 32
    num_layers: int = 2
    num_heads: int = 4
    max_sequence_length: int = 64
    sinusoidal_positions: bool = False
    mask_instruction_loss: bool = False

    def __post_init__(self) -> None:
        for name in ("vocab_size", "embedding_dim", "num_layers", "num_heads", "max_sequence_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.embedding_dim % self.num_heads != 0:
            raise ValueError("embedding_dim must be divisible by num_heads")


def sinusoidal_table(length: int, dim: int) -> np.ndarray:
    positions = np.arange(length)[:, None]
    freqs = np.exp(-math.log(10000.0) * np.arange(0, dim, 2) / dim)[None, :]
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(positions * freqs)
    table[:, 1::2] = np.cos(positions * freqs[:, : dim - dim // 2])
    return table


def init_ar_params(config: ArConfig, seed: int) -> nn.Params:
    rng = child_rng(seed, "model", "ar", "init")
    params = nn.init_stack_params(rng, config.embedding_dim, config.num_layers)
    params["tok_emb"] = nn.init_normal(rng, (config.vocab_size, config.embedding_dim))
    if config.sinusoidal_positions:
        params["pos_emb"] = sinusoidal_table(config.max_sequence_length, config.embedding_dim)
    else:
        params["pos_emb"] = nn.init_normal(rng, (config.max_sequence_length, config.embedding_dim))
    params["head.w"] = np.zeros((config.embedding_dim, config.vocab_size))
    params["head.b"] = np.zeros(config.vocab_size)
    return params


def param_names(params: nn.Params) -> list[str]:
    return sorted(params)


def trainable_names(config: ArConfig, params: nn.Params, private: bool) -> list[str]:
    """Positional embeddings are frozen under DP (and always, if sinusoidal)."""
    frozen = {"pos_emb"} if (private or config.sinusoidal_positions) else set()
    return [name for name in sorted(params) if name not in frozen]


def logits(params: nn.Params, config: ArConfig, ids: np.ndarray) -> np.ndarray:
    """(B, T) token ids -> (B, T, V) next-token logits."""
    _batch, seq_len = ids.shape
    x = params["tok_emb"][ids] + params["pos_emb"][:seq_len][None, :, :]
    h, _ = nn.stack_forward(params, x, config.num_layers, config.num_heads, nn.causal_mask(seq_len))
    return nn.linear_forward(h, params["head.w"], params["head.b"])


def _loss_mask(
    ids: np.ndarray, lengths: np.ndarray, instruction_lengths: np.ndarray | None, masked: bool
) -> np.ndarray:
    """(B, T-1) mask of positions whose next-token prediction is scored."""
    _batch, seq_len = ids.shape
    positions = np.arange(1, seq_len)[None, :]  # index of the predicted token
    mask = positions < lengths[:, None]
    if masked:
        if instruction_lengths is None:
            raise ValueError("instruction lengths required when masking the instruction loss")
        mask = mask & (positions >= instruction_lengths[:, None])
    return mask.astype(np.float64)


def position_nll(params: nn.Params, config: ArConfig, ids: np.ndarray) -> np.ndarray:
    """(B, T-1) negative log-likelihood of each next token, no masking."""
    logp = nn.log_softmax(logits(params, config, ids)[:, :-1, :], axis=-1)
    return -np.take_along_axis(logp, ids[:, 1:, None], axis=2)[:, :, 0]


def nll_loss(
    params: nn.Params,
    config: ArConfig,
    ids: np.ndarray,
    lengths: np.ndarray,
    instruction_lengths: np.ndarray | None = None,
    want_grads: bool = False,
) -> tuple[np.ndarray, nn.Grads | None]:
    """Per-example mean next-token NLL over scored positions.

    With ``want_grads``, also returns per-example gradients for every
    parameter (leading batch axis).
    """
    batch, seq_len = ids.shape
    mask = _loss_mask(ids, lengths, instruction_lengths, config.mask_instruction_loss)
    counts = np.maximum(mask.sum(axis=1), 1.0)

    x = params["tok_emb"][ids] + params["pos_emb"][:seq_len][None, :, :]
    attn_mask = nn.causal_mask(seq_len)
    h, caches = nn.stack_forward(params, x, config.num_layers, config.num_heads, attn_mask)
    raw = nn.linear_forward(h, params["head.w"], params["head.b"])
    logp = nn.log_softmax(raw[:, :-1, :], axis=-1)
    token_nll = -np.take_along_axis(logp, ids[:, 1:, None], axis=2)[:, :, 0]
    losses = (token_nll * mask).sum(axis=1) / counts
    if not np.all(np.isfinite(losses)):
        raise FloatingPointError("non-finite language model loss")
    if not want_grads:
        return losses, None

    probs = np.exp(logp)
    dlogits = np.zeros_like(raw)
    weight = (mask / counts[:, None])[:, :, None]
    dpred = probs.copy()
    np.put_along_axis(
        dpred, ids[:, 1:, None], np.take_along_axis(dpred, ids[:, 1:, None], axis=2) - 1.0, axis=2
    )
    dlogits[:, :-1, :] = dpred * weight

    dh, dw_head, db_head = nn.linear_backward(dlogits, h, params["head.w"])
    dx, grads = nn.stack_backward(params, caches, dh, config.num_layers, config.num_heads)
    grads["head.w"] = dw_head
    grads["head.b"] = db_head
    grads["tok_emb"] = nn.embedding_backward(dx, ids, config.vocab_size)
    pos_grad = np.zeros((batch,) + params["pos_emb"].shape)
    pos_grad[:, :seq_len, :] = dx
    grads["pos_emb"] = pos_grad
    return losses, grads


def make_grad_fn(
    config: ArConfig,
    template_params: nn.Params,
    names: list[str],
    ids: np.ndarray,
    lengths: np.ndarray,
    instruction_lengths: np.ndarray,
):
    """Closure mapping (flat trainable vector, dataset indices) to per-example
    losses and a (batch, num_params) gradient matrix, as the DP engine expects.
    Parameters outside ``names`` stay fixed at their template values."""
    base = dict(template_params)

    def grad_fn(vector: np.ndarray, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        params = nn.vector_to_params(vector, base, names)
        losses, grads = nll_loss(
            params, config, ids[indices], lengths[indices],
            instruction_lengths[indices], want_grads=True,
        )
        return losses, nn.grads_to_matrix(grads, params, names, batch=len(indices))

    return grad_fn


def _sample_from_logits(
    row: np.ndarray, temperature: float, top_k: int, rng: np.random.Generator
) -> int:
    """Temperature + top-k sampling; pad is never a candidate."""
    scores = row / temperature
    scores[PAD_ID] = -np.inf
    # stable candidate selection: by score descending, then id ascending
    order = np.lexsort((np.arange(scores.size), -scores))[:top_k]
    if top_k == 1:
        return int(order[0])
    kept = scores[order]
    probs = np.exp(kept - kept.max())
    probs /= probs.sum()
    return int(order[rng.choice(len(order), p=probs)])


def generate_ids(
    params: nn.Params,
    config: ArConfig,
    prefix_ids: list[int],
    max_new_tokens: int,
    temperature: float,
    top_k: int,
    rng: np.random.Generator,
) -> list[int]:
    """Sample token ids after the prefix until eos or the budget runs out."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not 1 <= top_k <= config.vocab_size:
        raise ValueError(f"top_k must be in [1, {config.vocab_size}]")
    ids = list(prefix_ids)
    out: list[int] = []
    for _ in range(max_new_tokens):
        if len(ids) >= config.max_sequence_length:
            break
        row = logits(params, config, np.asarray([ids]))[0, -1]
        token = _sample_from_logits(row, temperature, top_k, rng)
        if token == EOS_ID:
            break
        ids.append(token)
        out.append(token)
    return out


def generate(
    params: nn.Params,
    config: ArConfig,
    vocab: Vocabulary,
    instruction: str,
    max_new_tokens: int,
    temperature: float = 1.0,
    top_k: int = 50,
    rng: np.random.Generator | None = None,
) -> str:
    """Sample a text continuation for one instruction; excludes the prefix."""
    rng = rng if rng is not None else np.random.default_rng(0)
    prefix = [vocab.token_to_id(w) for w in instruction.split()] + [SEP_ID]
    top_k = min(top_k, config.vocab_size)
    new_ids = generate_ids(params, config, prefix, max_new_tokens, temperature, top_k, rng)
    seq = TokenSequence(ids=tuple(prefix + new_ids), instruction_length=len(prefix))
    return decode(vocab, seq)


def generate_batch(
    params: nn.Params,
    config: ArConfig,
    prefixes: list[list[int]],
    max_new_tokens: int,
    temperature: float,
    top_k: int,
    rngs: list[np.random.Generator],
) -> list[list[int]]:
    """Lockstep batched sampling with one rng per sequence.

    Right padding plus causal attention keeps each row's logits independent
    of the others, so the batch composition never changes what a row can
    sample; each row's draws come from its own generator.
    """
    if len(prefixes) != len(rngs):
        raise ValueError("need exactly one rng per prefix")
    top_k = min(top_k, config.vocab_size)
    sequences = [list(p) for p in prefixes]
    outputs: list[list[int]] = [[] for _ in prefixes]
    done = [False] * len(prefixes)
    for _ in range(max_new_tokens):
        active = [
            i
            for i, seq in enumerate(sequences)
            if not done[i] and len(seq) < config.max_sequence_length
        ]
        if not active:
            break
        width = max(len(sequences[i]) for i in active)
        ids = np.full((len(active), width), PAD_ID, dtype=np.int64)
        for row, i in enumerate(active):
            ids[row, : len(sequences[i])] = sequences[i]
        rows = logits(params, config, ids)
        for row, i in enumerate(active):
            last = rows[row, len(sequences[i]) - 1]
            token = _sample_from_logits(last, temperature, top_k, rngs[i])
            if token == EOS_ID:
                done[i] = True
            else:
                sequences[i].append(token)
                outputs[i].append(token)
    return outputs
