"""Sequence-to-sequence text diffusion with partial noising.

Sequences are laid out as [condition tokens, fixed-width target block,
trailing batch padding]. Only the target block is noised and denoised;
condition positions carry exact token embeddings at every timestep, and
trailing padding is hidden from attention, so a sequence's loss does not
depend on what else sits in its batch.

The denoiser predicts z_0 directly. Its input is a projection of
concat(z_t, previous z_0 estimate); with self-conditioning off the previous
estimate is identically zero, which makes the two modes coincide exactly
when a zero estimate is fed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from dpsynth.data import Corpus
from dpsynth.models import nn
from dpsynth.models.vocab import EOS_ID, PAD_ID, SEP_ID, Vocabulary
from dpsynth.rng import child_rng


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal levels alpha_bar_0 .. alpha_bar_T, clamped and monotone."""

    alpha_bar: tuple[float, ...]
    offset: float = 1e-4

    def __post_init__(self) -> None:
        if len(self.alpha_bar) < 2:
            raise ValueError("schedule needs at least alpha_bar_0 and alpha_bar_1")
        if any(not 1e-5 <= a <= 1.0 - 1e-5 for a in self.alpha_bar):
            raise ValueError("alpha_bar values must lie in [1e-5, 1 - 1e-5]")
        if any(b > a for a, b in zip(self.alpha_bar, self.alpha_bar[1:])):
            raise ValueError("alpha_bar must be non-increasing")

    @property
    def num_steps(self) -> int:
        return len(self.alpha_bar) - 1

    def as_array(self) -> np.ndarray:
        return np.asarray(self.alpha_bar)


def sqrt_schedule(num_diffusion_steps: int, offset: float = 1e-4) -> NoiseSchedule:
    """alpha_bar_t = clamp(1 - sqrt(t / T + s)); the floor engages at t = T."""
    if num_diffusion_steps < 2:
        raise ValueError("need at least 2 diffusion steps")
    t = np.arange(num_diffusion_steps + 1)
    raw = 1.0 - np.sqrt(t / num_diffusion_steps + offset)
    clamped = np.clip(raw, 1e-5, 1.0 - 1e-5)
    return NoiseSchedule(alpha_bar=tuple(float(a) for a in clamped), offset=offset)


@dataclass(frozen=True)
class DiffusionConfig:
    vocab_size: int
    embedding_dim: int = 32
    num_layers: int = 2
    num_heads: int = 4
    max_sequence_length: int = 64
    target_length: int = 16
    num_diffusion_steps: int = 200
    schedule_offset: float = 1e-4
    self_conditioning: bool = False
    mse_weight: float = 1.0
    rounding_weight: float = 1.0
    regularizer_weight: float = 1.0

    def __post_init__(self) -> None:
        for name in (
            "vocab_size", "embedding_dim", "num_layers", "num_heads",
            "max_sequence_length", "target_length", "num_diffusion_steps",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.embedding_dim % self.num_heads != 0:
            raise ValueError("embedding_dim must be divisible by num_heads")
        if self.target_length >= self.max_sequence_length:
            raise ValueError("target_length must leave room for condition tokens")

    def schedule(self) -> NoiseSchedule:
        return sqrt_schedule(self.num_diffusion_steps, self.schedule_offset)


@dataclass(frozen=True)
class DiffusionBatch:
    """One noised training batch.

    ``ids`` holds condition tokens at non-target positions and gold tokens
    inside the target block; ``valid`` is false only at trailing batch
    padding.
    """

    ids: np.ndarray          # (B, T) int
    t: np.ndarray            # (B,) int in [1, T_diff]
    z_t: np.ndarray          # (B, T, D)
    target_mask: np.ndarray  # (B, T) bool
    valid: np.ndarray        # (B, T) bool

    @property
    def condition_ids(self) -> np.ndarray:
        return np.where(self.target_mask, PAD_ID, self.ids)


def init_diffusion_params(config: DiffusionConfig, seed: int) -> nn.Params:
    rng = child_rng(seed, "model", "diffusion", "init")
    dim = config.embedding_dim
    params = nn.init_stack_params(rng, dim, config.num_layers)
    params["emb"] = nn.init_normal(rng, (config.vocab_size, dim))
    params["pos_emb"] = nn.init_normal(rng, (config.max_sequence_length, dim))
    params["t_emb"] = nn.init_normal(rng, (config.num_diffusion_steps, dim))
    params["in_proj.w"] = np.concatenate(
        [np.eye(dim), np.zeros((dim, dim))], axis=0
    ) + nn.init_normal(rng, (2 * dim, dim))
    params["in_proj.b"] = np.zeros(dim)
    params["out.w"] = np.zeros((dim, dim))
    params["out.b"] = np.zeros(dim)
    return params


def trainable_names(config: DiffusionConfig, params: nn.Params, private: bool) -> list[str]:
    """Positional embeddings are frozen under DP, as in the causal model."""
    frozen = {"pos_emb"} if private else set()
    return [name for name in sorted(params) if name not in frozen]


def forward_noising(
    z_0: np.ndarray,
    t: np.ndarray,
    schedule: NoiseSchedule,
    target_mask: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Closed-form jump to step t at target positions; identity elsewhere."""
    t = np.asarray(t)
    if np.any((t < 1) | (t > schedule.num_steps)):
        raise ValueError(f"t must lie in [1, {schedule.num_steps}]")
    abar = schedule.as_array()[t][:, None, None]
    noise = rng.standard_normal(z_0.shape)
    noised = np.sqrt(abar) * z_0 + np.sqrt(1.0 - abar) * noise
    return np.where(target_mask[:, :, None], noised, z_0)


def forward_step(
    z_prev: np.ndarray,
    t: int,
    schedule: NoiseSchedule,
    target_mask: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Single transition t-1 -> t; composing these matches forward_noising.

    Clean z_0 has signal level exactly 1, so the first transition divides
    by 1 rather than the stored (clamped) alpha_bar_0.
    """
    abar = schedule.as_array()
    alpha_t = abar[t] / (abar[t - 1] if t >= 2 else 1.0)
    noise = rng.standard_normal(z_prev.shape)
    stepped = math.sqrt(alpha_t) * z_prev + math.sqrt(1.0 - alpha_t) * noise
    return np.where(target_mask[:, :, None], stepped, z_prev)


def denoiser_forward(
    params: nn.Params,
    config: DiffusionConfig,
    z_t: np.ndarray,
    t: np.ndarray,
    prev_z0: np.ndarray,
    valid: np.ndarray,
) -> tuple[np.ndarray, dict]:
    """Predict z_0 from (z_t, t, previous estimate); returns caches for backprop."""
    _batch, seq_len, _dim = z_t.shape
    if seq_len > params["pos_emb"].shape[0]:
        raise ValueError("sequence longer than the positional table")
    x_cat = np.concatenate([z_t, prev_z0], axis=-1)
    x = nn.linear_forward(x_cat, params["in_proj.w"], params["in_proj.b"])
    x = x + params["pos_emb"][:seq_len][None, :, :] + params["t_emb"][t - 1][:, None, :]
    mask = nn.key_padding_mask(valid)
    h, caches = nn.stack_forward(params, x, config.num_layers, config.num_heads, mask)
    z0_hat = nn.linear_forward(h, params["out.w"], params["out.b"])
    return z0_hat, dict(x_cat=x_cat, h=h, stack=caches, seq_len=seq_len)


def denoiser_backward(
    params: nn.Params,
    config: DiffusionConfig,
    cache: dict,
    t: np.ndarray,
    dz0_hat: np.ndarray,
) -> tuple[np.ndarray, nn.Grads]:
    """Gradients of the denoiser; the previous-estimate input is detached."""
    batch = dz0_hat.shape[0]
    dh, dw_out, db_out = nn.linear_backward(dz0_hat, cache["h"], params["out.w"])
    dx, grads = nn.stack_backward(params, cache["stack"], dh, config.num_layers, config.num_heads)
    grads["out.w"] = dw_out
    grads["out.b"] = db_out

    seq_len = cache["seq_len"]
    pos_grad = np.zeros((batch,) + params["pos_emb"].shape)
    pos_grad[:, :seq_len, :] = dx
    grads["pos_emb"] = pos_grad
    t_grad = np.zeros((batch,) + params["t_emb"].shape)
    np.add.at(t_grad, (np.arange(batch), t - 1), dx.sum(axis=1))
    grads["t_emb"] = t_grad

    dx_cat, dw_in, db_in = nn.linear_backward(dx, cache["x_cat"], params["in_proj.w"])
    grads["in_proj.w"] = dw_in
    grads["in_proj.b"] = db_in
    dz_t = dx_cat[..., : config.embedding_dim]
    return dz_t, grads


def _rounding_logits(z: np.ndarray, emb: np.ndarray) -> np.ndarray:
    """(B, T, V) scores: negative squared distance to each embedding row."""
    sq_z = np.sum(z * z, axis=-1, keepdims=True)
    sq_e = np.sum(emb * emb, axis=-1)
    return -(sq_z - 2.0 * (z @ emb.T) + sq_e[None, None, :])


def diffusion_loss(
    params: nn.Params,
    config: DiffusionConfig,
    batch: DiffusionBatch,
    schedule: NoiseSchedule,
    prev_z0: np.ndarray | None = None,
    want_grads: bool = False,
    denoiser_fn: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> tuple[np.ndarray, nn.Grads | None]:
    """Per-example loss, averaged over target positions.

    Per target position: mse ||z0_hat - z0||^2, a rounding term
    -log softmax(-||z0 - emb_w||^2)[gold], and the terminal-signal
    regularizer alpha_bar_T ||z0||^2, each weighted from the config. An
    empty target mask yields loss 0. ``denoiser_fn`` substitutes a stub
    denoiser (forward only, no gradients).
    """
    emb = params["emb"]
    z_0 = emb[batch.ids]
    if prev_z0 is None:
        prev_z0 = np.zeros_like(batch.z_t)
    if denoiser_fn is not None:
        if want_grads:
            raise ValueError("gradients are only defined for the model denoiser")
        z0_hat = denoiser_fn(batch.z_t, batch.t, prev_z0)
        cache = None
    else:
        z0_hat, cache = denoiser_forward(params, config, batch.z_t, batch.t, prev_z0, batch.valid)

    mask = batch.target_mask.astype(np.float64)
    counts = np.maximum(mask.sum(axis=1), 1.0)
    weight = mask / counts[:, None]  # (B, T), zero off-target

    diff = z0_hat - z_0
    mse = np.sum(diff * diff, axis=-1)
    logits = _rounding_logits(z_0, emb)
    logp = nn.log_softmax(logits, axis=-1)
    rounding = -np.take_along_axis(logp, batch.ids[:, :, None], axis=2)[:, :, 0]
    abar_final = schedule.alpha_bar[-1]
    reg = abar_final * np.sum(z_0 * z_0, axis=-1)

    per_position = (
        config.mse_weight * mse
        + config.rounding_weight * rounding
        + config.regularizer_weight * reg
    )
    losses = (per_position * weight).sum(axis=1)
    if not np.all(np.isfinite(losses)):
        raise FloatingPointError("non-finite diffusion loss")
    if not want_grads:
        return losses, None

    batch_size, _seq_len, _dim = batch.z_t.shape
    w3 = weight[:, :, None]

    # mse path through the denoiser
    dz0_hat = config.mse_weight * 2.0 * diff * w3
    dz_t, grads = denoiser_backward(params, config, cache, batch.t, dz0_hat)

    # gather gradient contributions that land on clean z_0
    dz0 = -config.mse_weight * 2.0 * diff * w3
    # rounding: dL/dz0 = 2 (softmax - onehot) @ emb, rows of the factor sum to 0
    probs = np.exp(logp)
    coeff = probs.copy()
    np.put_along_axis(
        coeff, batch.ids[:, :, None],
        np.take_along_axis(coeff, batch.ids[:, :, None], axis=2) - 1.0, axis=2,
    )
    coeff_weighted = coeff * (config.rounding_weight * w3[:, :, 0])[:, :, None]
    dz0 = dz0 + 2.0 * np.einsum("btv,vd->btd", coeff_weighted, emb)
    dz0 = dz0 + config.regularizer_weight * abar_final * 2.0 * z_0 * w3
    # z_t depends on z_0: sqrt(abar_t) inside the target block, identity outside
    abar_t = schedule.as_array()[batch.t][:, None, None]
    dz0 = dz0 + np.where(batch.target_mask[:, :, None], np.sqrt(abar_t) * dz_t, dz_t)

    demb = nn.embedding_backward(dz0, batch.ids, config.vocab_size)
    # rounding: direct dependence on every embedding row
    # dL/dE_w = sum_pos 2 c_w (z0_pos - E_w), with c the weighted coefficient
    demb += 2.0 * np.einsum("btv,btd->bvd", coeff_weighted, z_0)
    demb -= 2.0 * coeff_weighted.sum(axis=1)[:, :, None] * emb[None, :, :]
    grads["emb"] = grads.get("emb", 0) + demb
    return losses, grads


def round_to_tokens(z: np.ndarray, emb: np.ndarray) -> np.ndarray:
    """Nearest embedding row per position; ties resolve to the lowest id."""
    diffs = z[..., None, :] - emb[None, :, :] if z.ndim == 2 else z[:, :, None, :] - emb
    dists = np.sum(diffs * diffs, axis=-1)
    return np.argmin(dists, axis=-1)


def encode_for_diffusion(
    vocab: Vocabulary, instruction: str, text: str, target_length: int
) -> tuple[list[int], list[bool]]:
    """[instruction, sep | text, eos, pads]; mask is true on the target block."""
    cond = [vocab.token_to_id(w) for w in instruction.split()] + [SEP_ID]
    body = [vocab.token_to_id(w) for w in text.split()][: target_length - 1]
    target = body + [EOS_ID] + [PAD_ID] * (target_length - len(body) - 1)
    ids = cond + target
    mask = [False] * len(cond) + [True] * target_length
    return ids, mask


def pad_diffusion_batch(
    encoded: Sequence[tuple[list[int], list[bool]]],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad encoded (ids, mask) pairs; returns (ids, target_mask, valid)."""
    width = max(len(ids) for ids, _ in encoded)
    n = len(encoded)
    ids = np.full((n, width), PAD_ID, dtype=np.int64)
    target = np.zeros((n, width), dtype=bool)
    valid = np.zeros((n, width), dtype=bool)
    for i, (row_ids, row_mask) in enumerate(encoded):
        ids[i, : len(row_ids)] = row_ids
        target[i, : len(row_mask)] = row_mask
        valid[i, : len(row_ids)] = True
    return ids, target, valid


def make_noised_batch(
    params: nn.Params,
    ids: np.ndarray,
    target_mask: np.ndarray,
    valid: np.ndarray,
    t: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> DiffusionBatch:
    z_0 = params["emb"][ids]
    z_t = forward_noising(z_0, t, schedule, target_mask, rng)
    return DiffusionBatch(ids=ids, t=t, z_t=z_t, target_mask=target_mask, valid=valid)


def make_grad_fn(
    config: DiffusionConfig,
    template_params: nn.Params,
    names: list[str],
    ids: np.ndarray,
    target_mask: np.ndarray,
    valid: np.ndarray,
    schedule: NoiseSchedule,
    seed: int,
):
    """Engine closure: fresh (t, noise) each call, deterministic given seed.

    With self-conditioning on, a gradient-free first pass supplies the
    previous-estimate input for the scored pass.
    """
    base = dict(template_params)
    stream = child_rng(seed, "diffusion", "noising")

    def grad_fn(vector: np.ndarray, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        params = nn.vector_to_params(vector, base, names)
        t = stream.integers(1, schedule.num_steps + 1, size=len(indices))
        batch = make_noised_batch(
            params, ids[indices], target_mask[indices], valid[indices], t, schedule, stream
        )
        prev = None
        if config.self_conditioning:
            prev, _ = denoiser_forward(
                params, config, batch.z_t, batch.t, np.zeros_like(batch.z_t), batch.valid
            )
        losses, grads = diffusion_loss(
            params, config, batch, schedule, prev_z0=prev, want_grads=True
        )
        return losses, nn.grads_to_matrix(grads, params, names, batch=len(indices))

    return grad_fn


def _posterior_step(
    z_t: np.ndarray,
    z0_hat: np.ndarray,
    t: int,
    schedule: NoiseSchedule,
    target_mask: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Sample z_{t-1} | z_t, z0_hat at target positions (t >= 2)."""
    abar = schedule.as_array()
    alpha_t = abar[t] / abar[t - 1]
    beta_t = 1.0 - alpha_t
    coef_z0 = math.sqrt(abar[t - 1]) * beta_t / (1.0 - abar[t])
    coef_zt = math.sqrt(alpha_t) * (1.0 - abar[t - 1]) / (1.0 - abar[t])
    var = beta_t * (1.0 - abar[t - 1]) / (1.0 - abar[t])
    noise = rng.standard_normal(z_t.shape)
    stepped = coef_z0 * z0_hat + coef_zt * z_t + math.sqrt(var) * noise
    return np.where(target_mask[:, :, None], stepped, z_t)


def reverse_sample_batch(
    params: nn.Params,
    config: DiffusionConfig,
    condition_ids: Sequence[Sequence[int]],
    schedule: NoiseSchedule,
    rngs: Sequence[np.random.Generator],
    clamp: bool = True,
    denoiser_fn: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> list[list[int]]:
    """Denoise target blocks for a batch of instruction prefixes.

    Target positions start from standard Gaussian noise drawn per example
    from its own generator; the final reverse step emits z0_hat directly,
    so an oracle denoiser recovers its target exactly. Returns the rounded
    token ids of each target block.
    """
    if len(condition_ids) != len(rngs):
        raise ValueError("need exactly one rng per condition")
    emb = params["emb"]
    encoded = [
        (list(cond) + [PAD_ID] * config.target_length,
         [False] * len(cond) + [True] * config.target_length)
        for cond in condition_ids
    ]
    ids, target_mask, valid = pad_diffusion_batch(encoded)
    z = emb[ids]
    for i, rng in enumerate(rngs):
        block = slice(len(condition_ids[i]), len(condition_ids[i]) + config.target_length)
        z[i, block] = rng.standard_normal((config.target_length, emb.shape[1]))
    prev = np.zeros_like(z)

    z0_hat = np.zeros_like(z)
    for t in range(schedule.num_steps, 0, -1):
        t_vec = np.full(len(encoded), t, dtype=np.int64)
        if denoiser_fn is not None:
            z0_hat = denoiser_fn(z, t_vec, prev)
        else:
            z0_hat, _ = denoiser_forward(params, config, z, t_vec, prev, valid)
        z0_hat = np.where(target_mask[:, :, None], z0_hat, emb[ids])
        if clamp:
            nearest = round_to_tokens(z0_hat, emb)
            z0_hat = np.where(target_mask[:, :, None], emb[nearest], z0_hat)
        if config.self_conditioning:
            prev = z0_hat
        if t > 1:
            for i, rng in enumerate(rngs):
                row = _posterior_step(
                    z[i : i + 1], z0_hat[i : i + 1], t, schedule,
                    target_mask[i : i + 1], rng,
                )
                z[i] = row[0]
        else:
            z = np.where(target_mask[:, :, None], z0_hat, z)

    rounded = round_to_tokens(z, emb)
    out: list[list[int]] = []
    for i, cond in enumerate(condition_ids):
        block = rounded[i, len(cond) : len(cond) + config.target_length]
        out.append([int(token) for token in block])
    return out


def reverse_sample(
    params: nn.Params,
    config: DiffusionConfig,
    condition_ids: Sequence[int],
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    clamp: bool = True,
    denoiser_fn: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> list[int]:
    """Single-sequence reverse diffusion; see reverse_sample_batch."""
    return reverse_sample_batch(
        params, config, [list(condition_ids)], schedule, [rng], clamp, denoiser_fn
    )[0]


def decode_target_block(vocab: Vocabulary, block: Sequence[int]) -> str:
    """Token ids of a target block -> text, stopping at eos, skipping pads."""
    words = []
    for token_id in block:
        if token_id == EOS_ID:
            break
        if token_id == PAD_ID:
            continue
        words.append(vocab.id_to_token(int(token_id)))
    return " ".join(words)


def make_span_mask(length: int, span_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """One contiguous target span covering span_fraction of the sequence."""
    if not 0.0 <= span_fraction <= 1.0:
        raise ValueError("span_fraction must be in [0, 1]")
    mask = np.zeros(length, dtype=bool)
    span = int(round(span_fraction * length))
    if span == 0:
        return mask
    start = int(rng.integers(0, length - span + 1))
    mask[start : start + span] = True
    return mask


def span_pretrain(
    corpus: Corpus,
    vocab: Vocabulary,
    config: DiffusionConfig,
    span_fraction: float = 0.5,
    num_steps: int = 400,
    batch_size: int = 32,
    learning_rate: float = 0.05,
    seed: int = 0,
) -> tuple[nn.Params, dict]:
    """Public-corpus span-diffusion pretraining; returns (params, metadata).

    Each sequence gets one contiguous span as its target mask and the
    ordinary diffusion loss applies. Corpora flagged private are refused:
    this stage spends no privacy budget and must never see sensitive data.
    """
    if corpus.private:
        raise ValueError(
            f"corpus {corpus.name!r} is flagged private; span pretraining is public-data only"
        )
    from dpsynth.dpsgd import run_sgd_loop  # local import to avoid a cycle

    mask_rng = child_rng(seed, "pretrain", "spans")
    window = config.max_sequence_length - 1
    encoded = []
    for record in corpus.records:
        body = [vocab.token_to_id(w) for w in record.text.split()][:window] + [EOS_ID]
        span = make_span_mask(len(body), span_fraction, mask_rng)
        encoded.append((body, list(span)))
    ids, target_mask, valid = pad_diffusion_batch(encoded)

    params = init_diffusion_params(config, seed)
    schedule = config.schedule()
    names = trainable_names(config, params, private=False)
    grad_fn = make_grad_fn(
        config, params, names, ids, target_mask, valid, schedule, seed=seed
    )
    result = run_sgd_loop(
        grad_fn, nn.params_to_vector(params, names), len(encoded),
        batch_size=batch_size, num_steps=num_steps,
        learning_rate=learning_rate, seed=seed,
    )
    trained = nn.vector_to_params(result.parameters, params, names)
    meta = {
        "kind": "diffusion-span-pretrain",
        "corpus": corpus.name,
        "span_fraction": span_fraction,
        "num_steps": num_steps,
        "final_loss": result.step_losses[-1],
        "seed": seed,
    }
    return trained, meta
