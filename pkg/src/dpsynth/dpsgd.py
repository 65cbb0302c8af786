"""DP-SGD training loop: Poisson lots, per-example clipping, Gaussian noise.

The engine works on a flat float64 parameter vector. Models supply a
``grad_fn(vector, indices) -> (losses, per_example_grad_matrix)`` closure
over their encoded dataset, so clipping and noising stay model-agnostic.

Gradient sums are normalized by the expected lot size L = q * N, never by
the realized lot size; realized-size division would not match the
subsampled-Gaussian analysis behind the accountant. Empty lots execute a
noise-only step and still consume one accounting step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from dpsynth.privacy import (
    DpSgdConfig,
    PrivacyBudget,
    RdpCurve,
    calibrate_noise,
    compose,
    subsampled_gaussian_curve,
    to_epsilon_delta,
)
from dpsynth.rng import child_rng

# grad_fn(flat_params, dataset_indices) -> (losses (B,), gradients (B, P))
GradFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]

CLIP_TOLERANCE = 1e-9  # relative slack when checking norms against C


@dataclass(frozen=True)
class Lot:
    """Poisson-sampled subset of dataset indices for one step."""

    indices: np.ndarray
    expected_size: float

    def __len__(self) -> int:
        return int(self.indices.size)


@dataclass(frozen=True)
class PerExampleGradient:
    """Flat gradient of one example's loss, with its L2 norm cached."""

    vector: np.ndarray
    l2_norm: float

    @classmethod
    def of(cls, vector: np.ndarray) -> "PerExampleGradient":
        return cls(vector=vector, l2_norm=float(np.linalg.norm(vector)))


@dataclass(frozen=True)
class TrainState:
    """Engine-owned snapshot: flat parameters plus accounting position."""

    parameters: np.ndarray
    step: int
    accountant_curve: RdpCurve | None
    rng_seed: int


@dataclass(frozen=True)
class TrainResult:
    parameters: np.ndarray
    realized_budget: PrivacyBudget
    final_state: TrainState
    step_losses: tuple[float | None, ...]  # None marks an empty lot
    config: DpSgdConfig | None = None  # effective config (calibrated sigma filled in)


def poisson_lot(dataset_size: int, sample_rate: float, rng: np.random.Generator) -> Lot:
    """Include each index independently with probability q."""
    if not 0.0 <= sample_rate <= 1.0:
        raise ValueError(f"sample_rate must be in [0, 1], got {sample_rate}")
    mask = rng.random(dataset_size) < sample_rate
    return Lot(indices=np.flatnonzero(mask), expected_size=sample_rate * dataset_size)


def clip_gradient(gradient: PerExampleGradient, clip_norm: float) -> PerExampleGradient:
    """Scale to norm at most C, preserving direction.

    Gradients already within C (up to a tiny relative tolerance) are
    returned unchanged, which makes clipping exactly idempotent.
    """
    if clip_norm <= 0:
        raise ValueError(f"clip_norm must be positive, got {clip_norm}")
    if gradient.l2_norm <= clip_norm * (1.0 + CLIP_TOLERANCE):
        return gradient
    factor = clip_norm / gradient.l2_norm
    return PerExampleGradient.of(gradient.vector * factor)


def privatize_lot(
    clipped: list[PerExampleGradient],
    num_params: int,
    config: DpSgdConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """(sum of clipped gradients + N(0, sigma^2 C^2 I)) / expected lot size.

    With sigma = 0 the noise draw is skipped entirely, so the non-noised
    path is bit-identical to a plain clipped-gradient average.
    """
    for g in clipped:
        if g.l2_norm > config.clip_norm * (1.0 + CLIP_TOLERANCE):
            raise ValueError(
                f"unclipped gradient reached privatize_lot: norm {g.l2_norm} > C {config.clip_norm}"
            )
    if clipped:
        total = np.sum(np.stack([g.vector for g in clipped]), axis=0)
    else:
        total = np.zeros(num_params)
    if config.noise_multiplier > 0.0:
        total = total + rng.normal(
            0.0, config.noise_multiplier * config.clip_norm, size=num_params
        )
    return total / config.expected_lot_size


def dp_sgd_step(
    state: TrainState,
    lot: Lot,
    grad_fn: GradFn,
    config: DpSgdConfig,
    learning_rate: float,
    noise_rng: np.random.Generator,
    step_curve: RdpCurve,
) -> tuple[TrainState, float | None]:
    """One private update; returns the new state and the mean lot loss."""
    if len(lot) > 0:
        losses, grad_matrix = grad_fn(state.parameters, lot.indices)
        clipped = [clip_gradient(PerExampleGradient.of(g), config.clip_norm) for g in grad_matrix]
        mean_loss = float(np.mean(losses))
    else:
        clipped = []
        mean_loss = None
    update = privatize_lot(clipped, state.parameters.size, config, noise_rng)
    new_curve = (
        step_curve
        if state.accountant_curve is None
        else RdpCurve(
            orders=step_curve.orders,
            values=tuple(a + b for a, b in zip(state.accountant_curve.values, step_curve.values)),
        )
    )
    new_state = TrainState(
        parameters=state.parameters - learning_rate * update,
        step=state.step + 1,
        accountant_curve=new_curve,
        rng_seed=state.rng_seed,
    )
    return new_state, mean_loss


def run_dp_loop(
    grad_fn: GradFn,
    initial: np.ndarray,
    dataset_size: int,
    config: DpSgdConfig,
    learning_rate: float,
    seed: int,
    delta: float | None = None,
    log_path: str | Path | None = None,
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> TrainResult:
    """Raw DP-SGD mechanics for config.num_steps steps.

    This runs whatever config it is given and does not itself check that
    (sigma, q, T) achieve any particular budget; `train` does that pairing.
    """
    lot_rng = child_rng(seed, "dpsgd", "lots")
    noise_rng = child_rng(seed, "dpsgd", "noise")
    step_curve = (
        subsampled_gaussian_curve(config.sample_rate, config.noise_multiplier)
        if config.noise_multiplier > 0
        else None
    )
    zero_curve = RdpCurve(orders=(2.0,), values=(0.0,))
    state = TrainState(
        parameters=initial.copy(), step=0, accountant_curve=None, rng_seed=seed
    )
    losses: list[float | None] = []
    with _maybe_log(log_path) as log:
        for _ in range(config.num_steps):
            lot = poisson_lot(dataset_size, config.sample_rate, lot_rng)
            state, mean_loss = dp_sgd_step(
                state, lot, grad_fn, config, learning_rate,
                noise_rng, step_curve if step_curve is not None else zero_curve,
            )
            losses.append(mean_loss)
            if log is not None:
                eps_so_far = (
                    to_epsilon_delta(state.accountant_curve, delta)[0]
                    if (delta is not None and step_curve is not None)
                    else None
                )
                log.write(json.dumps(
                    {"step": state.step, "loss": mean_loss, "epsilon_so_far": eps_so_far}
                ) + "\n")
            if callback is not None:
                callback(state.step, state.parameters)
    realized = _realized_budget(state, delta, private=step_curve is not None)
    return TrainResult(
        parameters=state.parameters,
        realized_budget=realized,
        final_state=state,
        step_losses=tuple(losses),
        config=config,
    )


def _realized_budget(state: TrainState, delta: float | None, private: bool) -> PrivacyBudget:
    if not private or delta is None:
        return PrivacyBudget(epsilon=math.inf, delta=0.0)
    eps, _ = to_epsilon_delta(state.accountant_curve, delta)
    return PrivacyBudget(epsilon=eps, delta=delta)


def _shuffled_batches(
    dataset_size: int, batch_size: int, rng: np.random.Generator
) -> Iterator[np.ndarray]:
    """Endless shuffled minibatch stream, reshuffling every epoch."""
    while True:
        order = rng.permutation(dataset_size)
        for start in range(0, dataset_size, batch_size):
            batch = order[start : start + batch_size]
            if batch.size:
                yield batch


def run_sgd_loop(
    grad_fn: GradFn,
    initial: np.ndarray,
    dataset_size: int,
    batch_size: int,
    num_steps: int,
    learning_rate: float,
    seed: int,
    log_path: str | Path | None = None,
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> TrainResult:
    """Ordinary minibatch SGD with shuffling; no clipping, no noise."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = child_rng(seed, "sgd", "shuffle")
    vector = initial.copy()
    losses: list[float | None] = []
    batches = _shuffled_batches(dataset_size, batch_size, rng)
    with _maybe_log(log_path) as log:
        for step in range(1, num_steps + 1):
            indices = next(batches)
            batch_losses, grad_matrix = grad_fn(vector, indices)
            vector = vector - learning_rate * grad_matrix.mean(axis=0)
            losses.append(float(np.mean(batch_losses)))
            if log is not None:
                log.write(json.dumps(
                    {"step": step, "loss": losses[-1], "epsilon_so_far": None}
                ) + "\n")
            if callback is not None:
                callback(step, vector)
    state = TrainState(parameters=vector, step=num_steps, accountant_curve=None, rng_seed=seed)
    return TrainResult(
        parameters=vector,
        realized_budget=PrivacyBudget(epsilon=math.inf, delta=0.0),
        final_state=state,
        step_losses=tuple(losses),
    )


def trained_sigma(result: TrainResult) -> float:
    """Noise multiplier the run actually used (0 for a non-private run)."""
    return result.config.noise_multiplier if result.config is not None else 0.0


def train(
    grad_fn: GradFn,
    initial: np.ndarray,
    dataset_size: int,
    config: DpSgdConfig,
    budget: PrivacyBudget,
    learning_rate: float,
    seed: int,
    log_path: str | Path | None = None,
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> TrainResult:
    """Train under the given budget; dispatches between DP-SGD and plain SGD.

    Finite epsilon: the noise multiplier is calibrated to meet the budget at
    budget.delta over config.num_steps, then the DP loop runs and the
    accounted (realized) budget is returned. Infinite epsilon: ordinary
    shuffled minibatch SGD, realized budget exactly (inf, 0).
    """
    if not budget.is_private:
        return run_sgd_loop(
            grad_fn, initial, dataset_size,
            batch_size=max(1, round(config.expected_lot_size)),
            num_steps=config.num_steps, learning_rate=learning_rate,
            seed=seed, log_path=log_path, callback=callback,
        )
    sigma = calibrate_noise(budget, config.sample_rate, config.num_steps)
    private_config = replace(config, noise_multiplier=sigma)
    return run_dp_loop(
        grad_fn, initial, dataset_size, private_config, learning_rate,
        seed, delta=budget.delta, log_path=log_path, callback=callback,
    )


class _maybe_log:
    """Context manager yielding an open log file handle, or None."""

    def __init__(self, path: str | Path | None):
        self.path = path
        self.handle = None

    def __enter__(self):
        if self.path is not None:
            self.handle = open(self.path, "w", encoding="utf-8")
        return self.handle

    def __exit__(self, *exc):
        if self.handle is not None:
            self.handle.close()
        return False


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], meta: dict) -> None:
    """Persist a parameter collection plus JSON-serializable metadata."""
    arrays = {f"param:{name}": value for name, value in params.items()}
    arrays["meta_json"] = np.array(json.dumps(meta, sort_keys=True))
    np.savez(path, **arrays)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as archive:
        params = {
            key[len("param:") :]: archive[key] for key in archive.files if key.startswith("param:")
        }
        meta = json.loads(str(archive["meta_json"]))
    return params, meta
