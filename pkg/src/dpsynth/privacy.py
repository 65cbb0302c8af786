"""Privacy accounting for DP-SGD training and dataset author auditing.

Renyi differential privacy (RDP) of the subsampled Gaussian mechanism,
linear composition over steps, conversion to (epsilon, delta), noise
calibration by bisection, group-privacy degradation for authors with
multiple records, and the audit that detects such authors.

All accounting uses integer RDP orders (default 2..64 plus 128, 256, 512)
and evaluates binomial sums in log-space so large orders do not overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 65)) + (128, 256, 512)


class UnsatisfiableBudgetError(ValueError):
    """No noise multiplier in the search range meets the target budget."""


@dataclass(frozen=True)
class PrivacyBudget:
    """An (epsilon, delta) differential privacy guarantee.

    ``epsilon = math.inf`` marks the non-private mode: downstream training
    skips clipping and noising entirely. ``delta = 1.0`` is vacuous and only
    arises from group-privacy clipping.
    """

    epsilon: float
    delta: float
    annotation: str | None = None

    def __post_init__(self) -> None:
        if math.isnan(self.epsilon) or self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0 or inf, got {self.epsilon}")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must be in [0, 1], got {self.delta}")

    @property
    def is_private(self) -> bool:
        return math.isfinite(self.epsilon)


@dataclass(frozen=True)
class RdpCurve:
    """Per-order RDP guarantees epsilon(alpha) on an ascending grid of orders."""

    orders: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.orders) == 0:
            raise ValueError("curve must have at least one order")
        if len(self.orders) != len(self.values):
            raise ValueError("orders and values must have equal length")
        if any(a <= 1 for a in self.orders):
            raise ValueError("all orders must exceed 1")
        if any(b <= a for a, b in zip(self.orders, self.orders[1:])):
            raise ValueError("orders must be strictly ascending")
        if any(v < 0 for v in self.values):
            raise ValueError("RDP values must be non-negative")


@dataclass(frozen=True)
class DpSgdConfig:
    """Noise and sampling parameters for one DP-SGD training run.

    ``expected_lot_size`` is q*N; gradient sums are normalized by this
    constant rather than by the realized lot size, which varies per step
    under Poisson sampling. ``noise_multiplier = 0`` is only meaningful in
    the non-private mode (epsilon = inf).
    """

    clip_norm: float
    noise_multiplier: float
    sample_rate: float
    num_steps: int
    expected_lot_size: float

    def __post_init__(self) -> None:
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.noise_multiplier < 0:
            raise ValueError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
        if not 0.0 <= self.sample_rate <= 1.0:
            raise ValueError(f"sample_rate must be in [0, 1], got {self.sample_rate}")
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.expected_lot_size <= 0:
            raise ValueError(f"expected_lot_size must be positive, got {self.expected_lot_size}")


@dataclass(frozen=True)
class AuditReport:
    """Outcome of counting records per author in a training set.

    When any record lacks an author id the correspondence between records
    and persons cannot be verified; ``k_max`` then stays at its lower bound
    1 and ``authors_known`` is false. Offending authors are still listed for
    the ids that are present.
    """

    k_max: int
    authors_known: bool
    offending_authors: tuple[tuple[str, int], ...] = field(default=())

    def __post_init__(self) -> None:
        if self.k_max < 1:
            raise ValueError(f"k_max must be >= 1, got {self.k_max}")
        if self.authors_known and (self.k_max == 1) != (len(self.offending_authors) == 0):
            raise ValueError("k_max = 1 requires an empty offending list and vice versa")


def rdp_gaussian(order: float, noise_multiplier: float) -> float:
    """RDP of the Gaussian mechanism: epsilon(alpha) = alpha / (2 sigma^2)."""
    if order <= 1:
        raise ValueError(f"order must exceed 1, got {order}")
    if noise_multiplier <= 0:
        raise ValueError(f"noise_multiplier must be positive, got {noise_multiplier}")
    return order / (2.0 * noise_multiplier**2)


def _as_integer_order(order: float) -> int:
    if isinstance(order, float) and not order.is_integer():
        raise ValueError(f"subsampled accounting requires integer orders, got {order}")
    order = int(order)
    if order < 2:
        raise ValueError(f"order must be an integer >= 2, got {order}")
    return order


def rdp_subsampled_gaussian(order: float, sample_rate: float, noise_multiplier: float) -> float:
    """RDP of the Poisson-subsampled Gaussian mechanism at one integer order.

    epsilon(alpha) = log( sum_{k=0}^{alpha} C(alpha,k) (1-q)^(alpha-k) q^k
                          exp((k^2 - k) / (2 sigma^2)) ) / (alpha - 1)

    evaluated with a log-sum-exp over the binomial terms.
    """
    alpha = _as_integer_order(order)
    if not 0.0 <= sample_rate <= 1.0:
        raise ValueError(f"sample_rate must be in [0, 1], got {sample_rate}")
    if noise_multiplier <= 0:
        raise ValueError(f"noise_multiplier must be positive, got {noise_multiplier}")
    if sample_rate == 0.0:
        return 0.0
    if sample_rate == 1.0:
        return rdp_gaussian(alpha, noise_multiplier)
    k = np.arange(alpha + 1, dtype=np.float64)
    log_binom = gammaln(alpha + 1) - gammaln(k + 1) - gammaln(alpha - k + 1)
    log_terms = (
        log_binom
        + (alpha - k) * math.log1p(-sample_rate)
        + k * math.log(sample_rate)
        + (k * k - k) / (2.0 * noise_multiplier**2)
    )
    # The sum is >= 1 (Jensen on exp of a non-negative exponent), so the
    # log is non-negative; clamp defends against rounding just below zero.
    return max(0.0, float(logsumexp(log_terms)) / (alpha - 1))


def subsampled_gaussian_curve(
    sample_rate: float,
    noise_multiplier: float,
    orders: Sequence[float] = DEFAULT_ORDERS,
) -> RdpCurve:
    """Per-step RDP curve of one Poisson-subsampled Gaussian release."""
    values = tuple(rdp_subsampled_gaussian(a, sample_rate, noise_multiplier) for a in orders)
    return RdpCurve(orders=tuple(float(a) for a in orders), values=values)


def compose(curve: RdpCurve, num_steps: int) -> RdpCurve:
    """RDP of ``num_steps`` adaptive releases: values scale linearly."""
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    return RdpCurve(orders=curve.orders, values=tuple(v * num_steps for v in curve.values))


def to_epsilon_delta(curve: RdpCurve, delta: float) -> tuple[float, float]:
    """Convert an RDP curve to an (epsilon, delta) guarantee.

    epsilon = min over orders alpha of [epsilon(alpha) + log(1/delta)/(alpha-1)].
    Returns the epsilon and the minimizing order (first on ties).
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    log_inv_delta = -math.log(delta)
    candidates = [v + log_inv_delta / (a - 1) for a, v in zip(curve.orders, curve.values)]
    best = int(np.argmin(candidates))
    return candidates[best], curve.orders[best]


def dp_sgd_epsilon(
    sample_rate: float,
    noise_multiplier: float,
    num_steps: int,
    delta: float,
    orders: Sequence[float] = DEFAULT_ORDERS,
) -> tuple[float, float]:
    """Accounted (epsilon, best_order) for a full DP-SGD run."""
    curve = compose(subsampled_gaussian_curve(sample_rate, noise_multiplier, orders), num_steps)
    return to_epsilon_delta(curve, delta)


def calibrate_noise(
    target: PrivacyBudget,
    sample_rate: float,
    num_steps: int,
    orders: Sequence[float] = DEFAULT_ORDERS,
    sigma_range: tuple[float, float] = (0.3, 256.0),
    tolerance: float = 1e-3,
) -> float:
    """Smallest noise multiplier whose accounted epsilon meets the target.

    Bisects on sigma; the satisfying set is an upper ray, so the search
    keeps the high side feasible and returns it once the bracket is
    narrower than ``tolerance``.
    """
    if not target.is_private or target.epsilon <= 0:
        raise ValueError("calibration target must have finite positive epsilon")
    if not 0.0 < sample_rate <= 1.0:
        raise ValueError(f"sample_rate must be in (0, 1], got {sample_rate}")
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")

    def accounted(sigma: float) -> float:
        return dp_sgd_epsilon(sample_rate, sigma, num_steps, target.delta, orders)[0]

    lo, hi = sigma_range
    if accounted(hi) > target.epsilon:
        raise UnsatisfiableBudgetError(
            f"epsilon={target.epsilon} unreachable: even sigma={hi} gives "
            f"epsilon={accounted(hi):.6g} at delta={target.delta}"
        )
    if accounted(lo) <= target.epsilon:
        return lo
    while hi - lo > tolerance:
        mid = 0.5 * (lo + hi)
        if accounted(mid) <= target.epsilon:
            hi = mid
        else:
            lo = mid
    return hi


def default_delta(num_training_samples: int) -> float:
    """Privacy failure probability 1 / (10 n), one tenth of one record."""
    if num_training_samples < 1:
        raise ValueError(f"need at least one training sample, got {num_training_samples}")
    return 1.0 / (10.0 * num_training_samples)


def group_privacy(budget: PrivacyBudget, group_size: int) -> PrivacyBudget:
    """Degrade a record-level guarantee to groups of ``group_size`` records.

    (epsilon, delta) becomes (k epsilon, k exp((k-1) epsilon) delta), with
    delta clipped at 1 where the bound goes vacuous. The non-private budget
    maps to itself.
    """
    if group_size < 1:
        raise ValueError(f"group_size must be >= 1, got {group_size}")
    if not budget.is_private:
        return budget
    k = group_size
    if budget.delta == 0.0:
        new_delta = 0.0
    else:
        try:
            factor = k * math.exp((k - 1) * budget.epsilon)
        except OverflowError:
            factor = math.inf
        new_delta = min(1.0, factor * budget.delta)
    return replace(budget, epsilon=k * budget.epsilon, delta=new_delta)


def audit_author_contributions(records: Iterable[Any]) -> AuditReport:
    """Count records per author; a missing id makes the audit unverifiable.

    Each record exposes an ``author_id`` attribute (string or None). Authors
    with more than one record are listed with their counts. When any record
    has no author id, k_max stays at the lower bound 1 and authors_known is
    false; the caller must not treat anonymous records as unique persons.
    """
    counts: dict[str, int] = {}
    any_missing = False
    for record in records:
        author = getattr(record, "author_id", None)
        if author is None:
            any_missing = True
        else:
            counts[author] = counts.get(author, 0) + 1
    offending = tuple(sorted((a, c) for a, c in counts.items() if c > 1))
    if any_missing:
        return AuditReport(k_max=1, authors_known=False, offending_authors=offending)
    k_max = max(counts.values(), default=1)
    return AuditReport(k_max=k_max, authors_known=True, offending_authors=offending)


def effective_budget(claimed: PrivacyBudget, report: AuditReport) -> PrivacyBudget:
    """Budget actually enjoyed by persons, given the audited k_max."""
    result = group_privacy(claimed, report.k_max)
    if not report.authors_known:
        result = replace(
            result,
            annotation="not verifiable: records without author ids; k_max is a lower bound",
        )
    return result


def audit_document(budget: PrivacyBudget, report: AuditReport) -> dict[str, Any]:
    """JSON-ready audit summary; infinite epsilon serializes as the string "inf"."""
    doc: dict[str, Any] = {
        "epsilon": budget.epsilon if math.isfinite(budget.epsilon) else "inf",
        "delta": budget.delta,
        "k_max": report.k_max,
        "authors_known": report.authors_known,
        "offending_authors": [[author, count] for author, count in report.offending_authors],
    }
    if budget.annotation is not None:
        doc["annotation"] = budget.annotation
    return doc
