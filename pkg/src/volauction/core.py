"""Domain model for volume-discount forward auctions.

A seller offers m homogeneous units split into k equal lots (the last lot
absorbs the remainder). Buyers submit per-lot, per-unit price schedules that
are monotone non-increasing, together with a maximum quantity they will
accept. Everything in here is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# Comparison tolerance for money amounts in tests and assertions.
MONEY_ATOL = 1e-9


class AuctionError(Exception):
    """Base error; `code` is a stable machine-readable identifier."""

    code = "auction-error"


class InvalidGridError(AuctionError):
    code = "invalid-grid"


class UnitOutOfRangeError(AuctionError):
    code = "unit-out-of-range"


class InvalidQuantityError(AuctionError):
    code = "invalid-quantity"


class DemandExceededError(AuctionError):
    code = "demand-exceeded"


class BidValidationError(AuctionError):
    """A bid failed validation; `lot` is the offending 1-based lot, if any."""

    code = "invalid-bid"

    def __init__(self, message: str, lot: int | None = None):
        super().__init__(message)
        self.lot = lot


class NonMonotoneError(BidValidationError):
    code = "non-monotone"


class BelowReserveError(BidValidationError):
    code = "below-reserve"


class MisalignedRequirementError(BidValidationError):
    code = "misaligned-requirement"


class ThresholdAlignmentError(AuctionError):
    code = "threshold-misaligned"


@dataclass(frozen=True)
class LotGrid:
    """Partition of `total_units` into `lot_count` lots of `lot_size` units.

    Lot j (1-based, j < lot_count) covers units [(j-1)*lot_size + 1, j*lot_size];
    the last lot additionally absorbs the total_units - lot_count*lot_size
    remainder units.
    """

    total_units: int
    lot_count: int
    lot_size: int

    @property
    def widths(self) -> np.ndarray:
        """Units per lot, shape (lot_count,); only the last entry can differ."""
        w = np.full(self.lot_count, self.lot_size, dtype=float)
        w[-1] = self.total_units - (self.lot_count - 1) * self.lot_size
        return w

    @property
    def unit_starts(self) -> np.ndarray:
        """Units preceding each lot, shape (lot_count,), float."""
        return np.arange(self.lot_count, dtype=float) * self.lot_size

    @property
    def boundaries(self) -> np.ndarray:
        """Cumulative unit count at the end of each lot (last entry = m)."""
        b = np.cumsum(self.widths)
        return b


def make_lot_grid(total_units: int, lot_count: int) -> LotGrid:
    """Build a grid of `lot_count` equal lots; the last absorbs the remainder."""
    if lot_count < 1 or lot_count > total_units:
        raise InvalidGridError(
            f"lot_count must be in [1, total_units]; got k={lot_count}, m={total_units}"
        )
    return LotGrid(total_units=int(total_units), lot_count=int(lot_count),
                   lot_size=total_units // lot_count)


def lot_of_unit(unit: int, grid: LotGrid) -> int:
    """1-based lot index of `unit`; remainder units price at the last lot."""
    if unit < 1 or unit > grid.total_units:
        raise UnitOutOfRangeError(
            f"unit {unit} outside [1, {grid.total_units}]"
        )
    return min(math.ceil(unit / grid.lot_size), grid.lot_count)


@dataclass(frozen=True)
class LotSchedule:
    """Per-lot per-unit prices plus a maximum-quantity requirement.

    `demanded[j]` is False for lots lying entirely beyond the requirement;
    their `prices` entries are normalized to 0.0 and never enter arithmetic.
    Used both for bids and for private valuations.
    """

    prices: tuple[float, ...]
    requirement: int
    demanded: tuple[bool, ...]

    @property
    def prices_array(self) -> np.ndarray:
        return np.asarray(self.prices, dtype=float)


# The bid and valuation languages share one representation.
BidSchedule = LotSchedule
ValuationSchedule = LotSchedule


def make_schedule(prices: Sequence[float], requirement: int, grid: LotGrid) -> LotSchedule:
    """Normalize raw prices into a LotSchedule on `grid`.

    `prices` may cover all lots or just the demanded prefix; entries beyond
    the requirement are discarded. The requirement must lie in [0, m].
    """
    if requirement < 0 or requirement > grid.total_units:
        raise InvalidQuantityError(
            f"requirement {requirement} outside [0, {grid.total_units}]"
        )
    starts = grid.unit_starts  # units before each lot
    demanded = tuple(bool(s + 1 <= requirement) for s in starts)
    n_dem = sum(demanded)
    if len(prices) not in (grid.lot_count, n_dem):
        raise InvalidQuantityError(
            f"expected {grid.lot_count} prices (or the {n_dem} demanded ones); got {len(prices)}"
        )
    full = [0.0] * grid.lot_count
    for j, p in enumerate(prices):
        if j < n_dem:
            full[j] = float(p)
    return LotSchedule(prices=tuple(full), requirement=int(requirement), demanded=demanded)


def units_per_lot(quantity, widths: np.ndarray) -> np.ndarray:
    """Units a quantity takes from each lot; broadcasts over leading axes.

    quantity: array-like (...,); widths: (k,). Returns (..., k).
    """
    q = np.asarray(quantity, dtype=float)
    starts = np.concatenate(([0.0], np.cumsum(widths)[:-1]))
    return np.clip(q[..., None] - starts, 0.0, widths)


def marginal_lot_price(quantity, prices: np.ndarray, widths: np.ndarray) -> np.ndarray:
    """Right derivative of schedule value at `quantity` (0 beyond the grid)."""
    q = np.asarray(quantity, dtype=float)
    bounds = np.cumsum(widths)
    idx = np.searchsorted(bounds, q, side="right")
    inside = idx < len(widths)
    padded = np.concatenate((np.asarray(prices, dtype=float), [0.0]))
    return np.where(inside, padded[np.minimum(idx, len(widths) - 1)], 0.0)


def schedule_value(schedule: LotSchedule, quantity: float, grid: LotGrid) -> float:
    """Total money value of `quantity` units under the schedule.

    Piecewise linear and concave in the quantity; fractional units are valued
    pro rata at their lot's per-unit price.
    """
    if quantity < 0:
        raise InvalidQuantityError(f"quantity {quantity} is negative")
    if quantity > schedule.requirement:
        raise DemandExceededError(
            f"quantity {quantity} exceeds requirement {schedule.requirement}"
        )
    units = units_per_lot(quantity, grid.widths)
    return float(np.dot(units, schedule.prices_array))


def consumer_utility(valuation: LotSchedule, allocation: float, payment: float,
                     grid: LotGrid) -> float:
    """Quasi-linear utility: value of the allocated units minus the payment."""
    return schedule_value(valuation, allocation, grid) - payment


def fc_utility(payments, reserve_price: float, total_units: int) -> float:
    """Seller utility: revenue minus the reserve value of the whole supply."""
    return float(np.sum(payments)) - reserve_price * total_units


def fc_revenue(payments) -> float:
    """Seller revenue: total payments collected."""
    return float(np.sum(payments))


def nash_social_welfare(u_fc: float, consumer_utils) -> float:
    """Product of seller utility and summed consumer utility (no square root)."""
    return float(u_fc) * float(np.sum(consumer_utils))


@dataclass
class AuctionOutcome:
    """Allocation (units) and payment (money) per consumer."""

    allocation: np.ndarray
    payments: np.ndarray

    def __post_init__(self):
        self.allocation = np.asarray(self.allocation, dtype=float)
        self.payments = np.asarray(self.payments, dtype=float)


def envy_profile(valuations: Sequence[LotSchedule], outcome: AuctionOutcome,
                 grid: LotGrid) -> np.ndarray:
    """Per-consumer envy: best utility gain from taking another consumer's
    allocation and payment, capped at the envier's own requirement.

    Entries are always >= 0 because the own bundle is among the candidates.
    """
    n = len(valuations)
    alloc = outcome.allocation
    pay = outcome.payments
    envy = np.zeros(n)
    for i, v in enumerate(valuations):
        swap_q = np.minimum(alloc, v.requirement)
        units = units_per_lot(swap_q, grid.widths)  # (n, k)
        swap_values = units @ v.prices_array
        own = swap_values[i] - pay[i]
        envy[i] = float(np.max(swap_values - pay) - own)
    return envy


def validate_bid(bid: LotSchedule, reserve_price: float, grid: LotGrid) -> LotSchedule:
    """Accept a bid iff demanded prices are monotone non-increasing, at or
    above the reserve, and the requirement is grid-aligned."""
    k = grid.lot_count
    if len(bid.prices) != k or len(bid.demanded) != k:
        raise BidValidationError(f"schedule has {len(bid.prices)} lots; grid has {k}")
    req = bid.requirement
    if req != grid.total_units and req % grid.lot_size != 0:
        raise MisalignedRequirementError(
            f"requirement {req} is neither a multiple of {grid.lot_size} nor {grid.total_units}"
        )
    prev = None
    for j in range(k):
        if not bid.demanded[j]:
            break
        p = bid.prices[j]
        if p < reserve_price:
            raise BelowReserveError(
                f"lot {j + 1} price {p} below reserve {reserve_price}", lot=j + 1
            )
        if prev is not None and p > prev:
            raise NonMonotoneError(
                f"lot {j + 1} price {p} exceeds lot {j} price {prev}", lot=j + 1
            )
        prev = p
    return bid


@dataclass(frozen=True)
class FlatDiscountBid:
    """Retroactive flat discount: `price_below` per unit for quantities up to
    `threshold`, `price_at_or_above` per unit for the whole purchase beyond it."""

    threshold: int
    price_below: float
    price_at_or_above: float

    def value(self, quantity: float) -> float:
        if quantity <= self.threshold:
            return self.price_below * quantity
        return self.price_at_or_above * quantity


@dataclass(frozen=True)
class FlatConversion:
    """Converted schedule plus the exact loss of the conversion."""

    schedule: LotSchedule
    max_discrepancy: float
    worst_quantity: int


def convert_flat_to_lot(flat: FlatDiscountBid, grid: LotGrid,
                        reserve_price: float | None = None) -> FlatConversion:
    """Convert a retroactive flat-discount bid into a lot schedule.

    The lot schedule keeps `price_below` through the threshold and a constant
    fill price on the remaining lots chosen so the cumulative value matches the
    flat bid exactly at q = m. Retroactive discounts cannot be matched at every
    interior quantity in the marginal lot language, so the maximum discrepancy
    over integer quantities is reported. With `reserve_price` given, the fill
    price is floored there so the result always validates.
    """
    m = grid.total_units
    t = flat.threshold
    if t != 0 and t not in set(int(b) for b in grid.boundaries):
        raise ThresholdAlignmentError(
            f"threshold {t} does not align with a lot boundary of {grid.lot_count} lots"
        )
    prices = []
    if t >= m:
        prices = [flat.price_below] * grid.lot_count
    else:
        fill = (flat.price_at_or_above * m - flat.price_below * t) / (m - t)
        if t > 0:
            fill = min(fill, flat.price_below)  # keep the schedule monotone
        if reserve_price is not None:
            fill = max(fill, reserve_price)
        for end in grid.boundaries:
            prices.append(flat.price_below if end <= t else fill)
    schedule = make_schedule(prices, m, grid)
    qs = np.arange(m + 1, dtype=float)
    lot_values = units_per_lot(qs, grid.widths) @ schedule.prices_array
    flat_values = np.where(qs <= t, flat.price_below * qs, flat.price_at_or_above * qs)
    gaps = np.abs(lot_values - flat_values)
    worst = int(np.argmax(gaps))
    return FlatConversion(schedule=schedule, max_discrepancy=float(gaps[worst]),
                          worst_quantity=worst)
