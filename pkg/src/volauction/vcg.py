"""Analytic VCG auction for homogeneous units with volume-discount bids.

Because every schedule's marginal per-unit price is non-increasing, greedy
matching of the highest marginal bids attains the welfare maximum, where
welfare counts unsold units at the seller's reserve value. Payments are
Clarke pivots, so the auction is DSIC and ex-post IR.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    AuctionError,
    AuctionOutcome,
    LotGrid,
    LotSchedule,
    units_per_lot,
)


class InstanceTooLargeError(AuctionError):
    code = "instance-too-large"


@dataclass(frozen=True)
class WelfareResult:
    """Welfare-maximizing allocation and its welfare (bid-measured value of
    allocated units plus reserve value of unsold units)."""

    allocation: np.ndarray
    welfare: float


def _avail_units(requirements: np.ndarray, widths: np.ndarray) -> np.ndarray:
    """Units each consumer can still take from each lot, (n, k)."""
    starts = np.concatenate(([0.0], np.cumsum(widths)[:-1]))
    return np.clip(requirements[:, None] - starts[None, :], 0.0, widths)


def _welfare_value(prices: np.ndarray, allocation: np.ndarray,
                   widths: np.ndarray, total_units: float,
                   reserve_price: float) -> float:
    """Canonical welfare formula shared by the greedy path and the oracle."""
    units = units_per_lot(allocation, widths)  # (n, k)
    value = float((units * prices).sum())
    return value + reserve_price * (total_units - float(allocation.sum()))


def greedy_allocation_array(prices: np.ndarray, requirements: np.ndarray,
                            widths: np.ndarray, total_units: float,
                            reserve_price: float) -> np.ndarray:
    """Greedy unit matching on raw arrays; ties break toward the lowest
    consumer index, then the earliest lot."""
    n, k = prices.shape
    avail = _avail_units(requirements, widths).ravel()
    flat_prices = prices.ravel()
    consumers = np.repeat(np.arange(n), k)
    lots = np.tile(np.arange(k), n)
    # lexsort: last key is primary
    order = np.lexsort((lots, consumers, -flat_prices))
    amounts = np.where(flat_prices[order] >= reserve_price, avail[order], 0.0)
    before = np.concatenate(([0.0], np.cumsum(amounts)[:-1]))
    take = np.clip(total_units - before, 0.0, amounts)
    allocation = np.zeros(n)
    np.add.at(allocation, consumers[order], take)
    return allocation


def _schedules_to_arrays(bids: Sequence[LotSchedule]) -> tuple[np.ndarray, np.ndarray]:
    for i, b in enumerate(bids):
        dem = b.prices_array[np.asarray(b.demanded)]
        if dem.size and np.any(np.diff(dem) > 1e-12):
            raise AuctionError(
                f"bid {i + 1} is not monotone non-increasing; validate bids first"
            )
    prices = np.stack([b.prices_array for b in bids])
    requirements = np.asarray([b.requirement for b in bids], dtype=float)
    return prices, requirements


def efficient_allocation(bids: Sequence[LotSchedule], grid: LotGrid,
                         reserve_price: float) -> WelfareResult:
    """Greedy welfare-maximizing allocation.

    Units go to the highest marginal bids first and only while the marginal
    bid is at least the reserve price.
    """
    prices, requirements = _schedules_to_arrays(bids)
    widths = grid.widths
    allocation = greedy_allocation_array(prices, requirements, widths,
                                         grid.total_units, reserve_price)
    return WelfareResult(
        allocation=allocation,
        welfare=_welfare_value(prices, allocation, widths, grid.total_units,
                               reserve_price),
    )


def welfare_without(prices: np.ndarray, requirements: np.ndarray, i: int,
                    widths: np.ndarray, total_units: float,
                    reserve_price: float) -> float:
    """Efficient welfare with consumer i removed from the market."""
    reqs_wo = requirements.copy()
    reqs_wo[i] = 0.0
    alloc_wo = greedy_allocation_array(prices, reqs_wo, widths,
                                       total_units, reserve_price)
    return _welfare_value(prices, alloc_wo, widths, total_units, reserve_price)


def clarke_payments_array(prices: np.ndarray, requirements: np.ndarray,
                          widths: np.ndarray, total_units: float,
                          reserve_price: float) -> tuple[np.ndarray, np.ndarray]:
    """Allocation plus Clarke-pivot payments, all-array form."""
    n = prices.shape[0]
    allocation = greedy_allocation_array(prices, requirements, widths,
                                         total_units, reserve_price)
    welfare = _welfare_value(prices, allocation, widths, total_units, reserve_price)
    payments = np.zeros(n)
    for i in range(n):
        if allocation[i] <= 0:
            continue
        welfare_wo = welfare_without(prices, requirements, i, widths,
                                     total_units, reserve_price)
        value_i = float(np.dot(units_per_lot(allocation[i], widths), prices[i]))
        payments[i] = welfare_wo - (welfare - value_i)
    return allocation, payments


def vcg_payments(bids: Sequence[LotSchedule], grid: LotGrid,
                 reserve_price: float) -> AuctionOutcome:
    """Clarke-pivot payments on top of the efficient allocation.

    p_i = W_{-i} - (W - value_i), the externality consumer i imposes on the
    rest of the market (including the seller's reserve value).
    """
    prices, requirements = _schedules_to_arrays(bids)
    allocation, payments = clarke_payments_array(
        prices, requirements, grid.widths, grid.total_units, reserve_price
    )
    return AuctionOutcome(allocation=allocation, payments=payments)


def brute_force_welfare(bids: Sequence[LotSchedule], grid: LotGrid,
                        reserve_price: float, max_units: int = 30) -> WelfareResult:
    """Exhaustive welfare oracle over all feasible integer allocations.

    Only for small instances; ties resolve to the lexicographically smallest
    allocation tuple.
    """
    m = grid.total_units
    if m > max_units:
        raise InstanceTooLargeError(f"m={m} exceeds oracle bound {max_units}")
    caps = [int(min(b.requirement, m)) for b in bids]
    if np.prod([c + 1 for c in caps], dtype=float) > 2_000_000:
        raise InstanceTooLargeError("enumeration would exceed 2e6 allocations")
    widths = grid.widths
    prices, _ = _schedules_to_arrays(bids)
    n = len(bids)
    welfare = np.zeros([c + 1 for c in caps])
    total = np.zeros_like(welfare)
    for i, cap in enumerate(caps):
        qs = np.arange(cap + 1, dtype=float)
        table = units_per_lot(qs, widths) @ prices[i]
        shape = [1] * n
        shape[i] = cap + 1
        welfare = welfare + table.reshape(shape)
        total = total + qs.reshape(shape)
    welfare = welfare + reserve_price * (m - total)
    welfare[total > m] = -np.inf
    flat_idx = int(np.argmax(welfare))  # first max in C order = lexicographic
    best = np.asarray(np.unravel_index(flat_idx, welfare.shape), dtype=float)
    return WelfareResult(
        allocation=best,
        welfare=_welfare_value(prices, best, widths, m, reserve_price),
    )


class VcgMechanism:
    """Batched-interface wrapper so the VCG baseline plugs into the same
    evaluation machinery as the learned mechanisms (no gradients)."""

    def __init__(self, grid: LotGrid, reserve_price: float,
                 requirements: Sequence[int]):
        self.grid = grid
        self.reserve_price = reserve_price
        self.requirements = np.asarray(requirements, dtype=float)
        self.widths = grid.widths
        self.total_units = grid.total_units

    def outcomes(self, bids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(allocations, payments) for a (batch, n, k) bid tensor."""
        bids = np.asarray(bids, dtype=float)
        allocs = np.zeros(bids.shape[:2])
        pays = np.zeros(bids.shape[:2])
        for r in range(bids.shape[0]):
            allocs[r], pays[r] = clarke_payments_array(
                bids[r], self.requirements, self.widths, self.total_units,
                self.reserve_price,
            )
        return allocs, pays
