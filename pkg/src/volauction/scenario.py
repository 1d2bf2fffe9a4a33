"""Experiment scenarios: valuation distributions, discount archetypes,
business constraints, and their (de)serialization.

A scenario pins everything a run needs: the lot grid, the reserve price, the
per-consumer discount profile applied to an i.i.d. uniform base price, the
requirements, and the seed discipline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import (
    AuctionError,
    LotGrid,
    ValuationSchedule,
    make_lot_grid,
    make_schedule,
)

SCENARIO_FORMAT = "volauction-scenario"
SCENARIO_VERSION = 1


class ConfigError(AuctionError):
    code = "config"


@dataclass(frozen=True)
class ScenarioFingerprint:
    """Identity of a scenario as seen by a trained mechanism."""

    total_units: int
    consumers: int
    lot_count: int
    reserve_price: float
    value_low: float
    value_high: float

    @property
    def distribution(self) -> str:
        return f"uniform[{self.value_low},{self.value_high}]"


@dataclass(frozen=True)
class DiscountBand:
    """Discount `fraction` off the base price on units [start, end] (1-based)."""

    start: int
    end: int
    fraction: float


@dataclass(frozen=True)
class BusinessConstraint:
    """Allocation-shape rule enforced during training via a penalty.

    kinds: min-winners-with-floor (count, quantity_floor), max-winner-share
    (share_cap), max-winners (count).
    """

    kind: str
    count: int = 0
    quantity_floor: float = 0.0
    share_cap: float = 0.0

    KINDS = ("min-winners-with-floor", "max-winner-share", "max-winners")


@dataclass(frozen=True)
class Scenario:
    total_units: int
    consumers: int
    lot_count: int
    reserve_price: float
    value_low: float
    value_high: float
    archetypes: tuple[tuple[DiscountBand, ...], ...]
    requirements: tuple[int, ...]
    business_constraints: tuple[BusinessConstraint, ...] = ()
    seed: int = 0

    def grid(self) -> LotGrid:
        return make_lot_grid(self.total_units, self.lot_count)

    def fingerprint(self) -> ScenarioFingerprint:
        return ScenarioFingerprint(
            total_units=self.total_units,
            consumers=self.consumers,
            lot_count=self.lot_count,
            reserve_price=self.reserve_price,
            value_low=self.value_low,
            value_high=self.value_high,
        )

    def lot_discounts(self) -> np.ndarray:
        """Per-consumer per-lot discount fractions, shape (n, k)."""
        grid = self.grid()
        ends = grid.boundaries  # unit index ending each lot
        disc = np.zeros((self.consumers, self.lot_count))
        for i, bands in enumerate(self.archetypes):
            for band in bands:
                covered = (ends >= band.start) & (ends <= band.end)
                disc[i, covered] = band.fraction
        return disc

    def validate(self) -> "Scenario":
        if self.reserve_price <= 0:
            raise ConfigError("reserve price must be positive")
        if self.value_low < self.reserve_price:
            raise ConfigError("valuation lower bound must not undercut the reserve")
        if self.value_low >= self.value_high:
            raise ConfigError("valuation bounds must satisfy low < high")
        if len(self.archetypes) != self.consumers or len(self.requirements) != self.consumers:
            raise ConfigError("archetypes and requirements must cover every consumer")
        grid = self.grid()
        for i, bands in enumerate(self.archetypes):
            expected_start = 1
            last_fraction = -1.0
            for band in bands:
                if band.start != expected_start:
                    raise ConfigError(
                        f"consumer {i + 1}: band starting at {band.start} leaves a gap/overlap"
                    )
                if not 0.0 <= band.fraction < 1.0:
                    raise ConfigError(
                        f"consumer {i + 1}: discount fraction {band.fraction} outside [0, 1)"
                    )
                if self.value_low * (1.0 - band.fraction) < self.reserve_price:
                    raise ConfigError(
                        f"consumer {i + 1}: discount {band.fraction} can push sampled "
                        f"prices below the reserve"
                    )
                if band.fraction < last_fraction:
                    raise ConfigError(
                        f"consumer {i + 1}: discount fractions must be non-decreasing"
                    )
                if band.end != self.total_units and band.end % grid.lot_size != 0:
                    raise ConfigError(
                        f"consumer {i + 1}: band end {band.end} not on a lot boundary"
                    )
                expected_start = band.end + 1
                last_fraction = band.fraction
            if expected_start != self.total_units + 1:
                raise ConfigError(f"consumer {i + 1}: bands do not tile [1, m]")
        for i, req in enumerate(self.requirements):
            if req != self.total_units and req % grid.lot_size != 0:
                raise ConfigError(f"consumer {i + 1}: requirement {req} not grid-aligned")
        return self


def default_scenario(seed: int = 0) -> Scenario:
    """Desk-scale benchmark: 1000 units, 5 consumers, uniform base prices in
    [3.5, 4.5], reserve 3, five discount archetypes from flat to four-step."""

    def bands(*triples):
        return tuple(DiscountBand(s, e, f) for s, e, f in triples)

    archetypes = (
        bands((1, 1000, 0.0)),
        bands((1, 500, 0.0), (501, 1000, 0.05)),
        bands((1, 300, 0.0), (301, 600, 0.03), (601, 1000, 0.06)),
        bands((1, 250, 0.0), (251, 500, 0.02), (501, 750, 0.04), (751, 1000, 0.06)),
        bands((1, 200, 0.0), (201, 400, 0.02), (401, 600, 0.04), (601, 800, 0.06),
              (801, 1000, 0.08)),
    )
    return Scenario(
        total_units=1000,
        consumers=5,
        lot_count=20,
        reserve_price=3.0,
        value_low=3.5,
        value_high=4.5,
        archetypes=archetypes,
        requirements=(1000,) * 5,
        business_constraints=(
            BusinessConstraint(kind="min-winners-with-floor", count=3, quantity_floor=200.0),
        ),
        seed=seed,
    ).validate()


def sample_base_prices(scenario: Scenario, rng: np.random.Generator, batch: int) -> np.ndarray:
    return rng.uniform(scenario.value_low, scenario.value_high,
                       size=(batch, scenario.consumers))


def sample_batch(scenario: Scenario, rng: np.random.Generator, batch: int) -> np.ndarray:
    """Valuation tensors (batch, n, k): archetype discounts applied to an
    i.i.d. uniform base price per consumer."""
    base = sample_base_prices(scenario, rng, batch)
    return base[..., None] * (1.0 - scenario.lot_discounts())


def sample_profile(scenario: Scenario, rng: np.random.Generator) -> list[ValuationSchedule]:
    """One profile of private valuation schedules."""
    grid = scenario.grid()
    prices = sample_batch(scenario, rng, 1)[0]
    return [
        make_schedule(prices[i], scenario.requirements[i], grid)
        for i in range(scenario.consumers)
    ]


def _scenario_dict(scenario: Scenario) -> dict:
    return {
        "format": SCENARIO_FORMAT,
        "version": SCENARIO_VERSION,
        "total_units": scenario.total_units,
        "consumers": scenario.consumers,
        "lot_count": scenario.lot_count,
        "reserve_price": scenario.reserve_price,
        "valuation": {
            "distribution": "uniform",
            "low": scenario.value_low,
            "high": scenario.value_high,
        },
        "archetypes": [
            [[b.start, b.end, b.fraction] for b in bands]
            for bands in scenario.archetypes
        ],
        "requirements": list(scenario.requirements),
        "business_constraints": [
            {
                "kind": c.kind,
                "count": c.count,
                "quantity_floor": c.quantity_floor,
                "share_cap": c.share_cap,
            }
            for c in scenario.business_constraints
        ],
        "seed": scenario.seed,
    }


def scenario_to_text(scenario: Scenario) -> str:
    """Canonical serialized form; byte-stable across round-trips."""
    return json.dumps(_scenario_dict(scenario), sort_keys=True,
                      separators=(",", ":")) + "\n"


def scenario_from_text(text: str) -> Scenario:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario file is not valid JSON: {exc}") from exc
    if doc.get("format") != SCENARIO_FORMAT:
        raise ConfigError(f"unexpected scenario format {doc.get('format')!r}")
    if doc.get("version") != SCENARIO_VERSION:
        raise ConfigError(f"unsupported scenario version {doc.get('version')!r}")
    val = doc["valuation"]
    if val.get("distribution") != "uniform":
        raise ConfigError(f"unsupported distribution {val.get('distribution')!r}")
    return Scenario(
        total_units=int(doc["total_units"]),
        consumers=int(doc["consumers"]),
        lot_count=int(doc["lot_count"]),
        reserve_price=float(doc["reserve_price"]),
        value_low=float(val["low"]),
        value_high=float(val["high"]),
        archetypes=tuple(
            tuple(DiscountBand(int(s), int(e), float(f)) for s, e, f in bands)
            for bands in doc["archetypes"]
        ),
        requirements=tuple(int(r) for r in doc["requirements"]),
        business_constraints=tuple(
            BusinessConstraint(
                kind=c["kind"],
                count=int(c.get("count", 0)),
                quantity_floor=float(c.get("quantity_floor", 0.0)),
                share_cap=float(c.get("share_cap", 0.0)),
            )
            for c in doc.get("business_constraints", [])
        ),
        seed=int(doc.get("seed", 0)),
    ).validate()
