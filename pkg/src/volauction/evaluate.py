"""Monte-Carlo evaluation of auction mechanisms.

Draws truthful valuation profiles from a scenario, runs the mechanism on each,
and reports the seven benchmark metrics (seller utility and revenue, consumer
utility, social and Nash welfare, per-unit regret and envy) with standard
errors. Regret uses test-time misreport ascent with random restarts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AuctionError, units_per_lot
from .nets import FingerprintMismatchError, LearnedMechanism, MechanismParams
from .scenario import ConfigError, Scenario, ScenarioFingerprint, sample_batch
from .training import (
    demanded_mask,
    empirical_regret,
    pin_non_demanded,
    project_misreports,
)
from .vcg import (
    _welfare_value,
    clarke_payments_array,
    greedy_allocation_array,
    welfare_without,
)

METRIC_KEYS = (
    "fc_utility",
    "consumer_utility",
    "social_welfare",
    "nash_social_welfare",
    "fc_revenue",
    "regret",
    "envy",
)
LOWER_BETTER = frozenset({"regret", "envy"})

REPORT_FORMAT = "volauction-report"
REPORT_VERSION = 1

DEFAULT_REGRET_STEPS = 200
DEFAULT_REGRET_RESTARTS = 5
DEFAULT_REGRET_RATE = 0.1

_EVAL_CHUNK = 250


class ReportMismatchError(AuctionError):
    code = "report-mismatch"


@dataclass
class MetricsReport:
    mechanism: str
    fingerprint: ScenarioFingerprint
    samples: int
    seed: int
    regret_steps: int
    regret_restarts: int
    means: dict[str, float]
    stderrs: dict[str, float]
    min_consumer_utility: float

    def to_dict(self) -> dict:
        fp = self.fingerprint
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "mechanism": self.mechanism,
            "fingerprint": {
                "total_units": fp.total_units,
                "consumers": fp.consumers,
                "lot_count": fp.lot_count,
                "reserve_price": fp.reserve_price,
                "value_low": fp.value_low,
                "value_high": fp.value_high,
            },
            "samples": self.samples,
            "seed": self.seed,
            "regret_steps": self.regret_steps,
            "regret_restarts": self.regret_restarts,
            "metrics": {
                key: {"mean": self.means[key], "stderr": self.stderrs[key]}
                for key in METRIC_KEYS
            },
            "min_consumer_utility": self.min_consumer_utility,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        if doc.get("format") != REPORT_FORMAT or doc.get("version") != REPORT_VERSION:
            raise ConfigError(f"unsupported report document {doc.get('format')!r}")
        f = doc["fingerprint"]
        return cls(
            mechanism=doc["mechanism"],
            fingerprint=ScenarioFingerprint(
                total_units=int(f["total_units"]),
                consumers=int(f["consumers"]),
                lot_count=int(f["lot_count"]),
                reserve_price=float(f["reserve_price"]),
                value_low=float(f["value_low"]),
                value_high=float(f["value_high"]),
            ),
            samples=int(doc["samples"]),
            seed=int(doc["seed"]),
            regret_steps=int(doc["regret_steps"]),
            regret_restarts=int(doc["regret_restarts"]),
            means={k: float(doc["metrics"][k]["mean"]) for k in METRIC_KEYS},
            stderrs={k: float(doc["metrics"][k]["stderr"]) for k in METRIC_KEYS},
            min_consumer_utility=float(doc.get("min_consumer_utility", 0.0)),
        )


def _envy_per_sample(valuations: np.ndarray, alloc: np.ndarray, pay: np.ndarray,
                     requirements: np.ndarray, widths: np.ndarray) -> np.ndarray:
    """max_i envy_i per sample; valuations (N, n, k), alloc/pay (N, n)."""
    swap_q = np.minimum(alloc[:, None, :], requirements[None, :, None])  # (N, i, h)
    units = units_per_lot(swap_q, widths)  # (N, i, h, k)
    swap_value = (units * valuations[:, :, None, :]).sum(axis=-1)
    swap_util = swap_value - pay[:, None, :]
    own = np.take_along_axis(
        swap_util, np.arange(alloc.shape[1])[None, :, None], axis=-1
    )[..., 0]
    return (swap_util.max(axis=-1) - own).max(axis=-1)


def _vcg_regret_per_sample(prices: np.ndarray, requirements: np.ndarray,
                           widths: np.ndarray, total_units: float,
                           reserve_price: float, value_high: float,
                           restarts: int, rng: np.random.Generator,
                           u_true: np.ndarray) -> np.ndarray:
    """Best misreport gain per sample against the VCG rules.

    Gradients vanish almost everywhere for the greedy rules, so each restart is
    a single evaluation; the pivot term W_{-i} only involves the others'
    truthful bids and is cached across restarts.
    """
    n_samples, n, _ = prices.shape
    dem = demanded_mask(requirements, widths)
    best_gain = np.zeros((n_samples, n))
    scale = value_high - reserve_price
    for r in range(n_samples):
        sample = prices[r]
        welfare_wo = np.array([
            welfare_without(sample, requirements, i, widths, total_units,
                            reserve_price)
            for i in range(n)
        ])
        for _ in range(restarts):
            noise = rng.uniform(-0.5, 0.5, size=sample.shape) * scale
            mis = project_misreports(sample + noise, dem, reserve_price, value_high)
            for i in range(n):
                candidate = sample.copy()
                candidate[i] = mis[i]
                alloc = greedy_allocation_array(candidate, requirements, widths,
                                                total_units, reserve_price)
                welfare = _welfare_value(candidate, alloc, widths, total_units,
                                         reserve_price)
                value_rep = float(np.dot(units_per_lot(alloc[i], widths),
                                         candidate[i]))
                payment = welfare_wo[i] - (welfare - value_rep)
                value_true = float(np.dot(units_per_lot(alloc[i], widths),
                                          prices[r, i]))
                gain = value_true - payment - u_true[r, i]
                if gain > best_gain[r, i]:
                    best_gain[r, i] = gain
    return best_gain.max(axis=-1)


def evaluate(mechanism, scenario: Scenario, samples: int, seed: int,
             regret_steps: int = DEFAULT_REGRET_STEPS,
             regret_restarts: int = DEFAULT_REGRET_RESTARTS,
             regret_rate: float = DEFAULT_REGRET_RATE) -> MetricsReport:
    """Evaluate "vcg" or trained MechanismParams on `samples` fresh profiles."""
    scenario.validate()
    if samples < 1:
        raise ConfigError("samples must be >= 1")
    fingerprint = scenario.fingerprint()
    if isinstance(mechanism, MechanismParams):
        if mechanism.fingerprint != fingerprint:
            raise FingerprintMismatchError(
                f"weights fingerprint {mechanism.fingerprint} does not match "
                f"scenario {fingerprint}"
            )
        label = "learned"
        learned = LearnedMechanism(mechanism, scenario.requirements)
    elif mechanism == "vcg":
        label = "vcg"
        learned = None
    else:
        raise ConfigError(f"unknown mechanism {mechanism!r}")

    grid = scenario.grid()
    widths = grid.widths
    requirements = np.asarray(scenario.requirements, dtype=float)
    m = float(scenario.total_units)
    reserve = scenario.reserve_price

    seq = np.random.SeedSequence([int(seed), 0xE7A1])
    draw_rng, ascent_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    valuations = sample_batch(scenario, draw_rng, samples)
    valuations = pin_non_demanded(valuations, requirements, widths, reserve)

    if learned is not None:
        allocs = np.zeros((samples, scenario.consumers))
        pays = np.zeros_like(allocs)
        for lo in range(0, samples, _EVAL_CHUNK):
            hi = min(lo + _EVAL_CHUNK, samples)
            allocs[lo:hi], pays[lo:hi] = learned.outcomes(valuations[lo:hi])
    else:
        allocs = np.zeros((samples, scenario.consumers))
        pays = np.zeros_like(allocs)
        for r in range(samples):
            allocs[r], pays[r] = clarke_payments_array(
                valuations[r], requirements, widths, m, reserve
            )

    unit_values = (units_per_lot(allocs, widths) * valuations).sum(axis=-1)
    utils = unit_values - pays  # (N, n)
    revenue = pays.sum(axis=-1)
    u_fc = revenue - reserve * m
    u_c = utils.sum(axis=-1)
    envy = _envy_per_sample(valuations, allocs, pays, requirements, widths) / m

    if learned is not None:
        regret_money = np.zeros(samples)
        for lo in range(0, samples, _EVAL_CHUNK):
            hi = min(lo + _EVAL_CHUNK, samples)
            r, _ = empirical_regret(
                learned, valuations[lo:hi], steps=regret_steps,
                rate=regret_rate, restarts=regret_restarts, rng=ascent_rng,
                value_high=scenario.value_high,
            )
            regret_money[lo:hi] = r.max(axis=-1)
        regret = regret_money / m
    else:
        regret = _vcg_regret_per_sample(
            valuations, requirements, widths, m, reserve, scenario.value_high,
            regret_restarts, ascent_rng, utils,
        ) / m

    per_sample = {
        "fc_utility": u_fc,
        "consumer_utility": u_c,
        "social_welfare": u_fc + u_c,
        "nash_social_welfare": u_fc * u_c,
        "fc_revenue": revenue,
        "regret": regret,
        "envy": envy,
    }
    means = {k: float(v.mean()) for k, v in per_sample.items()}
    stderrs = {
        k: float(v.std(ddof=1) / np.sqrt(samples)) if samples > 1 else 0.0
        for k, v in per_sample.items()
    }
    return MetricsReport(
        mechanism=label,
        fingerprint=fingerprint,
        samples=samples,
        seed=int(seed),
        regret_steps=regret_steps,
        regret_restarts=regret_restarts,
        means=means,
        stderrs=stderrs,
        min_consumer_utility=float(utils.min()),
    )


@dataclass
class Comparison:
    """Side-by-side metric table over mechanisms sharing one evaluation setup."""

    reports: list[MetricsReport]
    best: dict[str, list[str]]

    def to_dict(self) -> dict:
        return {
            "format": "volauction-comparison",
            "version": 1,
            "rows": [r.to_dict() for r in self.reports],
            "best": self.best,
        }

    def to_text(self) -> str:
        headers = ["mechanism", *METRIC_KEYS]
        rows = []
        for r in self.reports:
            cells = [r.mechanism]
            for key in METRIC_KEYS:
                mark = "*" if r.mechanism in self.best[key] else " "
                cells.append(f"{r.means[key]:.4f}{mark}")
            rows.append(cells)
        widths = [max(len(h), *(len(row[i]) for row in rows))
                  for i, h in enumerate(headers)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
        lines.append("  ".join("-" * w for w in widths))
        for row in rows:
            lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
        lines.append("(* = best per column; lower is better for regret and envy)")
        return "\n".join(lines) + "\n"


def compare(reports: list[MetricsReport]) -> Comparison:
    """Tabulate reports; they must share scenario, sample count and seed."""
    if not reports:
        raise ConfigError("no reports to compare")
    first = reports[0]
    for r in reports[1:]:
        if r.fingerprint != first.fingerprint:
            raise ReportMismatchError("reports come from different scenarios")
        if (r.samples, r.seed) != (first.samples, first.seed):
            raise ReportMismatchError("reports use different samples/seed")
    names = [r.mechanism for r in reports]
    if len(set(names)) != len(names):
        names = [f"{r.mechanism}#{i}" for i, r in enumerate(reports)]
        for r, name in zip(reports, names):
            r.mechanism = name
    best: dict[str, list[str]] = {}
    for key in METRIC_KEYS:
        values = np.array([r.means[key] for r in reports])
        target = values.min() if key in LOWER_BETTER else values.max()
        best[key] = [r.mechanism for r, v in zip(reports, values)
                     if abs(v - target) <= 1e-12]
    return Comparison(reports=list(reports), best=best)
