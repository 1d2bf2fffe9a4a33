"""Training loop for the learned auction variants.

Each outer step samples a batch of valuation profiles, estimates per-consumer
regret by gradient ascent over misreports (opponents truthful), assembles the
variant's loss with quadratic penalties and Lagrange multipliers, takes one
Adam step on the weights, then one projected-ascent step on the multipliers
(method of differential multipliers).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradientTape, Var
from .core import AuctionError, units_per_lot
from .nets import (
    AdamState,
    LearnedMechanism,
    MechanismParams,
    adam_step,
    init_mechanism,
    params_as_vars,
    save_mechanism,
)
from .scenario import BusinessConstraint, Scenario, sample_batch

VARIANTS = ("fc-optimal", "consumer-optimal", "nsw", "nsw-envy")

# de-minimis allocation for counting a consumer as a winner
WINNER_EPSILON = 1.0


class TrainingDivergedError(AuctionError):
    code = "training-diverged"


class VariantError(AuctionError):
    code = "unknown-variant"


@dataclass(frozen=True)
class TrainerConfig:
    variant: str
    outer_steps: int = 2000
    batch_size: int = 64
    learning_rate: float = 1e-3
    misreport_steps: int = 25
    misreport_rate: float = 0.1
    misreport_restarts: int = 1
    multiplier_rate: float = 0.01
    rho_regret: float = 1.0
    rho_regret_growth: float = 1.5
    rho_regret_growth_interval: int = 500
    rho_envy: float = 1.0
    rho_business: float = 1.0
    business_constraints: tuple[BusinessConstraint, ...] = ()
    seed: int = 0
    hidden: tuple[int, ...] = (90, 90, 90, 90, 90)
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    log_every: int = 0  # console progress interval; 0 = quiet

    def validated(self) -> "TrainerConfig":
        if self.variant not in VARIANTS:
            raise VariantError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.outer_steps < 0 or self.batch_size < 1:
            raise VariantError("outer_steps must be >= 0 and batch_size >= 1")
        if self.misreport_steps < 0 or self.misreport_rate <= 0:
            raise VariantError("misreport steps must be >= 0 and rate positive")
        if self.learning_rate < 0 or self.multiplier_rate < 0:
            raise VariantError("learning rates must be non-negative")
        return self


@dataclass(frozen=True)
class LagrangeState:
    """Non-negative multipliers for the regret and envy constraints."""

    regret: np.ndarray
    envy: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "LagrangeState":
        return cls(regret=np.zeros(n), envy=np.zeros(n))


def lagrange_update(state: LagrangeState, regret: np.ndarray,
                    envy: np.ndarray | None, rate: float) -> LagrangeState:
    """Projected gradient ascent on the multipliers."""
    new_regret = np.maximum(0.0, state.regret + rate * regret)
    new_envy = state.envy
    if envy is not None:
        new_envy = np.maximum(0.0, state.envy + rate * envy)
    return LagrangeState(regret=new_regret, envy=new_envy)


def pin_non_demanded(valuations: np.ndarray, requirements: np.ndarray,
                     widths: np.ndarray, reserve_price: float) -> np.ndarray:
    """Encode lots beyond each consumer's requirement at the reserve price."""
    starts = np.concatenate(([0.0], np.cumsum(widths)[:-1]))
    demanded = starts[None, :] < requirements[:, None]  # (n, k)
    return np.where(demanded, valuations, reserve_price)


def demanded_mask(requirements: np.ndarray, widths: np.ndarray) -> np.ndarray:
    starts = np.concatenate(([0.0], np.cumsum(widths)[:-1]))
    return (starts[None, :] < requirements[:, None]).astype(float)


def project_misreports(raw: np.ndarray, demanded: np.ndarray,
                       reserve_price: float, value_high: float) -> np.ndarray:
    """Feasibility projection: sequential monotone clipping, then clamping to
    [reserve, value_high], then re-pinning non-demanded lots at the reserve."""
    out = np.minimum.accumulate(raw, axis=-1)
    out = np.clip(out, reserve_price, value_high)
    return np.where(demanded > 0, out, reserve_price)


def _slot_utilities(mechanism, tape: GradientTape, valuations: np.ndarray,
                    misreports, param_vars=None) -> Var:
    """Utility of each (sample, consumer) slot when that consumer deviates to
    its misreport row while the others bid truthfully. Returns (B, n)."""
    batch, n, k = valuations.shape
    eye = np.eye(n)
    embed = eye[None, :, :, None]  # (1, n, n, 1)
    truthful_part = valuations[:, None, :, :] * (1.0 - embed)  # constant
    if isinstance(misreports, Var):
        mis_part = ad.mul(ad.expand_dims(misreports, 2), embed)
        stacked = ad.add(truthful_part, mis_part)
        stacked = ad.reshape(stacked, (batch * n, n, k))
    else:
        stacked = (truthful_part + misreports[:, :, None, :] * embed)
        stacked = stacked.reshape(batch * n, n, k)
    alloc, pay, _ = mechanism.tape_outcome(tape, stacked, param_vars)
    alloc3 = ad.reshape(alloc, (batch, n, n))
    pay3 = ad.reshape(pay, (batch, n, n))
    own_alloc = ad.vsum(ad.mul(alloc3, eye[None]), axis=-1)  # (B, n)
    own_pay = ad.vsum(ad.mul(pay3, eye[None]), axis=-1)
    value = ad.lot_value(valuations, own_alloc, mechanism.widths)
    return ad.sub(value, own_pay)


def _truthful_utilities(mechanism, tape: GradientTape, valuations: np.ndarray,
                        param_vars=None):
    """(allocation, payments, utilities) Vars for truthful bidding."""
    alloc, pay, phat = mechanism.tape_outcome(tape, valuations, param_vars)
    value = ad.lot_value(valuations, alloc, mechanism.widths)
    return alloc, pay, phat, ad.sub(value, pay)


def _utilities_from_outcomes(valuations: np.ndarray, alloc: np.ndarray,
                             pay: np.ndarray, widths: np.ndarray) -> np.ndarray:
    units = units_per_lot(alloc, widths)  # (..., n, k)
    return (units * valuations).sum(axis=-1) - pay


def _stack_misreports(valuations: np.ndarray, misreports: np.ndarray) -> np.ndarray:
    """(B*n, n, k) bid tensors: slot (b, i) deviates consumer i's row."""
    batch, n, k = valuations.shape
    embed = np.eye(n)[None, :, :, None]
    stacked = valuations[:, None, :, :] * (1.0 - embed) \
        + misreports[:, :, None, :] * embed
    return stacked.reshape(batch * n, n, k)


def _slot_utilities_plain(mechanism, valuations: np.ndarray,
                          misreports: np.ndarray) -> np.ndarray:
    """Gradient-free version of _slot_utilities for mechanisms without tapes."""
    batch, n, _ = valuations.shape
    alloc, pay = mechanism.outcomes(_stack_misreports(valuations, misreports))
    eye = np.eye(n)
    own_alloc = (alloc.reshape(batch, n, n) * eye).sum(axis=-1)
    own_pay = (pay.reshape(batch, n, n) * eye).sum(axis=-1)
    units = units_per_lot(own_alloc, mechanism.widths)
    return (units * valuations).sum(axis=-1) - own_pay


def empirical_regret(mechanism, valuations: np.ndarray, *, steps: int,
                     rate: float, restarts: int, rng: np.random.Generator,
                     value_high: float) -> tuple[np.ndarray, np.ndarray]:
    """Best-found regret per (sample, consumer) and the misreports achieving it.

    Differentiable mechanisms get projected gradient ascent from the truthful
    bid (plus random feasible restarts); mechanisms without gradients get
    their restart points evaluated directly. steps=0 reports zero regret.
    """
    valuations = np.asarray(valuations, dtype=float)
    batch, n, k = valuations.shape
    reserve = mechanism.reserve_price
    dem = demanded_mask(mechanism.requirements, mechanism.widths)
    truthful = pin_non_demanded(valuations, mechanism.requirements,
                                mechanism.widths, reserve)
    if steps == 0:
        return np.zeros((batch, n)), truthful.copy()

    alloc0, pay0 = mechanism.outcomes(truthful)
    u_true = _utilities_from_outcomes(truthful, alloc0, pay0, mechanism.widths)

    differentiable = hasattr(mechanism, "tape_outcome")
    scale = value_high - reserve
    step_factor = rate * scale / mechanism.total_units  # per-unit-normalized ascent

    # restarts ride along as extra batch copies: copy 0 starts truthful, the
    # rest at random feasible perturbations
    reps = max(1, restarts)
    mis = np.tile(truthful, (reps, 1, 1))
    noise = rng.uniform(-0.5, 0.5, size=((reps - 1) * batch, n, k)) * scale
    mis[batch:] = project_misreports(mis[batch:] + noise, dem, reserve, value_high)
    big_truthful = np.tile(truthful, (reps, 1, 1))
    best_u = np.tile(u_true, (reps, 1))
    best_mis = mis.copy()

    if not differentiable:
        u = _slot_utilities_plain(mechanism, big_truthful, mis)
        improved = u > best_u
        best_u = np.where(improved, u, best_u)
        best_mis = np.where(improved[:, :, None], mis, best_mis)
    else:
        for _ in range(steps):
            tape = GradientTape()
            mis_var = tape.var(mis)
            u = _slot_utilities(mechanism, tape, big_truthful, mis_var)
            tape.backward(ad.vsum(u))
            grad = mis_var.grad if mis_var.grad is not None else np.zeros_like(mis)
            improved = u.value > best_u
            best_u = np.where(improved, u.value, best_u)
            best_mis = np.where(improved[:, :, None], mis, best_mis)
            mis = project_misreports(mis + step_factor * (grad * dem),
                                     dem, reserve, value_high)

    best_u = best_u.reshape(reps, batch, n)
    best_mis = best_mis.reshape(reps, batch, n, k)
    pick = np.argmax(best_u, axis=0)  # (batch, n)
    top_u = np.take_along_axis(best_u, pick[None], axis=0)[0]
    top_mis = np.take_along_axis(best_mis, pick[None, :, :, None], axis=0)[0]
    regret = np.maximum(0.0, top_u - u_true)
    return regret, top_mis


def business_penalty(allocation, constraints, rho_business: float,
                     total_units: float):
    """Batch-mean hinge penalty for the configured business constraints.

    allocation: (B, n) Var. Returns a scalar Var (or 0.0 when no constraints).
    """
    if not constraints:
        return 0.0
    batch, n = allocation.value.shape
    total = None
    order = np.argsort(-allocation.value, axis=-1)
    ranked = ad.gather(allocation, order)  # descending per sample
    for c in constraints:
        if c.kind == "min-winners-with-floor":
            s = min(c.count, n)
            shortfall = ad.hinge(ad.sub(c.quantity_floor, ranked))
            mask = np.zeros((1, n))
            mask[0, :s] = 1.0
            term = ad.vsum(ad.mul(shortfall, mask))
        elif c.kind == "max-winner-share":
            term = ad.vsum(ad.hinge(ad.sub(allocation, c.share_cap * total_units)))
        elif c.kind == "max-winners":
            if c.count >= n:
                continue
            col = np.full((batch, 1), c.count)
            extra = ad.gather(ranked, col)  # (count+1)-th highest
            term = ad.vsum(ad.hinge(ad.sub(extra, WINNER_EPSILON)))
        else:
            raise VariantError(f"unknown business constraint kind {c.kind!r}")
        term = ad.mul(term, rho_business / batch)
        total = term if total is None else ad.add(total, term)
    return total if total is not None else 0.0


def constraint_satisfied(allocation: np.ndarray, c: BusinessConstraint,
                         total_units: float) -> np.ndarray:
    """Boolean per-sample satisfaction of one business constraint."""
    a = np.asarray(allocation, dtype=float)
    ranked = -np.sort(-a, axis=-1)
    if c.kind == "min-winners-with-floor":
        s = min(c.count, a.shape[-1])
        return (ranked[:, :s] >= c.quantity_floor - 1e-9).all(axis=-1)
    if c.kind == "max-winner-share":
        return (a <= c.share_cap * total_units + 1e-9).all(axis=-1)
    if c.kind == "max-winners":
        if c.count >= a.shape[-1]:
            return np.ones(a.shape[0], dtype=bool)
        return ranked[:, c.count] <= WINNER_EPSILON + 1e-9
    raise VariantError(f"unknown business constraint kind {c.kind!r}")


@dataclass
class LossParts:
    """Tape nodes for every loss ingredient of one batch."""

    revenue_mean: Var
    nsw_mean: Var
    regret: Var
    envy: Var
    business: object  # Var or 0.0


def composite_loss(variant: str, parts: LossParts, lagrange: LagrangeState,
                   rho_regret: float, rho_envy: float) -> Var:
    """Assemble the variant's scalar loss from its batch ingredients."""
    batch = parts.regret.value.shape[0]
    regret_penalty = ad.mul(ad.vsum(ad.square(parts.regret)), rho_regret / batch)
    lagr = ad.mul(ad.vsum(ad.mul(parts.regret, lagrange.regret[None, :])), 1.0 / batch)
    if variant == "fc-optimal":
        return ad.add(ad.add(ad.mul(parts.revenue_mean, -1.0), regret_penalty), lagr)
    if variant == "consumer-optimal":
        return ad.add(ad.add(parts.revenue_mean, regret_penalty), lagr)
    if variant == "nsw":
        loss = ad.add(ad.add(ad.mul(parts.nsw_mean, -1.0), regret_penalty), lagr)
        if not isinstance(parts.business, float):
            loss = ad.add(loss, parts.business)
        return loss
    if variant == "nsw-envy":
        loss = ad.add(ad.add(ad.mul(parts.nsw_mean, -1.0), regret_penalty), lagr)
        envy_penalty = ad.mul(ad.vsum(ad.square(parts.envy)), rho_envy / batch)
        envy_lagr = ad.mul(ad.vsum(ad.mul(parts.envy, lagrange.envy[None, :])),
                           1.0 / batch)
        loss = ad.add(ad.add(loss, envy_penalty), envy_lagr)
        if not isinstance(parts.business, float):
            loss = ad.add(loss, parts.business)
        return loss
    raise VariantError(f"unknown variant {variant!r}")


def envy_var(mechanism, valuations: np.ndarray, alloc: Var, pay: Var,
             u_true: Var) -> Var:
    """Per-(sample, consumer) envy on the tape: best utility from swapping
    into any consumer's bundle, capped at the envier's requirement."""
    swap_q = ad.minimum_const(ad.expand_dims(alloc, 1),
                              mechanism.requirements[None, :, None])  # (B, i, h)
    swap_value = ad.lot_value(valuations[:, :, None, :], swap_q, mechanism.widths)
    swap_util = ad.sub(swap_value, ad.expand_dims(pay, 1))
    return ad.sub(ad.rowmax(swap_util), u_true)


@dataclass
class TrainResult:
    params: MechanismParams
    lagrange: LagrangeState
    log_rows: list[dict]

    def log_text(self) -> str:
        header = "step,loss,nsw,revenue,regret,envy,lambda_norm"
        lines = [header]
        for r in self.log_rows:
            lines.append(
                f"{r['step']},{r['loss']!r},{r['nsw']!r},{r['revenue']!r},"
                f"{r['regret']!r},{r['envy']!r},{r['lambda_norm']!r}"
            )
        return "\n".join(lines) + "\n"


def train(scenario: Scenario, config: TrainerConfig) -> TrainResult:
    """Run the outer Adam loop; deterministic in config.seed."""
    config = config.validated()
    scenario.validate()
    n = scenario.consumers
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    params = init_mechanism(scenario.fingerprint(), hidden=config.hidden,
                            seed=config.seed)
    mechanism = LearnedMechanism(params, scenario.requirements)
    state = AdamState.for_tensors(params.tensors())
    lagrange = LagrangeState.zeros(n)
    batch_rng = np.random.default_rng(seeds[1])
    mis_rng = np.random.default_rng(seeds[2])
    constraints = config.business_constraints or scenario.business_constraints
    log_rows: list[dict] = []
    wall_start = time.perf_counter()

    for step in range(config.outer_steps):
        growth_steps = step // config.rho_regret_growth_interval
        rho_regret = config.rho_regret * (config.rho_regret_growth ** growth_steps)
        valuations = sample_batch(scenario, batch_rng, config.batch_size)
        valuations = pin_non_demanded(valuations, mechanism.requirements,
                                      mechanism.widths, scenario.reserve_price)
        regret_np, misreports = empirical_regret(
            mechanism, valuations, steps=config.misreport_steps,
            rate=config.misreport_rate, restarts=config.misreport_restarts,
            rng=mis_rng, value_high=scenario.value_high,
        )

        tape = GradientTape()
        pvars = params_as_vars(tape, params)
        alloc, pay, _, u_true = _truthful_utilities(mechanism, tape, valuations,
                                                    pvars)
        per_sample_revenue = ad.vsum(pay, axis=-1)  # (B,)
        revenue_mean = ad.vmean(per_sample_revenue)
        u_fc = ad.sub(per_sample_revenue,
                      scenario.reserve_price * scenario.total_units)
        u_c = ad.vsum(u_true, axis=-1)
        nsw_mean = ad.vmean(ad.mul(u_fc, u_c))
        envy = envy_var(mechanism, valuations, alloc, pay, u_true)
        u_mis = _slot_utilities(mechanism, tape, valuations, misreports, pvars)
        regret = ad.hinge(ad.sub(u_mis, u_true))
        business = business_penalty(alloc, constraints, config.rho_business,
                                    scenario.total_units) \
            if config.variant in ("nsw", "nsw-envy") else 0.0
        parts = LossParts(revenue_mean=revenue_mean, nsw_mean=nsw_mean,
                          regret=regret, envy=envy, business=business)
        loss = composite_loss(config.variant, parts, lagrange, rho_regret,
                              config.rho_envy)
        try:
            tape.backward(loss)
        except FloatingPointError as exc:
            raise TrainingDivergedError(
                f"non-finite loss at step {step}: revenue={revenue_mean.value}, "
                f"nsw={nsw_mean.value}, regret_mean={regret_np.mean()}"
            ) from exc
        grads = [v.grad if v.grad is not None else np.zeros_like(v.value)
                 for v in pvars]
        adam_step(params.tensors(), grads, state, config.learning_rate)
        lagrange = lagrange_update(
            lagrange, regret_np.mean(axis=0),
            envy.value.mean(axis=0) if config.variant == "nsw-envy" else None,
            config.multiplier_rate,
        )
        lam_norm = float(np.sqrt((lagrange.regret ** 2).sum()
                                 + (lagrange.envy ** 2).sum()))
        row = {
            "step": step,
            "loss": float(loss.value),
            "nsw": float(nsw_mean.value),
            "revenue": float(revenue_mean.value),
            "regret": float(regret_np.mean()),
            "envy": float(envy.value.mean()),
            "lambda_norm": lam_norm,
        }
        log_rows.append(row)
        if config.log_every and (step % config.log_every == 0
                                 or step == config.outer_steps - 1):
            wall_ms = (time.perf_counter() - wall_start) * 1000
            print(f"[{config.variant}] step={step} loss={row['loss']:.3f} "
                  f"nsw={row['nsw']:.0f} revenue={row['revenue']:.1f} "
                  f"regret={row['regret']:.4f} envy={row['envy']:.2f} "
                  f"wall_ms={wall_ms:.0f}")
        if (config.checkpoint_every and config.checkpoint_path
                and (step + 1) % config.checkpoint_every == 0):
            save_mechanism(params, f"{config.checkpoint_path}.step{step + 1}")

    return TrainResult(params=params, lagrange=lagrange, log_rows=log_rows)
