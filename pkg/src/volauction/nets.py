"""The learned auction: allocation and payment networks plus their optimizer.

Both networks are plain fully-connected stacks over the flattened bid matrix.
The allocation head is a softmax scaled to min(m, combined requirements) and
box-projected onto per-consumer requirement caps; the payment head produces
sigmoid multipliers on each consumer's bid surplus above the reserve, which
makes truthful participation individually rational by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import GradientTape, Var
from .core import (
    AuctionError,
    AuctionOutcome,
    LotGrid,
    LotSchedule,
    units_per_lot,
)
from .fileio import atomic_write_text, canonical_json, decode_tensor, encode_tensor
from .scenario import ScenarioFingerprint

WEIGHTS_FORMAT = "volauction-weights"
WEIGHTS_VERSION = 1

HIDDEN_MIN, HIDDEN_MAX = 80, 100
HIDDEN_LAYERS = 5

_CAP_EPS = 1e-12


class FingerprintMismatchError(AuctionError):
    code = "fingerprint-mismatch"


class ArchitectureError(AuctionError):
    code = "architecture"


class InvalidRoundingError(AuctionError):
    code = "invalid-rounding"


@dataclass
class MechanismParams:
    """Weights of both networks plus the metadata needed to reuse them.

    Each layer is a (weights, bias) pair; weights are (fan_in, fan_out).
    The fingerprint ties the weights to the scenario they were trained for.
    """

    fingerprint: ScenarioFingerprint
    hidden: tuple[int, ...]
    activation: str
    seed: int
    allocation_layers: list[tuple[np.ndarray, np.ndarray]]
    payment_layers: list[tuple[np.ndarray, np.ndarray]]

    def tensors(self) -> list[np.ndarray]:
        """All parameter tensors in a fixed, stable order."""
        out = []
        for net in (self.allocation_layers, self.payment_layers):
            for w, b in net:
                out.append(w)
                out.append(b)
        return out

    def tensor_names(self) -> list[str]:
        names = []
        for prefix, net in (("alloc", self.allocation_layers),
                            ("pay", self.payment_layers)):
            for i in range(len(net)):
                names.append(f"{prefix}.{i}.weight")
                names.append(f"{prefix}.{i}.bias")
        return names

    def copy(self) -> "MechanismParams":
        return MechanismParams(
            fingerprint=self.fingerprint,
            hidden=self.hidden,
            activation=self.activation,
            seed=self.seed,
            allocation_layers=[(w.copy(), b.copy()) for w, b in self.allocation_layers],
            payment_layers=[(w.copy(), b.copy()) for w, b in self.payment_layers],
        )


def _layer_dims(fingerprint: ScenarioFingerprint, hidden: Sequence[int]) -> list[int]:
    n, k = fingerprint.consumers, fingerprint.lot_count
    return [n * k, *hidden, n]


def init_mechanism(fingerprint: ScenarioFingerprint,
                   hidden: Sequence[int] = (90,) * HIDDEN_LAYERS,
                   seed: int = 0) -> MechanismParams:
    """Fan-in-scaled normal weights, zero biases, deterministic in the seed."""
    hidden = tuple(int(h) for h in hidden)
    if len(hidden) != HIDDEN_LAYERS:
        raise ArchitectureError(f"expected {HIDDEN_LAYERS} hidden layers, got {len(hidden)}")
    if any(h < HIDDEN_MIN or h > HIDDEN_MAX for h in hidden):
        raise ArchitectureError(
            f"hidden widths must lie in [{HIDDEN_MIN}, {HIDDEN_MAX}]; got {hidden}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11C]))
    dims = _layer_dims(fingerprint, hidden)

    def make_net():
        layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
            layers.append((w, np.zeros(fan_out)))
        return layers

    return MechanismParams(
        fingerprint=fingerprint,
        hidden=hidden,
        activation="relu",
        seed=int(seed),
        allocation_layers=make_net(),
        payment_layers=make_net(),
    )


def _mlp(tape: GradientTape, x, layers, as_vars) -> Var:
    h = x
    for i, (w, b) in enumerate(layers):
        wv, bv = (as_vars[2 * i], as_vars[2 * i + 1]) if as_vars else (w, b)
        h = ad.add(ad.matmul(h, wv), bv)
        if i < len(layers) - 1:
            h = ad.relu(h)
    return h


def params_as_vars(tape: GradientTape, params: MechanismParams):
    """Leaf Vars for every tensor (training mode); order matches tensors()."""
    return [tape.var(t) for t in params.tensors()]


def _reciprocal(x: Var) -> Var:
    out = Var(1.0 / x.value, x.tape)

    def bwd():
        if out.grad is None:
            return
        ad._acc(x, -out.grad / (x.value * x.value), own=True)

    x.tape._ops.append(bwd)
    return out


def box_project(raw: Var, caps: np.ndarray) -> Var:
    """Project allocations onto [0, cap_i] keeping each row sum constant.

    Violators are clamped to their caps and the excess is redistributed among
    the still-unclamped consumers in proportion to their current allocations;
    clamped consumers stay clamped, so at most n passes run. Requires each row
    sum <= sum of caps.
    """
    n = raw.value.shape[-1]
    caps = np.broadcast_to(np.asarray(caps, dtype=float), raw.value.shape)
    a = raw
    clamped = np.zeros(raw.value.shape, dtype=bool)
    for _ in range(n):
        viol = (a.value > caps + _CAP_EPS) & ~clamped
        if not viol.any():
            break
        clamped = clamped | viol
        free = 1.0 - clamped.astype(float)
        excess = ad.vsum(ad.mul(ad.sub(a, caps), viol.astype(float)),
                         axis=-1, keepdims=True)
        weights = ad.mul(a, free)
        pool = (a.value * free).sum(axis=-1, keepdims=True)
        count_free = free.sum(axis=-1, keepdims=True)
        # rows whose unclamped mass is zero split the excess equally instead
        fallback = np.where(pool <= 0, free / np.maximum(count_free, 1.0), 0.0)
        shares = ad.add(weights, fallback)
        total = ad.vsum(shares, axis=-1, keepdims=True)
        total = ad.add(total, (total.value <= 0).astype(float))
        a = ad.add(caps * clamped,
                   ad.add(weights, ad.mul(excess, ad.mul(shares, _reciprocal(total)))))
    return a


class LearnedMechanism:
    """Batched auction evaluation for one set of trained weights.

    Bid tensors have shape (batch, n, k) with non-demanded lots encoded at the
    reserve price; requirements are enforced by the allocation box projection.
    """

    def __init__(self, params: MechanismParams, requirements: Sequence[int]):
        fp = params.fingerprint
        if len(requirements) != fp.consumers:
            raise ArchitectureError("requirements must cover every consumer")
        self.params = params
        self.requirements = np.asarray(requirements, dtype=float)
        self.reserve_price = fp.reserve_price
        self.value_high = fp.value_high
        self.scale = fp.value_high - fp.reserve_price
        self.total_units = fp.total_units
        self.target = float(min(fp.total_units, self.requirements.sum()))
        self.widths = np.full(fp.lot_count, fp.total_units // fp.lot_count, dtype=float)
        self.widths[-1] = fp.total_units - (fp.lot_count - 1) * self.widths[0]

    def tape_outcome(self, tape: GradientTape, bids, param_vars=None):
        """Allocation, payments and payment multipliers as tape Vars.

        bids: (batch, n, k) Var or array. param_vars: leaf Vars from
        params_as_vars when parameter gradients are needed.
        """
        fp = self.params.fingerprint
        if isinstance(bids, Var):
            batch = bids.value.shape[0]
            x = ad.mul(ad.add(bids, -self.reserve_price), 1.0 / self.scale)
        else:
            bids = np.asarray(bids, dtype=float)
            batch = bids.shape[0]
            x = tape.var((bids - self.reserve_price) / self.scale)
        flat = ad.reshape(x, (batch, fp.consumers * fp.lot_count))
        n_alloc = 2 * len(self.params.allocation_layers)
        alloc_vars = param_vars[:n_alloc] if param_vars else None
        pay_vars = param_vars[n_alloc:] if param_vars else None
        logits = _mlp(tape, flat, self.params.allocation_layers, alloc_vars)
        probs = ad.softmax(logits)
        alloc = box_project(ad.mul(probs, self.target), self.requirements)
        multipliers = ad.sigmoid(_mlp(tape, flat, self.params.payment_layers, pay_vars))
        bid_value = ad.lot_value(bids, alloc, self.widths)
        surplus = ad.sub(bid_value, ad.mul(alloc, self.reserve_price))
        payments = ad.add(ad.mul(alloc, self.reserve_price),
                          ad.mul(multipliers, surplus))
        return alloc, payments, multipliers

    def outcomes(self, bids: np.ndarray):
        """Plain numpy forward: (allocations, payments), both (batch, n)."""
        tape = GradientTape()
        alloc, payments, _ = self.tape_outcome(tape, np.asarray(bids, dtype=float))
        return alloc.value, payments.value


def encode_bids(schedules: Sequence[LotSchedule], reserve_price: float) -> np.ndarray:
    """Network input row for one auction: non-demanded lots sit at the reserve."""
    rows = []
    for s in schedules:
        prices = s.prices_array.copy()
        dem = np.asarray(s.demanded)
        prices[~dem] = reserve_price
        rows.append(prices)
    return np.asarray(rows)[None, :, :]


def forward_allocation(params: MechanismParams, bids: Sequence[LotSchedule],
                       grid: LotGrid) -> np.ndarray:
    """Allocation for one auction of validated bids (real-valued units)."""
    mech = LearnedMechanism(params, [b.requirement for b in bids])
    alloc, _ = mech.outcomes(encode_bids(bids, params.fingerprint.reserve_price))
    return alloc[0]


def forward_payment(params: MechanismParams, bids: Sequence[LotSchedule],
                    allocation: np.ndarray, grid: LotGrid,
                    reserve_price: float) -> AuctionOutcome:
    """Payments for a given allocation: reserve floor plus the learned
    multiplier share of each consumer's bid surplus."""
    mech = LearnedMechanism(params, [b.requirement for b in bids])
    tape = GradientTape()
    x = np.asarray(encode_bids(bids, reserve_price), dtype=float)
    batch = x.shape[0]
    flat = ad.reshape(tape.var(x), (batch, params.fingerprint.consumers *
                                    params.fingerprint.lot_count))
    multipliers = ad.sigmoid(_mlp(tape, flat, params.payment_layers, None)).value[0]
    alloc = np.asarray(allocation, dtype=float)
    values = np.array([
        float(np.dot(units_per_lot(alloc[i], grid.widths), b.prices_array))
        for i, b in enumerate(bids)
    ])
    payments = reserve_price * alloc + multipliers * (values - reserve_price * alloc)
    return AuctionOutcome(allocation=alloc, payments=payments)


@dataclass
class AdamState:
    """First/second moment estimates per tensor plus the step counter."""

    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def for_tensors(cls, tensors: Sequence[np.ndarray]) -> "AdamState":
        return cls(step=0,
                   m=[np.zeros_like(t) for t in tensors],
                   v=[np.zeros_like(t) for t in tensors])


def adam_step(tensors: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState, learning_rate: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied to the tensors in place."""
    if len(tensors) != len(state.m) or len(tensors) != len(grads):
        raise ArchitectureError("optimizer state does not match parameter tensors")
    state.step += 1
    t = state.step
    for x, g, m, v in zip(tensors, grads, state.m, state.v):
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        x -= learning_rate * m_hat / (np.sqrt(v_hat) + eps)
    return state


def round_allocation(allocation: np.ndarray, caps: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder rounding to integers: preserves the total exactly and
    respects caps; entries already within their caps move by less than a unit."""
    a = np.asarray(allocation, dtype=float)
    caps = np.asarray(caps, dtype=float)
    if abs(a.sum() - total) > 1e-6:
        raise InvalidRoundingError(
            f"allocation sums to {a.sum()}, expected {total}"
        )
    floors = np.minimum(np.floor(a + 1e-12), np.floor(caps))
    shortfall = int(round(total - floors.sum()))
    fractions = a - floors
    order = np.lexsort((np.arange(len(a)), -fractions))
    out = floors.copy()
    for idx in order:
        if shortfall == 0:
            break
        if out[idx] + 1 <= caps[idx] + 1e-9:
            out[idx] += 1
            shortfall -= 1
    if shortfall != 0:
        raise InvalidRoundingError("caps make the requested total infeasible")
    return out.astype(int)


def save_mechanism(params: MechanismParams, path: str) -> None:
    """Persist weights, architecture, fingerprint and seed; byte-stable."""
    fp = params.fingerprint
    doc = {
        "format": WEIGHTS_FORMAT,
        "version": WEIGHTS_VERSION,
        "architecture": {
            "hidden": list(params.hidden),
            "activation": params.activation,
            "input_width": fp.consumers * fp.lot_count,
            "output_width": fp.consumers,
        },
        "fingerprint": {
            "total_units": fp.total_units,
            "consumers": fp.consumers,
            "lot_count": fp.lot_count,
            "reserve_price": fp.reserve_price,
            "value_low": fp.value_low,
            "value_high": fp.value_high,
            "distribution": fp.distribution,
        },
        "seed": params.seed,
        "tensors": {
            name: encode_tensor(t)
            for name, t in zip(params.tensor_names(), params.tensors())
        },
    }
    atomic_write_text(path, canonical_json(doc))


def load_mechanism(path: str,
                   expected: ScenarioFingerprint | None = None) -> MechanismParams:
    """Load weights; fails loudly on format or fingerprint mismatch."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != WEIGHTS_FORMAT or doc.get("version") != WEIGHTS_VERSION:
        raise ArchitectureError(
            f"unsupported weights file {doc.get('format')!r} v{doc.get('version')!r}"
        )
    f = doc["fingerprint"]
    fingerprint = ScenarioFingerprint(
        total_units=int(f["total_units"]),
        consumers=int(f["consumers"]),
        lot_count=int(f["lot_count"]),
        reserve_price=float(f["reserve_price"]),
        value_low=float(f["value_low"]),
        value_high=float(f["value_high"]),
    )
    if expected is not None and fingerprint != expected:
        raise FingerprintMismatchError(
            f"weights were trained for {fingerprint}, not {expected}"
        )
    arch = doc["architecture"]
    params = MechanismParams(
        fingerprint=fingerprint,
        hidden=tuple(int(h) for h in arch["hidden"]),
        activation=arch["activation"],
        seed=int(doc.get("seed", 0)),
        allocation_layers=[],
        payment_layers=[],
    )
    tensors = doc["tensors"]
    dims = _layer_dims(fingerprint, params.hidden)
    for prefix, target in (("alloc", params.allocation_layers),
                           ("pay", params.payment_layers)):
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            w = decode_tensor(tensors[f"{prefix}.{i}.weight"])
            b = decode_tensor(tensors[f"{prefix}.{i}.bias"])
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ArchitectureError(f"tensor {prefix}.{i} has wrong shape")
            target.append((w, b))
    if not all(np.isfinite(t).all() for t in params.tensors()):
        raise ArchitectureError("weights file contains non-finite values")
    return params
