"""
Pilot distributions over the ``M x N`` channel-time block.

Three representations are used:

* :class:`UnstructuredDistribution` -- ``L`` linear positions in ``[1, MN]``
  with channel ``i = mod(p - 1, M) + 1`` and slot ``k = ceil(p / M)``.
* :class:`StructuredDistribution` -- a pilot in slot 1 of every channel
  followed by ``kappa - 1`` pilots at ``delta_i + m * tau_i``. Offsets and
  spacings may be real-valued (heuristic constructions); positions are
  rounded to the nearest integer, ties upward.
* :class:`PilotMask` -- the rendered boolean grid every other module uses.

Channel and slot numbers in this module's public conventions are 1-based.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import as_generator

log = logging.getLogger(__name__)

HEURISTICS = ("S1", "S2", "S3", "S4", "S5")


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    severity: str = "error"

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message, "severity": self.severity}


class PatternError(ValueError):
    """Invalid pilot distribution; ``violations`` lists every offender."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(v.message for v in self.violations))


@dataclass
class PilotMask:
    grid: np.ndarray
    notes: list = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool)
        if self.grid.ndim != 2:
            raise ValueError("pilot mask must be a 2-D grid")

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def count(self) -> int:
        return int(self.grid.sum())

    @property
    def rate(self) -> float:
        return self.count / self.grid.size

    def per_channel(self) -> np.ndarray:
        return self.grid.sum(axis=1)

    def channel_slots(self, i: int) -> list[int]:
        """1-based pilot slots of 1-based channel ``i``."""
        return [int(k) + 1 for k in np.flatnonzero(self.grid[i - 1])]

    def positions(self) -> list[int]:
        """Sorted 1-based linear positions, ``p = (k - 1) M + i``."""
        return [int(p) + 1 for p in np.flatnonzero(self.grid.T)]

    def key(self) -> bytes:
        return np.packbits(self.grid).tobytes() + repr(self.grid.shape).encode()

    def __eq__(self, other):
        if not isinstance(other, PilotMask):
            return NotImplemented
        return self.grid.shape == other.grid.shape and bool(np.array_equal(self.grid, other.grid))

    def to_text(self) -> str:
        return "\n".join("".join("1" if b else "0" for b in row) for row in self.grid) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PilotMask":
        rows = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
        if not rows or any(set(r) - {"0", "1"} for r in rows):
            raise ValueError("mask text must be rows of '0'/'1' characters")
        if len({len(r) for r in rows}) != 1:
            raise ValueError("mask rows have unequal lengths")
        return cls(np.array([[c == "1" for c in r] for r in rows]))

    def to_json(self) -> str:
        M, N = self.grid.shape
        return json.dumps({"M": M, "N": N, "positions": self.positions()})

    @classmethod
    def from_json(cls, text: str) -> "PilotMask":
        rec = json.loads(text)
        return unstructured_to_mask(UnstructuredDistribution(rec["positions"]), rec["M"], rec["N"])

    @classmethod
    def empty(cls, M: int, N: int) -> "PilotMask":
        return cls(np.zeros((M, N), dtype=bool))

    @classmethod
    def full(cls, M: int, N: int) -> "PilotMask":
        return cls(np.ones((M, N), dtype=bool))


@dataclass(frozen=True)
class UnstructuredDistribution:
    positions: tuple

    def __init__(self, positions):
        object.__setattr__(self, "positions", tuple(int(p) for p in positions))

    @property
    def num_pilots(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class StructuredDistribution:
    delta: tuple
    tau: tuple
    kappa: int
    label: str = ""

    def __init__(self, delta, tau, kappa, label=""):
        object.__setattr__(self, "delta", tuple(float(d) for d in delta))
        object.__setattr__(self, "tau", tuple(float(t) for t in tau))
        object.__setattr__(self, "kappa", int(kappa))
        object.__setattr__(self, "label", label)
        if len(self.delta) != len(self.tau):
            raise ValueError("delta and tau must have one entry per channel")

    @property
    def num_channels(self) -> int:
        return len(self.delta)

    def genome(self) -> list[int]:
        """Interleaved ``[delta_1, tau_1, ..., delta_M, tau_M]`` (integers)."""
        out = []
        for d, t in zip(self.delta, self.tau):
            out += [int(round(d)), int(round(t))]
        return out

    @classmethod
    def from_genome(cls, genome, kappa: int) -> "StructuredDistribution":
        g = np.asarray(genome).reshape(-1, 2)
        return cls(g[:, 0], g[:, 1], kappa)

    def to_dict(self) -> dict:
        return {"delta": list(self.delta), "tau": list(self.tau), "kappa": self.kappa}


def round_half_up(x) -> np.ndarray:
    # small guard so values like 40.000000000001 / 13.4999999999 land where
    # exact arithmetic would put them
    return np.floor(np.asarray(x, dtype=float) + 0.5 + 1e-9).astype(int)


def unstructured_to_mask(d: UnstructuredDistribution, M: int, N: int) -> PilotMask:
    bad = [p for p in d.positions if not 1 <= p <= M * N]
    if bad:
        raise PatternError([Violation("out_of_range", f"positions out of range [1, {M * N}]: {bad}")])
    p = np.asarray(d.positions, dtype=int) - 1
    grid = np.zeros((M, N), dtype=bool)
    grid[p % M, p // M] = True
    mask = PilotMask(grid)
    if len(set(d.positions)) != len(d.positions):
        mask.notes.append(Violation("duplicate", "duplicate positions collapsed", "warning"))
    return mask


def _tail_positions(delta: float, tau: float, kappa: int) -> np.ndarray:
    return delta + tau * np.arange(max(kappa - 1, 0))


def structured_to_mask(d: StructuredDistribution, M: int, N: int) -> PilotMask:
    """Render a structured distribution.

    Rounded positions of ``N + 1`` are clamped to ``N``; positions that
    coincide after rounding collapse into one pilot and are reported in
    ``mask.notes``.
    """
    errors = [v for v in _structured_violations(d, M, N, strict=False) if v.severity == "error"]
    if errors:
        raise PatternError(errors)
    grid = np.zeros((M, N), dtype=bool)
    notes = []
    if d.kappa == 0:
        return PilotMask(grid, notes)
    grid[:, 0] = True
    for i in range(M):
        pos = round_half_up(_tail_positions(d.delta[i], d.tau[i], d.kappa))
        if np.any(pos == N + 1):
            notes.append(Violation("clamped", f"channel {i + 1}: position {N + 1} clamped to {N}", "warning"))
            pos = np.minimum(pos, N)
        lost = d.kappa - 1 - len(set(pos.tolist()) - {1})
        if lost:
            notes.append(Violation("collapsed", f"channel {i + 1}: {lost} pilot(s) collapsed by rounding", "warning"))
        grid[i, pos - 1] = True
    for v in notes:
        log.warning(v.message)
    return PilotMask(grid, notes)


def _structured_violations(d: StructuredDistribution, M: int, N: int, strict: bool,
                           span: str = "block") -> list[Violation]:
    out = []
    if d.num_channels != M:
        return [Violation("shape", f"distribution has {d.num_channels} channels, expected {M}")]
    if d.kappa < 0 or d.kappa > N:
        out.append(Violation("kappa", f"kappa={d.kappa} outside [0, {N}]"))
        return out
    if d.kappa < 2:
        return out
    for i, (delta, tau) in enumerate(zip(d.delta, d.tau), start=1):
        if delta < 2:
            out.append(Violation("delta", f"channel {i}: delta_i >= 2 violated (delta={delta:g})"))
        if tau < 1:
            out.append(Violation("tau", f"channel {i}: tau_i >= 1 violated (tau={tau:g})"))
        last = delta + tau * (d.kappa - 2)
        if round_half_up(last) > N + 1:
            out.append(Violation("out_of_range", f"channel {i}: last pilot at {last:g} beyond N={N}"))
        reach = d.kappa - 1 if span == "strict" else d.kappa - 2
        if strict and delta + tau * reach > N:
            out.append(
                Violation("span", f"channel {i}: delta_i + tau_i * {reach} <= N violated "
                          f"({delta:g} + {tau:g} * {reach} > {N})")
            )
        if strict and (delta != int(delta) or tau != int(tau)):
            out.append(Violation("integer", f"channel {i}: delta/tau must be integers"))
        pos = round_half_up(_tail_positions(delta, tau, d.kappa))
        pos = np.minimum(pos, N)
        if len(set(pos.tolist()) - {1}) < d.kappa - 1:
            out.append(Violation("collapsed", f"channel {i}: pilots collapse after rounding", "warning"))
    return out


def validate(obj, M: int, N: int, strict: bool = False, span: str = "block") -> list[Violation]:
    """Check a mask or distribution against the ``M x N`` block.

    Returns a list of :class:`Violation` records (empty when valid). With
    ``strict=True`` structured distributions must also be integer-valued and
    lie in the search space of :func:`pilotcpe.optimizer.optimize_structured`:
    ``delta_i + tau_i (kappa - 2) <= N`` for ``span="block"``, or
    ``delta_i + tau_i (kappa - 1) <= N`` for ``span="strict"``.
    """
    if isinstance(obj, PilotMask):
        if obj.shape != (M, N):
            return [Violation("shape", f"mask shape {obj.shape} != ({M}, {N})")]
        return list(obj.notes)
    if isinstance(obj, UnstructuredDistribution):
        out = []
        bad = [p for p in obj.positions if not 1 <= p <= M * N]
        if bad:
            out.append(Violation("out_of_range", f"positions out of range [1, {M * N}]: {bad}"))
        if len(set(obj.positions)) != len(obj.positions):
            dup = sorted({p for p in obj.positions if obj.positions.count(p) > 1})
            out.append(Violation("duplicate", f"duplicate positions: {dup}"))
        return out
    if isinstance(obj, StructuredDistribution):
        return _structured_violations(obj, M, N, strict, span)
    raise TypeError(f"cannot validate {type(obj).__name__}")


def _check_kappa(kappa: int, upper: float, name: str) -> None:
    if int(kappa) != kappa or not 0 <= kappa <= upper:
        raise PatternError([Violation("kappa", f"{name} requires 0 <= kappa <= {upper:g}, got {kappa}")])


def _empty(M: int, label: str) -> StructuredDistribution:
    return StructuredDistribution([2.0] * M, [1.0] * M, 0, label)


def heuristic_s1(kappa: int, M: int, N: int) -> StructuredDistribution:
    """Time-aligned pilots: identical placement in every channel."""
    _check_kappa(kappa, N, "S1")
    if kappa == 0:
        return _empty(M, "S1")
    tau = N / kappa
    return StructuredDistribution([1 + tau] * M, [tau] * M, kappa, "S1")


def heuristic_s2(kappa: int, M: int, N: int) -> StructuredDistribution:
    """Pilots interleaved across the two polarizations of each 4D channel."""
    _check_kappa(kappa, N / 2, "S2")
    if kappa == 0:
        return _empty(M, "S2")
    tau = N / (kappa - 0.5)
    delta = [1 + tau if i % 2 == 0 else 1 + tau / 2 for i in range(1, M + 1)]
    return StructuredDistribution(delta, [tau] * M, kappa, "S2")


def heuristic_s3(kappa: int, M: int, N: int) -> StructuredDistribution:
    """Cyclic shift of one pattern across channels."""
    _check_kappa(kappa, N / M, "S3")
    if kappa == 0:
        return _empty(M, "S3")
    tau = N / (kappa - 1 + 1 / M)
    delta = [1 + i * tau / M for i in range(1, M + 1)]
    return StructuredDistribution(delta, [tau] * M, kappa, "S3")


def s4_order(M: int) -> list[int]:
    """Shift multipliers ``v_i = (2i + (M-1)(-1)^i + M + 1) / 4``."""
    return [(2 * i + (M - 1) * (-1) ** i + M + 1) // 4 for i in range(1, M + 1)]


def heuristic_s4(kappa: int, M: int, N: int) -> StructuredDistribution:
    """Cyclic shift across channels with the two polarizations spread apart."""
    _check_kappa(kappa, N / M, "S4")
    if kappa == 0:
        return _empty(M, "S4")
    tau = N / (kappa - 1 + 1 / M)
    delta = [1 + v * tau / M for v in s4_order(M)]
    return StructuredDistribution(delta, [tau] * M, kappa, "S4")


def heuristic_s5(kappa: int, M: int, N: int) -> PilotMask:
    """Nearly all pilots in channel 1; one slot-1 pilot in every other channel."""
    _check_kappa(kappa, N / M, "S5")
    grid = np.zeros((M, N), dtype=bool)
    if kappa == 0:
        return PilotMask(grid)
    count = M * kappa - M + 1
    pos = round_half_up(1 + np.arange(count) * (N / count))
    grid[0, np.minimum(pos, N) - 1] = True
    grid[:, 0] = True
    return PilotMask(grid)


_CONSTRUCTORS = {
    "S1": heuristic_s1,
    "S2": heuristic_s2,
    "S3": heuristic_s3,
    "S4": heuristic_s4,
    "S5": heuristic_s5,
}


def heuristic(name: str, kappa: int, M: int, N: int) -> PilotMask:
    """Mask for heuristic ``name`` in ``S1``..``S5``."""
    try:
        build = _CONSTRUCTORS[name.upper()]
    except KeyError:
        raise ValueError(f"unknown heuristic {name!r}; expected one of {HEURISTICS}") from None
    d = build(kappa, M, N)
    return d if isinstance(d, PilotMask) else structured_to_mask(d, M, N)


def max_kappa(name: str, M: int, N: int) -> int:
    name = name.upper()
    if name == "S1" or name in ("URND", "U_RND", "RANDOM"):
        return N
    if name == "S2":
        return N // 2
    return N // M


def random_distribution(kappa: int, M: int, N: int, rng_seed=None) -> PilotMask:
    """``kappa`` pilots per channel drawn uniformly without replacement."""
    _check_kappa(kappa, N, "random distribution")
    rng = as_generator(rng_seed)
    grid = np.zeros((M, N), dtype=bool)
    for i in range(M):
        grid[i, rng.choice(N, size=int(kappa), replace=False)] = True
    return PilotMask(grid)


def kappa_for_rate(rate: float, N: int) -> int:
    return int(math.floor(rate * N + 0.5))
