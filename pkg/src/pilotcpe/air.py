"""
Achievable information rate of pilot-aided transmission.

GMI is estimated from bitwise LLRs (bit-metric decoding) as

    GMI = m - E[ sum_b log2(1 + exp(-(1 - 2 c_b) L_b)) ]

and the AIR discounts it by the pilot overhead, ``AIR = (1 - rate) GMI``
with ``rate`` the fraction of pilot slots in the block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .detection import DEFAULT_ITERATIONS, iterate_cpe_detection_batch, symbol_llrs
from .model import (
    Constellation,
    SystemConfig,
    generate_symbol_block,
    make_constellation,
    sample_phase_trajectory,
    transmit,
)
from .patterns import PilotMask, heuristic, kappa_for_rate, max_kappa, random_distribution
from .rng import MASK, NOISE, PHASE, SYMBOLS, derive_rng

Z95 = 1.959963984540054


def estimate_gmi(llrs, true_bits) -> float:
    """GMI in bits per symbol from LLRs (positive favours 0) and true bits.

    Both arrays have shape ``(num_symbols, bits_per_symbol)``; the result
    is clipped to ``[0, bits_per_symbol]``.
    """
    llrs = np.asarray(getattr(llrs, "llrs", llrs), dtype=float)
    bits = np.asarray(true_bits)
    if llrs.shape != bits.shape:
        raise ValueError(f"LLR shape {llrs.shape} does not match bit shape {bits.shape}")
    if llrs.ndim != 2:
        raise ValueError("expected (num_symbols, bits_per_symbol) arrays")
    m = llrs.shape[1]
    if llrs.shape[0] == 0:
        return 0.0
    sign = 1.0 - 2.0 * bits
    loss = np.logaddexp(0.0, -sign * llrs).sum(axis=1) / math.log(2.0)
    return float(min(max(m - loss.mean(), 0.0), m))


@dataclass
class AirResult:
    """AIR estimate at one operating point.

    ``ci_halfwidth`` is the 95 % normal-approximation half-width of the AIR
    over per-block samples.
    """

    pilot_rate: float
    gmi_bits_per_symbol: float
    air_bits_per_symbol: float
    ci_halfwidth: float
    num_blocks: int
    num_symbols: int
    block_gmi: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "pilot_rate": self.pilot_rate,
            "gmi": self.gmi_bits_per_symbol,
            "air": self.air_bits_per_symbol,
            "ci": self.ci_halfwidth,
            "blocks": self.num_blocks,
            "symbols": self.num_symbols,
        }


def _ci(samples) -> float:
    n = len(samples)
    if n < 2:
        return math.inf
    return Z95 * float(np.std(samples, ddof=1)) / math.sqrt(n)


def simulate_block_gmi(config: SystemConfig, mask, constellation: Constellation, seed: int,
                       block_ids, num_iters: int = DEFAULT_ITERATIONS, genie: bool = False) -> np.ndarray:
    """Per-block GMI for blocks ``block_ids`` (each seeded from ``(seed, purpose, id)``)."""
    grid = np.asarray(getattr(mask, "grid", mask), dtype=bool)
    cov = config.process_noise_cov()
    N0 = config.noise_psd
    rs, thetas, idxs = [], [], []
    for b in block_ids:
        theta = sample_phase_trajectory(cov, config.block_length, derive_rng(seed, PHASE, b))
        block = generate_symbol_block(grid, constellation, config.zeta, derive_rng(seed, SYMBOLS, b))
        rs.append(transmit(block, theta, N0, derive_rng(seed, NOISE, b)))
        thetas.append(theta)
        idxs.append(block.indices)
    r = np.stack(rs)
    rows, cols = np.nonzero(~grid)
    if genie:
        y = r[:, rows, cols] * np.exp(-1j * np.stack(thetas)[:, rows, cols])
        llrs = symbol_llrs(y, constellation, N0)
    else:
        _, _, llrs = iterate_cpe_detection_batch(r, grid, constellation, config, num_iters)
    out = np.empty(len(rs))
    for j, idx in enumerate(idxs):
        out[j] = estimate_gmi(llrs[j], constellation.bit_labels[idx[rows, cols]])
    return out


def estimate_air(config: SystemConfig, mask, constellation: Constellation | int, runs: int = 200,
                 seed: int = 0, ci_target: float | None = None, min_blocks: int = 8,
                 batch_size: int = 8, num_iters: int = DEFAULT_ITERATIONS, genie: bool = False) -> AirResult:
    """Monte-Carlo AIR of ``mask``.

    Blocks are simulated in batches until the CI half-width drops to
    ``ci_target`` (after at least ``min_blocks``) or ``runs`` blocks have
    been used; ``ci_target=None`` always runs ``runs`` blocks. Block ``b``
    draws its phase, symbols and noise from streams ``(seed, purpose, b)``,
    so different masks evaluated with one seed share phase and noise
    realizations.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    if isinstance(constellation, int):
        constellation = make_constellation(constellation, config.symbol_energy)
    grid = np.asarray(getattr(mask, "grid", mask), dtype=bool)
    rate = float(grid.mean())
    n_data = int((~grid).sum())
    if n_data == 0:
        return AirResult(rate, 0.0, 0.0, 0.0, 0, 0)
    gmis: list[float] = []
    while len(gmis) < runs:
        ids = range(len(gmis), min(len(gmis) + batch_size, runs))
        gmis += simulate_block_gmi(config, grid, constellation, seed, ids, num_iters, genie).tolist()
        if ci_target is not None and len(gmis) >= min_blocks:
            if (1.0 - rate) * _ci(gmis) <= ci_target:
                break
    gmi = math.fsum(gmis) / len(gmis)
    return AirResult(rate, gmi, (1.0 - rate) * gmi, (1.0 - rate) * _ci(gmis),
                     len(gmis), len(gmis) * n_data, gmis)


def family_mask(family: str, kappa: int, M: int, N: int, seed: int = 0) -> PilotMask:
    """Mask of a named family: ``S1``..``S5`` or ``Urnd`` (seeded random)."""
    if family.upper() in ("URND", "U_RND", "RANDOM"):
        return random_distribution(kappa, M, N, derive_rng(seed, MASK, kappa))
    return heuristic(family, kappa, M, N)


@dataclass
class SweepResult:
    family: str
    points: list  # (target rate, AirResult)

    @property
    def best(self) -> tuple:
        return max(self.points, key=lambda p: p[1].air_bits_per_symbol)

    @property
    def argmax_rate(self) -> float:
        return self.best[1].pilot_rate

    @property
    def max_air(self) -> float:
        return self.best[1].air_bits_per_symbol


def sweep_pilot_rate(config: SystemConfig, family: str, rate_grid, constellation: Constellation | int = 256,
                     runs: int = 200, seed: int = 0, **air_kwargs) -> SweepResult:
    """AIR of ``family`` over target pilot rates, ``kappa = round(rate * N)``."""
    rate_grid = list(rate_grid)
    if not rate_grid:
        raise ValueError("empty rate grid")
    if isinstance(constellation, int):
        constellation = make_constellation(constellation, config.symbol_energy)
    M, N = config.num_channels, config.block_length
    upper = max_kappa(family, M, N)
    points = []
    for rate in rate_grid:
        kappa = kappa_for_rate(rate, N)
        if not 0 <= kappa <= upper:
            raise ValueError(f"rate {rate} gives kappa={kappa} outside [0, {upper}] for {family}")
        mask = family_mask(family, kappa, M, N, seed)
        points.append((rate, estimate_air(config, mask, constellation, runs, seed, **air_kwargs)))
    return SweepResult(family, points)


@dataclass
class GainRow:
    order: int
    num_channels: int
    snr_db: float
    alpha: float
    gain: float
    ci: float
    s1: SweepResult
    s4: SweepResult


def air_gain_table(grid, base: SystemConfig, rate_grid, runs: int = 200, seed: int = 0,
                   **air_kwargs) -> list[GainRow]:
    """AIR gain of S4 over S1, each maximized over ``rate_grid``.

    ``grid`` is an iterable of ``(order, M, snr_db, alpha)`` tuples.
    """
    rows = []
    for order, M, snr, alpha in grid:
        cfg = base.replace(num_channels=M, snr_db=snr, alpha=alpha)
        const = make_constellation(order, cfg.symbol_energy)
        s1 = sweep_pilot_rate(cfg, "S1", rate_grid, const, runs, seed, **air_kwargs)
        s4 = sweep_pilot_rate(cfg, "S4", rate_grid, const, runs, seed, **air_kwargs)
        ci = math.hypot(s1.best[1].ci_halfwidth, s4.best[1].ci_halfwidth)
        rows.append(GainRow(order, M, snr, alpha, s4.max_air - s1.max_air, ci, s1, s4))
    return rows
