"""
System model: parameters, QAM constellations, multichannel Wiener phase
noise and the AWGN channel.

The channel-time block is an ``M x N`` array: row ``i`` is complex channel
``i`` (rows ``2j`` and ``2j + 1`` are the two polarizations of 4D channel
``j``), column ``k`` is symbol slot ``k``. Indices are 0-based in code and
1-based in the pilot-position conventions of :mod:`pilotcpe.patterns`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import as_generator

SUPPORTED_ORDERS = (64, 256, 1024)


@dataclass(frozen=True)
class SystemConfig:
    """Scalar model parameters.

    ``noise_psd`` is derived from ``symbol_energy`` and ``snr_db`` with
    SNR = Es / N0. The pilot point defaults to ``sqrt(Es)``.
    """

    num_channels: int = 4
    block_length: int = 1000
    snr_db: float = 25.0
    alpha: float = 1.0
    linewidth_hz: float = 200e3
    symbol_rate_baud: float = 20e9
    symbol_energy: float = 1.0
    pilot_point: complex | None = None

    def __post_init__(self):
        M, N = self.num_channels, self.block_length
        if int(M) != M or M < 2 or M % 2:
            raise ValueError(f"num_channels must be an even integer >= 2, got {M}")
        if int(N) != N or N < 1:
            raise ValueError(f"block_length must be a positive integer, got {N}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.linewidth_hz < 0:
            raise ValueError("linewidth_hz must be nonnegative")
        if self.symbol_rate_baud <= 0 or self.symbol_energy <= 0:
            raise ValueError("symbol_rate_baud and symbol_energy must be positive")

    @property
    def noise_psd(self) -> float:
        return self.symbol_energy / 10.0 ** (self.snr_db / 10.0)

    @property
    def zeta(self) -> complex:
        if self.pilot_point is None:
            return complex(math.sqrt(self.symbol_energy))
        return complex(self.pilot_point)

    @property
    def phase_variance(self) -> float:
        """Per-symbol phase-increment variance 2*pi*dnu/Rs in rad^2."""
        return 2.0 * math.pi * self.linewidth_hz / self.symbol_rate_baud

    def process_noise_cov(self) -> "ProcessNoiseCov":
        return build_process_noise_cov(
            self.num_channels, self.alpha, self.linewidth_hz, self.symbol_rate_baud
        )

    def replace(self, **changes) -> "SystemConfig":
        from dataclasses import replace

        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = {
            "num_channels": self.num_channels,
            "block_length": self.block_length,
            "snr_db": self.snr_db,
            "alpha": self.alpha,
            "linewidth_hz": self.linewidth_hz,
            "symbol_rate_baud": self.symbol_rate_baud,
            "symbol_energy": self.symbol_energy,
        }
        if self.pilot_point is not None:
            d["pilot_point"] = [self.zeta.real, self.zeta.imag]
        return d


@dataclass(frozen=True)
class ProcessNoiseCov:
    matrix: np.ndarray
    variance: float
    alpha: float

    @property
    def num_channels(self) -> int:
        return self.matrix.shape[0]

    def sqrt_factor(self) -> np.ndarray:
        """Symmetric square root; negative (and round-off) eigenvalues are clamped to zero."""
        w, v = np.linalg.eigh(self.matrix)
        tol = 1e-12 * max(float(w.max(initial=0.0)), 0.0)
        w = np.where(w > tol, w, 0.0)
        return (v * np.sqrt(w)) @ v.T

    def to_csv(self, path) -> None:
        _write_matrix_csv(path, self.matrix)


def correlation_pattern(M: int, alpha: float) -> np.ndarray:
    """Unit-scale block pattern: J_2 on the diagonal, alpha*J_2 elsewhere."""
    if M < 2 or M % 2:
        raise ValueError(f"M must be even and >= 2, got {M}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    blocks = np.kron(np.eye(M // 2), np.ones((2, 2)))
    return (1.0 - alpha) * blocks + alpha * np.ones((M, M))


def build_process_noise_cov(
    M: int, alpha: float, linewidth_hz: float, symbol_rate: float
) -> ProcessNoiseCov:
    """Phase-increment covariance ``sigma^2 * [(1-alpha) blockdiag(J2) + alpha J_M]``.

    ``sigma^2 = 2*pi*linewidth_hz/symbol_rate`` with ``linewidth_hz`` the
    combined (transmitter plus LO) linewidth.
    """
    if linewidth_hz < 0:
        raise ValueError("linewidth must be nonnegative")
    if symbol_rate <= 0:
        raise ValueError("symbol rate must be positive")
    var = 2.0 * math.pi * linewidth_hz / symbol_rate
    return ProcessNoiseCov(var * correlation_pattern(M, alpha), var, float(alpha))


def sample_phase_trajectory(cov: ProcessNoiseCov, N: int, rng_seed=None) -> np.ndarray:
    """Draw an ``M x N`` phase-noise realization.

    The initial phase is uniform on [0, 2pi), drawn once per 4D channel and
    shared by its two polarizations; increments are zero-mean Gaussian with
    covariance ``cov.matrix``.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    rng = as_generator(rng_seed)
    M = cov.num_channels
    theta0 = np.repeat(rng.uniform(0.0, 2.0 * np.pi, M // 2), 2)
    z = rng.standard_normal((M, N - 1))
    increments = cov.sqrt_factor() @ z
    theta = np.empty((M, N))
    theta[:, 0] = theta0
    theta[:, 1:] = theta0[:, None] + np.cumsum(increments, axis=1)
    return theta


def gray_code(nbits: int) -> np.ndarray:
    i = np.arange(1 << nbits)
    return i ^ (i >> 1)


@dataclass(frozen=True)
class Constellation:
    """Square QAM with per-axis Gray labeling.

    Point ``a * L + b`` is ``levels[a] + 1j * levels[b]``; its label is the
    in-phase axis label of ``a`` followed by the quadrature label of ``b``.
    """

    order: int
    levels: np.ndarray  # per-axis amplitudes, ascending
    axis_labels: np.ndarray  # (L, m/2) bits, MSB first
    points: np.ndarray = field(repr=False)
    bit_labels: np.ndarray = field(repr=False)

    @property
    def bits_per_symbol(self) -> int:
        return self.bit_labels.shape[1]

    @property
    def energy(self) -> float:
        return float(np.mean(np.abs(self.points) ** 2))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "real", "imag", "label"])
            for j, (p, lab) in enumerate(zip(self.points, self.bit_labels)):
                w.writerow([j, f"{p.real:.17g}", f"{p.imag:.17g}", "".join(map(str, lab))])


def make_constellation(order: int, Es: float = 1.0) -> Constellation:
    if order not in SUPPORTED_ORDERS:
        raise ValueError(f"unsupported QAM order {order}; expected one of {SUPPORTED_ORDERS}")
    L = int(round(math.sqrt(order)))
    half = int(round(math.log2(L)))
    raw = 2.0 * np.arange(L) - (L - 1)
    scale = math.sqrt(Es / (2.0 * (L * L - 1) / 3.0))
    levels = raw * scale
    g = gray_code(half)
    axis_labels = ((g[:, None] >> np.arange(half - 1, -1, -1)) & 1).astype(np.uint8)
    a, b = np.divmod(np.arange(order), L)
    points = levels[a] + 1j * levels[b]
    bit_labels = np.hstack([axis_labels[a], axis_labels[b]])
    return Constellation(order, levels, axis_labels, points, bit_labels)


@dataclass
class SymbolBlock:
    """Transmitted block; ``indices`` holds constellation indices, -1 at pilots."""

    symbols: np.ndarray
    indices: np.ndarray

    @property
    def data_mask(self) -> np.ndarray:
        return self.indices >= 0


def generate_symbol_block(mask, constellation: Constellation, zeta: complex, rng_seed=None) -> SymbolBlock:
    grid = _grid(mask)
    rng = as_generator(rng_seed)
    idx = rng.integers(0, constellation.order, size=grid.shape)
    idx[grid] = -1
    symbols = np.where(grid, complex(zeta), constellation.points[np.maximum(idx, 0)])
    return SymbolBlock(symbols.astype(complex), idx)


def transmit(s, theta: np.ndarray, N0: float, rng_seed=None) -> np.ndarray:
    """``r = s * exp(j theta) + n`` with ``n`` ~ CN(0, N0)."""
    s = s.symbols if isinstance(s, SymbolBlock) else np.asarray(s)
    if s.shape != theta.shape:
        raise ValueError(f"shape mismatch: symbols {s.shape}, phases {theta.shape}")
    if N0 < 0:
        raise ValueError("N0 must be nonnegative")
    rng = as_generator(rng_seed)
    std = math.sqrt(N0 / 2.0)
    noise = std * (rng.standard_normal(s.shape) + 1j * rng.standard_normal(s.shape))
    return s * np.exp(1j * theta) + noise


def _grid(mask) -> np.ndarray:
    return np.asarray(getattr(mask, "grid", mask), dtype=bool)


def _write_matrix_csv(path, matrix: np.ndarray) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.atleast_2d(matrix):
            w.writerow([f"{x:.17g}" for x in row])
