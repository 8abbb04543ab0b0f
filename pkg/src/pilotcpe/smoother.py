"""
Extended Kalman smoothing of multichannel phase noise.

The covariance recursions do not depend on the received samples, so the
smoothed-error covariance (and hence the phase MSE) of any pilot mask is
available without simulation:

    M_{k|k-1} = M_{k-1|k-1} + Q
    M_{k|k}   = (I + M_{k|k-1} V_k)^{-1} M_{k|k-1}
    A_k       = M_{k|k} M_{k+1|k}^{-1}
    M_{k|N}   = M_{k|k} + A_k (M_{k+1|N} - M_{k+1|k}) A_k^T

with ``V_k = diag(|s~_{i,k}|^2 / sigma~^2_{i,k})`` and
``M_{1|1} = diag(sigma~^2_{i,1} / Es)``.

Internally everything is batched over a leading axis so a whole GA
population or a batch of Monte-Carlo blocks runs through one time loop.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .model import SystemConfig

log = logging.getLogger(__name__)


@dataclass
class MeasurementInfo:
    """Effective symbols and noise variances seen by the smoother (``M x N``)."""

    symbols: np.ndarray
    variances: np.ndarray

    @property
    def precision(self) -> np.ndarray:
        """Diagonals of ``V_k`` stacked as an ``M x N`` array."""
        return np.abs(self.symbols) ** 2 / self.variances


def pilot_measurement_info(mask, config: SystemConfig) -> MeasurementInfo:
    """First-iteration information: pilots known, data replaced by prior statistics."""
    grid = np.asarray(getattr(mask, "grid", mask), dtype=bool)
    N0, Es = config.noise_psd, config.symbol_energy
    symbols = np.where(grid, config.zeta, 0.0 + 0.0j)
    variances = np.where(grid, N0 / 2.0, (N0 + Es) / 2.0)
    return MeasurementInfo(symbols, variances)


@dataclass
class SmootherTrace:
    """Per-slot covariance matrices of one block, each ``N x M x M``.

    ``predicted[0]`` is undefined (NaN); ``gains`` has ``N - 1`` entries.
    """

    predicted: np.ndarray
    filtered: np.ndarray
    smoothed: np.ndarray
    gains: np.ndarray
    used_pinv: bool = False

    @property
    def objective(self) -> float:
        return float(np.trace(self.smoothed, axis1=1, axis2=2).sum())

    def traces(self) -> dict:
        return {
            "tr_pred": np.trace(self.predicted, axis1=1, axis2=2),
            "tr_filt": np.trace(self.filtered, axis1=1, axis2=2),
            "tr_smooth": np.trace(self.smoothed, axis1=1, axis2=2),
        }

    def to_csv(self, path) -> None:
        t = self.traces()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "tr_pred", "tr_filt", "tr_smooth"])
            for k in range(self.filtered.shape[0]):
                pred = "" if k == 0 else f"{t['tr_pred'][k]:.12g}"
                w.writerow([k + 1, pred, f"{t['tr_filt'][k]:.12g}", f"{t['tr_smooth'][k]:.12g}"])


@dataclass
class PhaseEstimates:
    smoothed: np.ndarray
    filtered: np.ndarray


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _gain(filt: np.ndarray, pred: np.ndarray) -> tuple[np.ndarray, bool]:
    # A = F P^{-1} = (P^{-1} F)^T for symmetric F, P
    try:
        return np.swapaxes(np.linalg.solve(pred, filt), -1, -2), False
    except np.linalg.LinAlgError:
        return filt @ np.linalg.pinv(pred, hermitian=True), True


def _forward(precision: np.ndarray, m11: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Filtered covariances, shape ``(B, N, M, M)``.

    ``precision`` is ``(B, N, M)``; ``m11`` is ``(B, M)``.
    """
    B, N, M = precision.shape
    eye = np.eye(M)
    filt = np.empty((B, N, M, M))
    P = np.zeros((B, M, M))
    P[:, np.arange(M), np.arange(M)] = m11
    filt[:, 0] = P
    observed = precision.any(axis=(0, 2))
    for k in range(1, N):
        pred = P + Q
        if observed[k]:
            v = precision[:, k, None, :]
            P = _sym(np.linalg.solve(eye + pred * v, pred))
        else:
            P = pred
        filt[:, k] = P
    return filt


def _backward(filt: np.ndarray, Q: np.ndarray, keep: bool):
    """RTS pass. Returns smoothed traces ``(B, N)``, gains, smoothed matrices."""
    B, N, M, _ = filt.shape
    traces = np.empty((B, N))
    gains = np.empty((B, max(N - 1, 0), M, M)) if keep else None
    smoothed = np.empty_like(filt) if keep else None
    S = filt[:, -1]
    traces[:, -1] = np.trace(S, axis1=1, axis2=2)
    if keep:
        smoothed[:, -1] = S
    used_pinv = False
    for k in range(N - 2, -1, -1):
        F = filt[:, k]
        pred = F + Q
        A, flag = _gain(F, pred)
        used_pinv |= flag
        S = _sym(F + A @ (S - pred) @ np.swapaxes(A, -1, -2))
        traces[:, k] = np.trace(S, axis1=1, axis2=2)
        if keep:
            gains[:, k] = A
            smoothed[:, k] = S
    if used_pinv:
        log.warning("singular predicted covariance; pseudo-inverse used for smoother gain")
    return traces, gains, smoothed, used_pinv


def smoothed_traces(precision: np.ndarray, m11: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Batched ``tr(M_{k|N})``, shape ``(B, N)``."""
    filt = _forward(precision, m11, Q)
    return _backward(filt, Q, keep=False)[0]


def mask_objective_batch(grids: np.ndarray, config: SystemConfig, Q: np.ndarray | None = None) -> np.ndarray:
    """Objective ``sum_k tr(M_{k|N})`` for a stack of ``(B, M, N)`` pilot grids."""
    grids = np.asarray(grids, dtype=bool)
    if grids.ndim == 2:
        grids = grids[None]
    if Q is None:
        Q = config.process_noise_cov().matrix
    N0, Es = config.noise_psd, config.symbol_energy
    prec = np.where(grids, abs(config.zeta) ** 2 / (N0 / 2.0), 0.0)
    var1 = np.where(grids[:, :, 0], N0 / 2.0, (N0 + Es) / 2.0)
    traces = smoothed_traces(np.swapaxes(prec, 1, 2), var1 / Es, Q)
    return traces.sum(axis=1)


def mask_objective(mask, config: SystemConfig) -> float:
    grid = np.asarray(getattr(mask, "grid", mask), dtype=bool)
    return float(mask_objective_batch(grid[None], config)[0])


def covariance_smoother(mask, config: SystemConfig, info: MeasurementInfo | None = None) -> SmootherTrace:
    """Run the covariance recursions for one block.

    ``info`` defaults to the pilot-only information implied by ``mask``;
    later detection iterations pass refined data statistics instead.
    """
    if info is None:
        info = pilot_measurement_info(mask, config)
    Q = config.process_noise_cov().matrix
    M, N = info.symbols.shape
    if Q.shape[0] != M:
        raise ValueError(f"mask has {M} channels, config has {Q.shape[0]}")
    precision = info.precision.T[None]
    m11 = (info.variances[:, 0] / config.symbol_energy)[None]
    filt = _forward(precision, m11, Q)
    _, gains, smoothed, used_pinv = _backward(filt, Q, keep=True)
    pred = np.full_like(filt[0], np.nan)
    pred[1:] = filt[0, :-1] + Q
    return SmootherTrace(pred, filt[0], smoothed[0], gains[0], used_pinv)


def initial_phase(r: np.ndarray, symbols: np.ndarray) -> np.ndarray:
    """Slot-1 phase anchor ``arg(r conj(s~))``; zero where ``s~ = 0``."""
    ref = r[..., 0] * np.conj(symbols[..., 0])
    return np.where(np.abs(symbols[..., 0]) > 0, np.angle(ref), 0.0)


def _state_pass(r, symbols, variances, theta0, filt, gains):
    """Batched mean recursions. Arrays are ``(B, M, N)``; returns smoothed, filtered."""
    B, M, N = r.shape
    weight = np.conj(symbols) / variances
    theta_f = np.empty((B, M, N))
    theta_f[:, :, 0] = theta0
    th = theta0
    active = np.abs(symbols).any(axis=(0, 1))
    for k in range(1, N):
        if active[k]:
            u = np.imag(r[:, :, k] * weight[:, :, k] * np.exp(-1j * th))
            th = th + np.einsum("bij,bj->bi", filt[:, k], u)
        theta_f[:, :, k] = th
    theta_s = np.empty_like(theta_f)
    theta_s[:, :, -1] = theta_f[:, :, -1]
    for k in range(N - 2, -1, -1):
        diff = theta_s[:, :, k + 1] - theta_f[:, :, k]
        theta_s[:, :, k] = theta_f[:, :, k] + np.einsum("bij,bj->bi", gains[:, k], diff)
    return theta_s, theta_f


def smooth_batch(r, symbols, variances, config: SystemConfig, theta0=None):
    """Covariance and mean smoothing for a batch of blocks ``(B, M, N)``.

    Returns ``(theta_smoothed, theta_filtered, smoothed_traces)``.
    """
    Q = config.process_noise_cov().matrix
    precision = np.swapaxes(np.abs(symbols) ** 2 / variances, 1, 2)
    m11 = variances[:, :, 0] / config.symbol_energy
    filt = _forward(precision, m11, Q)
    traces, gains, _, _ = _backward(filt, Q, keep=True)
    if theta0 is None:
        theta0 = initial_phase(r, symbols)
    theta_s, theta_f = _state_pass(r, symbols, variances, theta0, filt, gains)
    return theta_s, theta_f, traces


def state_smoother(r: np.ndarray, info: MeasurementInfo, config: SystemConfig,
                   trace: SmootherTrace | None = None, theta0=None) -> PhaseEstimates:
    """Extended Kalman smoothing of the phase trajectory of one block.

    The update uses the linearized innovation
    ``u_i = Im{r_i conj(s~_i) exp(-j theta_pred_i)} / sigma~^2_i`` and the
    gain ``M_{k|k}``; the backward pass reuses the RTS gains of ``trace``.
    """
    r = np.asarray(r)
    if r.shape != info.symbols.shape:
        raise ValueError(f"shape mismatch: r {r.shape}, info {info.symbols.shape}")
    if trace is None:
        trace = covariance_smoother(None, config, info)
    if theta0 is None:
        theta0 = initial_phase(r, info.symbols)
    theta_s, theta_f = _state_pass(
        r[None], info.symbols[None], info.variances[None], np.asarray(theta0)[None],
        trace.filtered[None], trace.gains[None],
    )
    return PhaseEstimates(theta_s[0], theta_f[0])


def wrap_phase(x):
    """Wrap into ``[-pi, pi)``."""
    return np.mod(np.asarray(x) + np.pi, 2.0 * np.pi) - np.pi


def wrapped_mse(theta_hat, theta) -> float:
    theta_hat, theta = np.asarray(theta_hat), np.asarray(theta)
    if theta_hat.shape != theta.shape:
        raise ValueError("shape mismatch")
    return float(np.mean(wrap_phase(theta_hat - theta) ** 2))
