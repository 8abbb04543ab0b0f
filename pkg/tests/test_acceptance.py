"""Acceptance gate: twelve criteria at their stated tolerances.

Each test records one PASS/FAIL line (printed in the terminal summary)
before asserting. Runtime is dominated by the GA runs (criteria 4-6)
and the AIR sweeps (criteria 8-9); expect 15-25 minutes on one core.
"""

import itertools
import math

import numpy as np
import pytest
from scipy.stats import spearmanr

from oracles import conditioning_objective, dense_mc_gmi
from pilotcpe.air import estimate_air, sweep_pilot_rate
from pilotcpe.model import SystemConfig, make_constellation, sample_phase_trajectory, transmit, generate_symbol_block
from pilotcpe.optimizer import GaConfig, optimize_structured, optimize_unstructured
from pilotcpe.patterns import PilotMask, heuristic, random_distribution
from pilotcpe.rng import NOISE, PHASE, SYMBOLS, derive_rng
from pilotcpe.smoother import (
    covariance_smoother,
    mask_objective,
    mask_objective_batch,
    pilot_measurement_info,
    smooth_batch,
    wrap_phase,
)

pytestmark = pytest.mark.slow

HEURISTIC_NAMES = ("S1", "S2", "S3", "S4", "S5")
RATE_GRID = [0.002, 0.005, 0.01, 0.02, 0.05]


def desk(**kw):
    base = dict(num_channels=4, block_length=1000, snr_db=25.0, alpha=1.0)
    base.update(kw)
    return SystemConfig(**base)


# ---------------------------------------------------------------- shared runs

_SOPT: dict = {}


def s_opt(snr_db, alpha):
    """Structured GA optimum at M=4, N=1000, kappa=10 (default budget), memoized."""
    key = (snr_db, alpha)
    if key not in _SOPT:
        _SOPT[key] = optimize_structured(desk(snr_db=snr_db, alpha=alpha), 10, GaConfig()).best_J
    return _SOPT[key]


def heuristic_J(name, cfg, kappa=10):
    return mask_objective(heuristic(name, kappa, cfg.num_channels, cfg.block_length), cfg)


_SWEEPS: dict = {}


def air_sweep(family, alpha):
    key = (family, alpha)
    if key not in _SWEEPS:
        _SWEEPS[key] = sweep_pilot_rate(desk(alpha=alpha), family, RATE_GRID, 256, runs=300, seed=0)
    return _SWEEPS[key]


# ---------------------------------------------------------------- criteria

def test_criterion_01_oracle_equivalence(verdict):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for n in range(50):
        M = 2 if n < 25 else 4
        N = int(rng.integers(1, 7 if M == 2 else 5))
        alpha = [0.0, 0.5, 1.0][n % 3]
        cfg = SystemConfig(num_channels=M, block_length=N, snr_db=float(rng.uniform(5, 30)), alpha=alpha,
                           linewidth_hz=float(rng.uniform(1e5, 5e6)), symbol_rate_baud=1e9)
        grid = rng.random((M, N)) < rng.uniform(0.1, 0.9)
        got = covariance_smoother(grid, cfg).objective
        want = conditioning_objective(grid, cfg)
        worst = max(worst, abs(got - want) / want)
    assert verdict("criterion 1", worst <= 1e-9, f"max relative error {worst:.2e} over 50 instances (tol 1e-9)")


def test_criterion_02_closed_form(verdict):
    cfg = desk(block_length=100)
    grid = np.zeros((4, 100), dtype=bool)
    grid[:, 0] = True
    tr = covariance_smoother(grid, cfg)
    m11 = 4 * (cfg.noise_psd / 2) / cfg.symbol_energy
    want = 100 * m11 + np.trace(cfg.process_noise_cov().matrix) * 100 * 99 / 2
    rel = abs(tr.objective - want) / want
    assert verdict("criterion 2", rel <= 1e-12, f"relative error {rel:.2e} (tol 1e-12)")


def test_criterion_03_linearized_consistency(verdict):
    cfg = desk()
    assert cfg.phase_variance / (2 * math.pi) == pytest.approx(1e-5)
    mask = heuristic("S4", 10, 4, 1000)
    info = pilot_measurement_info(mask, cfg)
    const = make_constellation(256)
    cov = cfg.process_noise_cov()
    errs = []
    for b0 in range(0, 240, 40):
        rs, ths = [], []
        for b in range(b0, b0 + 40):
            theta = sample_phase_trajectory(cov, 1000, derive_rng(7, PHASE, b))
            blk = generate_symbol_block(mask, const, cfg.zeta, derive_rng(7, SYMBOLS, b))
            rs.append(transmit(blk, theta, cfg.noise_psd, derive_rng(7, NOISE, b)))
            ths.append(theta)
        r = np.stack(rs)
        est, _, _ = smooth_batch(r, np.broadcast_to(info.symbols, r.shape),
                                 np.broadcast_to(info.variances, r.shape), cfg)
        errs.append(np.mean(wrap_phase(est - np.stack(ths)) ** 2, axis=(1, 2)))
    mse = float(np.mean(np.concatenate(errs)))
    predicted = mask_objective(mask, cfg) / 4000
    ratio = mse / predicted
    ok = abs(ratio - 1) <= 0.15
    assert verdict("criterion 3", ok, f"MC MSE / (J/MN) = {ratio:.4f} over 240 blocks (tol +-15%)")


def test_criterion_04_structured_vs_unstructured(verdict):
    gaps = []
    for alpha, snr in itertools.product([0.0, 0.25, 0.5, 0.75, 1.0], [15.0, 20.0, 25.0]):
        cfg = desk(block_length=100, snr_db=snr, alpha=alpha)
        js = optimize_structured(cfg, 5, GaConfig()).best_J
        ju = optimize_unstructured(cfg, 20, GaConfig()).best_J
        gaps.append((js - ju) / ju)
    mean = float(np.mean(gaps))
    ok = -0.02 <= mean <= 0.05
    assert verdict("criterion 4", ok, f"mean (J_Sopt - J_Uopt)/J_Uopt = {mean:+.4f} "
                                      f"(range {min(gaps):+.4f}..{max(gaps):+.4f}; need [-0.02, 0.05])")


def test_criterion_05_heuristic_orderings(verdict):
    checks = []
    for alpha in (0.0, 0.5, 1.0):
        cfg = desk(alpha=alpha)
        J = {n: heuristic_J(n, cfg) for n in HEURISTIC_NAMES}
        opt = s_opt(25.0, alpha)
        checks.append((f"a@{alpha}: S4/Sopt={J['S4'] / opt:.4f}", J["S4"] <= 1.05 * opt))
        if alpha == 0.0:
            checks.append((f"b: S2/Sopt={J['S2'] / opt:.4f}", J["S2"] <= 1.05 * opt))
            checks.append((f"d: S5>S1>S4 ({J['S5']:.3f}>{J['S1']:.3f}>{J['S4']:.3f})",
                           J["S5"] > J["S1"] > J["S4"]))
        if alpha == 1.0:
            checks.append((f"c: S3/Sopt={J['S3'] / opt:.4f}", J["S3"] <= 1.05 * opt))
            checks.append((f"e: S1>S4 ({J['S1']:.3f}>{J['S4']:.3f})", J["S1"] > J["S4"]))
    ok = all(c for _, c in checks)
    failed = [d for d, c in checks if not c]
    assert verdict("criterion 5", ok, "; ".join(d for d, _ in checks) + (f"; failed: {failed}" if failed else ""))


def test_criterion_06_low_snr_collapse(verdict):
    ratios = {}
    for alpha in (0.0, 1.0):
        cfg = desk(snr_db=10.0, alpha=alpha)
        Js = [heuristic_J(n, cfg) for n in ("S1", "S2", "S3", "S4")] + [s_opt(10.0, alpha)]
        ratios[alpha] = max(Js) / min(Js)
    ok = all(r <= 1.10 for r in ratios.values())
    assert verdict("criterion 6", ok, ", ".join(f"alpha={a}: max/min={r:.4f}" for a, r in ratios.items())
                   + " (tol 1.10)")


def test_criterion_07_reduction_trend(verdict):
    corner = dict(alpha=1.0, snr_db=30.0, linewidth_hz=1e6, num_channels=16)
    axes = {"alpha": [0.0, 1 / 3, 2 / 3, 1.0], "snr_db": [15.0, 20.0, 25.0, 30.0],
            "linewidth_hz": [100e3, 200e3, 500e3, 1e6], "num_channels": [2, 4, 8, 16]}

    def reduction(**kw):
        cfg = desk(**{**corner, **kw})
        return 1.0 - heuristic_J("S4", cfg) / heuristic_J("S1", cfg)

    rhos = {}
    for axis, values in axes.items():
        red = [reduction(**{axis: v}) for v in values]
        rhos[axis] = spearmanr(values, red).statistic
    at_corner = reduction()
    ok = all(r >= 0.9 for r in rhos.values()) and at_corner > 0.5
    detail = ", ".join(f"rho[{a}]={r:.2f}" for a, r in rhos.items())
    assert verdict("criterion 7", ok, f"{detail}; corner reduction {100 * at_corner:.1f}% (need rho>=0.9, >50%)")


def test_criterion_08_air_interior_maximum(verdict):
    sw = air_sweep("S1", 1.0)
    pts = [res for _, res in sw.points]
    i = int(np.argmax([p.air_bits_per_symbol for p in pts]))
    best = pts[i]
    margins = [best.air_bits_per_symbol - p.air_bits_per_symbol - 2 * max(p.ci_halfwidth, best.ci_halfwidth)
               for p in (pts[0], pts[-1])]
    ok = 0 < i < len(pts) - 1 and all(m > 0 for m in margins)
    desc = ", ".join(f"{r:g}:{p.air_bits_per_symbol:.4f}+-{p.ci_halfwidth:.4f}" for r, p in zip(RATE_GRID, pts))
    assert verdict("criterion 8", ok, f"S1 AIR by rate [{desc}]; argmax {RATE_GRID[i]:g}; "
                                      f"endpoint margins beyond 2 CI {margins[0]:.4f}, {margins[1]:.4f}")


def test_criterion_09_air_gain_sign(verdict):
    parts, ok = [], True
    for alpha in (0.0, 1.0):
        s1, s4 = air_sweep("S1", alpha), air_sweep("S4", alpha)
        gain = s4.max_air - s1.max_air
        ci = math.hypot(s1.best[1].ci_halfwidth, s4.best[1].ci_halfwidth)
        ok &= gain >= 0
        if alpha == 1.0:
            ok &= gain > ci
        parts.append(f"alpha={alpha}: gain {gain:+.4f} (CI {ci:.4f}; S1 @{s1.argmax_rate:g}, S4 @{s4.argmax_rate:g})")
    assert verdict("criterion 9", ok, "; ".join(parts) + " (need >=0, and >CI at alpha=1)")


@pytest.mark.parametrize("order,snr", [(64, 20.0), (256, 25.0)])
def test_criterion_10_gmi_oracle(order, snr, verdict):
    cfg = desk(num_channels=2, block_length=5000, snr_db=snr, linewidth_hz=0.0)
    res = estimate_air(cfg, PilotMask.empty(2, 5000), order, runs=100, seed=3, genie=True)
    ref = dense_mc_gmi(make_constellation(order), snr, num_symbols=10**7)
    diff = abs(res.gmi_bits_per_symbol - ref)
    assert verdict("criterion 10", diff <= 0.05, f"{order}QAM@{snr:g}dB: estimate {res.gmi_bits_per_symbol:.4f} "
                                                 f"vs oracle {ref:.4f} (|diff| {diff:.4f}, tol 0.05)")


def test_criterion_11_properties(verdict):
    rng = np.random.default_rng(11)
    notes, ok = [], True

    # pilot monotonicity on 200 nested mask pairs
    worst = -np.inf
    for n in range(200):
        M = int(rng.choice([2, 4, 6]))
        N = int(rng.integers(5, 60))
        cfg = SystemConfig(num_channels=M, block_length=N, snr_db=float(rng.uniform(5, 30)),
                           alpha=float(rng.uniform()), linewidth_hz=float(rng.uniform(1e5, 5e6)),
                           symbol_rate_baud=1e9)
        sub = rng.random((M, N)) < rng.uniform(0.02, 0.3)
        sup = sub | (rng.random((M, N)) < 0.1)
        j_sub, j_sup = mask_objective_batch(np.stack([sub, sup]), cfg)
        worst = max(worst, (j_sup - j_sub) / j_sub)
    ok &= worst <= 1e-12
    notes.append(f"monotone (max rel increase {worst:.1e})")

    # 4D-channel permutation invariance
    dev = 0.0
    for n in range(20):
        cfg = SystemConfig(num_channels=6, block_length=40, alpha=float(rng.uniform()), linewidth_hz=1e6,
                           symbol_rate_baud=1e9)
        grid = random_distribution(3, 6, 40, rng).grid
        perm = np.concatenate([[2 * p, 2 * p + 1] for p in rng.permutation(3)])
        dev = max(dev, abs(mask_objective(grid[perm], cfg) / mask_objective(grid, cfg) - 1))
    ok &= dev <= 1e-12
    notes.append(f"permutation (max rel dev {dev:.1e})")

    # PSD smoothed covariances
    min_eig = np.inf
    for name, alpha in itertools.product(HEURISTIC_NAMES, (0.0, 0.5, 1.0)):
        tr = covariance_smoother(heuristic(name, 5, 4, 200), desk(block_length=200, alpha=alpha))
        min_eig = min(min_eig, float(np.linalg.eigvalsh(tr.smoothed).min()))
    ok &= min_eig >= -1e-12
    notes.append(f"PSD (min eig {min_eig:.2e})")

    # GA vs exhaustive
    small = SystemConfig(num_channels=2, block_length=20, snr_db=20.0, alpha=0.5, linewidth_hz=2e6,
                         symbol_rate_baud=1e9)
    grids = []
    for d1, d2 in itertools.product(range(2, 21), repeat=2):
        g = np.zeros((2, 20), bool)
        g[:, 0] = True
        g[0, d1 - 1] = g[1, d2 - 1] = True
        grids.append(g)
    ex_s = mask_objective_batch(np.stack(grids), small).min()
    ga_s = optimize_structured(small, 2, GaConfig(rng_seed=1)).best_J
    tiny = small.replace(block_length=8)
    grids = []
    for a, b in itertools.combinations(range(16), 2):
        g = np.zeros(16, bool)
        g[[a, b]] = True
        grids.append(g.reshape(8, 2).T)
    ex_u = mask_objective_batch(np.stack(grids), tiny).min()
    ga_u = optimize_unstructured(tiny, 2, GaConfig(rng_seed=1)).best_J
    ok &= ga_s <= 1.01 * ex_s and ga_u <= 1.01 * ex_u
    notes.append(f"GA/exhaustive structured {ga_s / ex_s:.4f}, unstructured {ga_u / ex_u:.4f}")
    assert verdict("criterion 11", ok, "; ".join(notes))


HAND_SETS = {
    "S1": [{1, 41, 81}] * 4,
    "S2": [{1, 25, 73}, {1, 49, 97}, {1, 25, 73}, {1, 49, 97}],
    "S3": [{1, 14, 68}, {1, 28, 81}, {1, 41, 94}, {1, 54, 108}],
    "S4": [{1, 14, 68}, {1, 41, 94}, {1, 28, 81}, {1, 54, 108}],
    "S5": [{1, 14, 28, 41, 54, 68, 81, 94, 108}, {1}, {1}, {1}],
}


def test_criterion_12_heuristic_sets(verdict):
    bad = []
    for name, want in HAND_SETS.items():
        mask = heuristic(name, 3, 4, 120)
        got = [set(mask.channel_slots(i)) for i in range(1, 5)]
        if got != want:
            bad.append(f"{name}: {got}")
    assert verdict("criterion 12", not bad, "S1-S5 at (M=4, N=120, kappa=3) match hand sets"
                   + (f"; mismatches {bad}" if bad else ""))
