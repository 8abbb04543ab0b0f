import math

import numpy as np
import pytest

from pilotcpe.air import air_gain_table, estimate_air, estimate_gmi, family_mask, sweep_pilot_rate
from pilotcpe.detection import compute_llrs
from pilotcpe.model import SystemConfig, generate_symbol_block, make_constellation, transmit
from pilotcpe.patterns import PilotMask, heuristic

CFG = SystemConfig(num_channels=2, block_length=400, snr_db=20.0, alpha=1.0)


class TestGmi:
    @pytest.mark.parametrize("m", [6, 8, 10])
    def test_zero_llrs(self, m):
        assert estimate_gmi(np.zeros((100, m)), np.zeros((100, m), int)) == 0.0

    def test_perfect_llrs(self):
        bits = np.random.default_rng(0).integers(0, 2, (50, 6))
        assert estimate_gmi(40.0 * (1 - 2 * bits), bits) == pytest.approx(6.0, abs=1e-15)

    def test_clamped_at_zero(self):
        bits = np.zeros((10, 6), int)
        assert estimate_gmi(np.full((10, 6), -20.0), bits) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            estimate_gmi(np.zeros((3, 6)), np.zeros((4, 6)))

    def test_global_phase_invariance(self):
        c = make_constellation(64)
        grid = np.zeros((2, 300), bool)
        blk = generate_symbol_block(grid, c, 1.0, 1)
        theta = np.random.default_rng(2).uniform(0, 6, (2, 300))
        r = transmit(blk, theta, 0.02, 3)
        a = compute_llrs(r, theta, grid, c, 0.02)
        b = compute_llrs(r * np.exp(1.3j), theta + 1.3, grid, c, 0.02)
        bits = a.true_bits(blk.indices, c)
        assert estimate_gmi(b, bits) == pytest.approx(estimate_gmi(a, bits), abs=1e-9)


class TestEstimateAir:
    def test_all_pilots(self):
        res = estimate_air(CFG, PilotMask.full(2, 400), 64, runs=3)
        assert res.air_bits_per_symbol == 0.0 and res.pilot_rate == 1.0

    def test_reproducible(self):
        mask = heuristic("S1", 4, 2, 400)
        a = estimate_air(CFG, mask, 64, runs=4, seed=9)
        b = estimate_air(CFG, mask, 64, runs=4, seed=9)
        assert a == b

    def test_invariants(self):
        mask = heuristic("S4", 4, 2, 400)
        res = estimate_air(CFG, mask, 64, runs=4)
        assert 0 <= res.air_bits_per_symbol <= res.gmi_bits_per_symbol <= 6
        assert res.air_bits_per_symbol == pytest.approx((1 - res.pilot_rate) * res.gmi_bits_per_symbol, rel=1e-15)
        assert res.num_symbols == 4 * (~mask.grid).sum()

    def test_genie_no_pilots_is_awgn(self):
        c = CFG.replace(linewidth_hz=0.0)
        genie = estimate_air(c, PilotMask.empty(2, 400), 64, runs=6, genie=True)
        assert genie.air_bits_per_symbol == genie.gmi_bits_per_symbol
        # with no phase noise and plenty of pilots the receiver is nearly genie-aided
        est = estimate_air(c, heuristic("S1", 40, 2, 400), 64, runs=6)
        assert est.gmi_bits_per_symbol == pytest.approx(genie.gmi_bits_per_symbol, abs=0.05)

    def test_ci_scaling(self):
        mask = heuristic("S1", 4, 2, 400)
        a = estimate_air(CFG, mask, 64, runs=40, seed=1, num_iters=1)
        b = estimate_air(CFG, mask, 64, runs=80, seed=1, num_iters=1)
        assert a.ci_halfwidth / b.ci_halfwidth == pytest.approx(math.sqrt(2), rel=0.2)

    def test_ci_stopping(self):
        res = estimate_air(CFG, heuristic("S1", 4, 2, 400), 64, runs=200, ci_target=0.5, min_blocks=8)
        assert res.num_blocks == 8 and res.ci_halfwidth <= 0.5

    def test_rejects_zero_runs(self):
        with pytest.raises(ValueError):
            estimate_air(CFG, PilotMask.empty(2, 400), 64, runs=0)


class TestSweeps:
    def test_sweep_argmax_consistent(self):
        sw = sweep_pilot_rate(CFG, "S1", [0.005, 0.02], 64, runs=2)
        airs = [p[1].air_bits_per_symbol for p in sw.points]
        assert sw.max_air == max(airs)
        assert sw.argmax_rate == sw.points[int(np.argmax(airs))][1].pilot_rate

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            sweep_pilot_rate(CFG, "S1", [], 64)

    def test_out_of_range_rate(self):
        with pytest.raises(ValueError):
            sweep_pilot_rate(CFG, "S5", [0.9], 64, runs=1)

    def test_random_family(self):
        a = family_mask("Urnd", 3, 2, 50, seed=4)
        assert a == family_mask("urnd", 3, 2, 50, seed=4)
        np.testing.assert_array_equal(a.per_channel(), 3)

    def test_gain_table(self):
        rows = air_gain_table([(64, 2, 20.0, 1.0)], CFG, [0.01], runs=2)
        r = rows[0]
        assert r.gain == pytest.approx(r.s4.max_air - r.s1.max_air)
        assert r.ci >= 0
