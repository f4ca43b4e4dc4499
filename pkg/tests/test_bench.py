"""Complexity benchmark harness."""
import numpy as np
import pytest

from cesst.bench import BENCH_HEADER, bench_csv, bench_scaling, grid_for, linear_r2


class TestLinearR2:
    def test_perfect_line(self):
        assert abs(linear_r2([1, 2, 3, 4], [3, 5, 7, 9]) - 1.0) <= 1e-12

    def test_against_correlation(self, rng):
        x, y = rng.random(20), rng.random(20)
        assert abs(linear_r2(x, y) - np.corrcoef(x, y)[0, 1] ** 2) <= 1e-12

    def test_quadratic_is_imperfect(self):
        x = np.array([64, 256, 1024, 4096], float)
        assert linear_r2(x, x ** 2) < 0.98


class TestGrid:
    @pytest.mark.parametrize("n,m,expected", [(64, 4, (8, 8)), (256, 4, (16, 16)), (128, 4, (8, 16)),
                                              (4096, 4, (64, 64))])
    def test_examples(self, n, m, expected):
        assert grid_for(n, m) == expected

    def test_impossible(self):
        with pytest.raises(ValueError):
            grid_for(18, 4)


class TestBench:
    def test_small_run(self):
        rows, r2 = bench_scaling(["window", "spectral", "global"], [16, 64], C=4, heads=2, M=4, repeats=1,
                                 batch=1)
        assert len(rows) == 6 and set(r2) == {"window", "spectral", "global"}
        g = [r for r in rows if r.variant == "global"]
        assert g[1].macs_scores == 16 * g[0].macs_scores
        w = [r for r in rows if r.variant == "window"]
        assert w[1].macs_total == 4 * w[0].macs_total
        lines = bench_csv(rows, r2).strip().split("\n")
        assert lines[0].split(",") == BENCH_HEADER + ["linear_r2"] and len(lines) == 7

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            bench_scaling(["window"], [256, 64])
        with pytest.raises(ValueError):
            bench_scaling(["dense"], [64])
