"""Spectral primitives: DFT conventions, circular ops, support windows."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hqdeblur.spectral import (
    Shift2D,
    SupportMask,
    circular_convolve,
    circular_shift,
    dft2,
    embed,
    idft2,
    log_sum_exp,
    project,
    restrict,
)
from oracles import brute_circular_convolve


class TestDft:
    def test_impulse_at_origin_has_flat_unit_spectrum(self):
        g = np.zeros((8, 6))
        g[0, 0] = 1.0
        assert np.allclose(dft2(g), np.ones((8, 6)), atol=1e-14)

    def test_roundtrip_identity(self):
        rng = np.random.default_rng(0)
        g = rng.normal(size=(13, 7))
        assert np.allclose(idft2(dft2(g)), g, atol=1e-12)

    def test_parseval_with_unnormalized_forward(self):
        """HW * ||g||^2 == ||dft2(g)||^2 under this DFT convention."""
        rng = np.random.default_rng(1)
        for _ in range(20):
            h, w = rng.integers(1, 24, size=2)
            g = rng.normal(size=(h, w))
            lhs = h * w * np.sum(g * g)
            rhs = np.sum(np.abs(dft2(g)) ** 2)
            assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))

    def test_batched_transform_matches_per_plane(self):
        rng = np.random.default_rng(2)
        g = rng.normal(size=(3, 9, 11))
        batched = dft2(g)
        for c in range(3):
            assert np.allclose(batched[c], dft2(g[c]))

    def test_rejects_non_finite_and_bad_rank(self):
        with pytest.raises(ValueError):
            dft2(np.array([1.0, 2.0]))
        bad = np.ones((4, 4))
        bad[2, 2] = np.nan
        with pytest.raises(ValueError):
            dft2(bad)

    def test_idft2_reports_imaginary_residue(self):
        G = dft2(np.random.default_rng(3).normal(size=(8, 8)))
        _, resid = idft2(G, with_imag=True)
        assert resid < 1e-12
        # a deliberately non-Hermitian spectrum leaves a visible residue
        _, resid = idft2(G + 1j, with_imag=True)
        assert resid > 1e-3


class TestSupport:
    def test_embed_restrict_roundtrip(self):
        rng = np.random.default_rng(4)
        small = rng.normal(size=(3, 5))
        grid = embed(small, (10, 12))
        assert grid.shape == (10, 12)
        assert np.array_equal(restrict(grid, SupportMask.at_origin(3, 5)), small)
        assert np.sum(grid != 0) == np.sum(small != 0)

    def test_embed_respects_anchor(self):
        mask = SupportMask(2, 3, 2, 2)
        grid = embed(np.ones((2, 2)), (6, 8), mask)
        assert grid[2, 3] == 1.0 and grid[3, 4] == 1.0
        assert grid.sum() == 4.0

    def test_project_is_idempotent_and_matches_embed_restrict(self):
        rng = np.random.default_rng(5)
        g = rng.normal(size=(9, 9))
        mask = SupportMask(1, 2, 4, 3)
        once = project(g, mask)
        assert np.array_equal(project(once, mask), once)
        assert np.array_equal(once, embed(restrict(g, mask), g.shape, mask))

    def test_oversized_support_rejected(self):
        with pytest.raises(ValueError):
            SupportMask.at_origin(5, 5).validate_for((4, 8))
        with pytest.raises(ValueError):
            embed(np.ones((5, 5)), (4, 4))
        with pytest.raises(ValueError):
            SupportMask(0, 0, 0, 3)


class TestCircularConvolve:
    def test_matches_brute_force_oracle(self):
        """Spectral path agrees with the O(n^4) spatial definition."""
        rng = np.random.default_rng(6)
        for _ in range(12):
            h, w = rng.integers(4, 17, size=2)
            kh = int(rng.integers(1, h + 1))
            kw = int(rng.integers(1, w + 1))
            a = rng.normal(size=(h, w))
            k = rng.normal(size=(kh, kw))
            fast = circular_convolve(a, k)
            slow = brute_circular_convolve(a, k)
            assert np.max(np.abs(fast - slow)) < 1e-10

    def test_delta_kernel_is_identity(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(8, 8))
        delta = np.zeros((3, 3))
        delta[0, 0] = 1.0
        assert np.allclose(circular_convolve(a, delta), a, atol=1e-12)

    def test_kernel_larger_than_grid_rejected(self):
        with pytest.raises(ValueError):
            circular_convolve(np.ones((4, 4)), np.ones((5, 5)))


class TestShift:
    @given(
        dy=st.integers(-30, 30),
        dx=st.integers(-30, 30),
        seed=st.integers(0, 2**16),
    )
    @settings(max_examples=40, deadline=None)
    def test_shift_then_negate_is_identity(self, dy, dx, seed):
        g = np.random.default_rng(seed).normal(size=(7, 9))
        s = Shift2D(dy, dx)
        assert np.array_equal(circular_shift(circular_shift(g, s), s.negate()), g)

    def test_composition_adds(self):
        g = np.random.default_rng(8).normal(size=(6, 6))
        a, b = Shift2D(2, -1), Shift2D(-5, 4)
        lhs = circular_shift(circular_shift(g, a), b)
        rhs = circular_shift(g, Shift2D(a.dy + b.dy, a.dx + b.dx))
        assert np.array_equal(lhs, rhs)

    def test_canonical_range(self):
        s = Shift2D(7, -7).canonical_for((8, 8))
        assert s == Shift2D(-1, 1)
        s = Shift2D(4, 4).canonical_for((8, 8))
        assert (s.dy, s.dx) == (-4, -4)
        g = np.random.default_rng(9).normal(size=(8, 8))
        assert np.array_equal(
            circular_shift(g, Shift2D(7, -7)),
            circular_shift(g, Shift2D(7, -7).canonical_for(g.shape)),
        )


class TestLogSumExp:
    def test_matches_direct_formula_in_safe_range(self):
        rng = np.random.default_rng(10)
        v = rng.normal(size=(5, 5))
        assert abs(log_sum_exp(v) - np.log(np.sum(np.exp(v)))) < 1e-12

    def test_stable_for_huge_inputs(self):
        v = np.array([1000.0, 1000.0])
        assert abs(log_sum_exp(v) - (1000.0 + np.log(2.0))) < 1e-12
        v = np.array([-1000.0, -1001.0])
        assert np.isfinite(log_sum_exp(v))

    def test_rejects_empty_and_non_finite(self):
        with pytest.raises(ValueError):
            log_sum_exp(np.array([]))
        with pytest.raises(ValueError):
            log_sum_exp(np.array([1.0, np.inf]))
