import math
import statistics
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from expomamba import spectral as sp
from expomamba.ndtensor import ShapeError


def _dft_loops(x):
    # textbook double sum, independent of the matrix form in naive_dft2
    c, h, w = x.shape
    out = np.zeros(x.shape, complex)
    for u in range(h):
        for v in range(w):
            for i in range(h):
                for j in range(w):
                    out[:, u, v] += x[:, i, j] * np.exp(-2j * np.pi * (u * i / h + v * j / w))
    return out


class TestFft2:
    def test_impulse(self):
        x = np.zeros((1, 4, 4))
        x[0, 0, 0] = 1.0
        np.testing.assert_allclose(sp.fft2(x), np.ones((1, 4, 4)), atol=1e-15)

    def test_constant(self):
        f = sp.fft2(np.full((1, 4, 4), 0.3))
        assert f[0, 0, 0] == pytest.approx(16 * 0.3, abs=1e-14)
        f[0, 0, 0] = 0
        assert np.abs(f).max() < 1e-14

    def test_against_double_sum(self, rng):
        x = rng.normal(size=(2, 4, 8))
        assert np.abs(sp.fft2(x) - _dft_loops(x)).max() < 1e-10

    @pytest.mark.parametrize("n", [8, 16, 32])
    def test_against_naive(self, rng, n):
        x = rng.normal(size=(3, n, n))
        assert np.abs(sp.fft2(x) - sp.naive_dft2(x)).max() < 1e-10

    def test_rectangular(self, rng):
        x = rng.normal(size=(1, 4, 16))
        assert np.abs(sp.fft2(x) - sp.naive_dft2(x)).max() < 1e-10

    def test_rejects_non_pow2(self):
        with pytest.raises(ShapeError):
            sp.fft2(np.ones((1, 6, 8)))

    def test_complex_input(self, rng):
        z = rng.normal(size=(1, 8, 8)) + 1j * rng.normal(size=(1, 8, 8))
        assert np.abs(sp.fft2(z) - sp.naive_dft2(z)).max() < 1e-10

    def test_linearity(self, rng):
        x, y = rng.normal(size=(2, 1, 16, 16))
        lhs = sp.fft2(2.5 * x - 0.7 * y)
        assert np.abs(lhs - (2.5 * sp.fft2(x) - 0.7 * sp.fft2(y))).max() < 1e-10

    def test_conjugate_symmetry(self, rng):
        x = rng.normal(size=(1, 8, 16))
        f = sp.fft2(x)
        mirrored = np.roll(f[:, ::-1, ::-1], (1, 1), axis=(1, 2))
        assert np.abs(f - np.conj(mirrored)).max() < 1e-10


class TestIfft2:
    def test_round_trip(self, rng):
        for n in (1, 2, 8, 64, 256):
            x = rng.normal(size=(1, n, n))
            assert np.abs(sp.ifft2(sp.fft2(x)) - x).max() < 1e-10

    def test_all_ones_to_impulse(self):
        x = sp.ifft2(np.ones((1, 4, 4), complex))
        expect = np.zeros((1, 4, 4))
        expect[0, 0, 0] = 1
        np.testing.assert_allclose(x, expect, atol=1e-15)

    def test_parseval(self, rng):
        x = rng.normal(size=(2, 16, 16))
        f = sp.fft2(x)
        assert np.sum(x ** 2) == pytest.approx(np.sum(np.abs(f) ** 2) / 256, abs=1e-9)

    def test_residue_error(self, rng):
        f = sp.fft2(rng.normal(size=(1, 8, 8)))
        f[0, 1, 2] += 5j
        with pytest.raises(sp.ResidueError):
            sp.ifft2(f)


class TestAmpPhase:
    def test_pythagorean(self):
        ap = sp.split_amp_phase(np.array([3 + 4j]))
        assert ap.amplitude[0] == 5.0
        assert ap.phase[0] == math.atan2(4, 3)

    def test_zero_bin(self):
        ap = sp.split_amp_phase(np.array([0j, -0.0 - 0.0j]))
        np.testing.assert_array_equal(ap.phase, [0.0, 0.0])

    def test_negative_real_axis(self):
        ap = sp.split_amp_phase(np.array([complex(-1.0, -0.0)]))
        assert ap.phase[0] == pytest.approx(np.pi)

    def test_merge_examples(self):
        np.testing.assert_allclose(sp.merge_amp_phase(sp.AmpPhase(np.array([1.0]), np.array([0.0]))), [1 + 0j])
        out = sp.merge_amp_phase(sp.AmpPhase(np.array([2.0]), np.array([np.pi / 2])))
        assert abs(out[0] - 2j) < 1e-12

    def test_merge_rejects_negative(self):
        with pytest.raises(ValueError):
            sp.merge_amp_phase(sp.AmpPhase(np.array([-1.0]), np.array([0.0])))

    @given(st.integers(0, 2 ** 32 - 1))
    def test_split_merge_inverse(self, seed):
        r = np.random.default_rng(seed)
        f = r.normal(size=(2, 4, 4)) + 1j * r.normal(size=(2, 4, 4))
        ap = sp.split_amp_phase(f)
        assert np.all(ap.amplitude >= 0)
        assert np.all((ap.phase > -np.pi) & (ap.phase <= np.pi))
        assert np.abs(sp.merge_amp_phase(ap) - f).max() < 1e-10


class TestPhaseShift:
    def test_zero_is_identity(self, rng):
        f = sp.fft2(rng.normal(size=(1, 8, 8)))
        np.testing.assert_array_equal(sp.uniform_phase_shift(f, 0.0), f)

    def test_pi_negates(self, rng):
        f = sp.fft2(rng.normal(size=(1, 8, 8)))
        assert np.abs(sp.uniform_phase_shift(f, np.pi) + f).max() < 1e-12

    @pytest.mark.parametrize("dphi", [0.1, 0.7, np.pi / 3, 2.0])
    def test_decomposition(self, rng, dphi):
        img = rng.uniform(size=(3, 16, 16))
        f = sp.fft2(img)
        lhs = sp.ifft2_complex(sp.uniform_phase_shift(f, dphi))
        rhs = math.cos(dphi) * img + math.sin(dphi) * sp.ifft2_complex(1j * f)
        assert np.abs(lhs - rhs).max() < 1e-9


class TestHelpers:
    def test_pad_pow2(self):
        assert sp.pad_pow2(np.ones((2, 5, 8))).shape == (2, 8, 8)

    def test_next_pow2(self):
        assert [sp.next_pow2(n) for n in (1, 2, 3, 17)] == [1, 2, 4, 32]

    def test_fftshift_moves_dc_to_centre(self):
        f = np.zeros((1, 4, 4))
        f[0, 0, 0] = 1
        assert sp.fftshift2(f)[0, 2, 2] == 1


def _median_time(fn, repeats=9):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


@pytest.mark.slow
def test_runtime_scaling():
    r = np.random.default_rng(0)
    a, b = r.normal(size=(1, 128, 128)), r.normal(size=(1, 256, 256))
    ratio = _median_time(lambda: sp.fft2(b)) / _median_time(lambda: sp.fft2(a))
    assert 3.2 <= ratio <= 6.0, ratio
