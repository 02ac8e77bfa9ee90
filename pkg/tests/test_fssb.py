import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from expomamba import fssb, ops
from expomamba.autograd import Tape, finite_diff_check
from expomamba.ndtensor import ShapeError
from expomamba.ssm import vss2d_forward


def cconv_oracle(x, w):
    # per-element complex multiply-accumulate for 1x1 kernels
    c_out, c_in = w.shape[:2]
    out = np.zeros((c_out,) + x.shape[1:], complex)
    for o in range(c_out):
        for i in range(c_in):
            for y in range(x.shape[1]):
                for z in range(x.shape[2]):
                    out[o, y, z] += w[o, i, 0, 0] * x[i, y, z]
    return out


def jittered(channels, patch, d_state, rng, scale=0.05):
    """Init params plus noise so every path of the block is active."""
    w = fssb.init_params(channels, patch, d_state, rng)
    return {k: v + rng.normal(0, scale, np.shape(v)) for k, v in w.items()}


class TestComplexConv:
    def test_against_oracle(self, rng):
        x = rng.normal(size=(3, 4, 5)) + 1j * rng.normal(size=(3, 4, 5))
        wr, wi = rng.normal(size=(2, 3, 1, 1)), rng.normal(size=(2, 3, 1, 1))
        out = fssb.complex_conv(x, wr, wi).value
        assert np.abs(out - cconv_oracle(x, wr + 1j * wi)).max() <= 1e-12

    def test_real_weights_split(self, rng):
        x = rng.normal(size=(2, 4, 4)) + 1j * rng.normal(size=(2, 4, 4))
        wr = rng.normal(size=(2, 2, 1, 1))
        out = fssb.complex_conv(x, wr, np.zeros_like(wr)).value
        np.testing.assert_allclose(out.real, ops.conv2d(x.real, wr).value, atol=1e-15)
        np.testing.assert_allclose(out.imag, ops.conv2d(x.imag, wr).value, atol=1e-15)

    def test_identity(self, rng):
        x = rng.normal(size=(3, 4, 4)) + 0j
        eye = np.eye(3).reshape(3, 3, 1, 1)
        np.testing.assert_array_equal(fssb.complex_conv(x, eye, np.zeros_like(eye)).value, x)

    def test_errors(self, rng):
        w = np.zeros((2, 2, 1, 1))
        with pytest.raises(TypeError):
            fssb.complex_conv(np.zeros((2, 4, 4)), w, w)
        with pytest.raises(ShapeError):
            fssb.complex_conv(np.zeros((3, 4, 4), complex), w, w)


class TestAmplitudeScaling:
    def test_zero_gate_identity(self, rng):
        a = rng.uniform(0, 5, (3, 4, 4))
        out = fssb.dynamic_amplitude_scaling(a, np.zeros(3), np.zeros(3)).value
        np.testing.assert_array_equal(out, a)

    def test_zero_amplitude(self, rng):
        out = fssb.dynamic_amplitude_scaling(np.zeros((2, 4, 4)), rng.normal(size=2), rng.normal(size=2))
        assert not out.value.any()

    @given(hnp.arrays(np.float64, (2, 3, 3), elements=st.floats(0, 100)),
           hnp.arrays(np.float64, 2, elements=st.floats(-5, 5)),
           hnp.arrays(np.float64, 2, elements=st.floats(-5, 5)))
    def test_bounded_and_nonnegative(self, a, gw, gb):
        out = fssb.dynamic_amplitude_scaling(a, gw, gb).value
        assert np.all(out >= 0) and np.all(out <= 2 * a)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            fssb.dynamic_amplitude_scaling(-np.ones((1, 2, 2)), np.zeros(1), np.zeros(1))


class TestPhaseContinuity:
    def test_zero_kernel_identity(self, rng):
        p = rng.uniform(-np.pi, np.pi, (2, 6, 6))
        out = fssb.phase_continuity(p, np.zeros((2, 2, 3, 3))).value
        np.testing.assert_allclose(out, p, atol=1e-14)

    def test_constant_field_interior(self, rng):
        k = rng.uniform(0, 0.2, (1, 1, 3, 3))
        out = fssb.phase_continuity(np.full((1, 8, 8), 1.1), k).value
        np.testing.assert_allclose(out[:, 1:-1, 1:-1], 1.1, atol=1e-14)

    @given(hnp.arrays(np.float64, (2, 5, 5), elements=st.floats(-np.pi, np.pi)),
           hnp.arrays(np.float64, (2, 2, 3, 3), elements=st.floats(-2, 2)))
    def test_range(self, p, k):
        out = fssb.phase_continuity(p, k).value
        assert np.all(out > -np.pi) and np.all(out <= np.pi)

    def test_degenerate_bins_keep_input(self):
        # kernel -1 at the centre cancels the residual exactly
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = -1.0
        p = np.full((1, 3, 3), 0.7)
        before = fssb.PhaseStats.degenerate
        out = fssb.phase_continuity(p, k).value
        np.testing.assert_array_equal(out, p)
        assert fssb.PhaseStats.degenerate == before + 9

    def test_wrap_safe(self):
        # values straddling +-pi average to pi, not to 0
        p = np.array([[[np.pi - 0.01, -np.pi + 0.01, np.pi - 0.01]]])
        k = np.zeros((1, 1, 1, 3))
        k[0, 0, 0, :] = 1.0
        out = fssb.phase_continuity(p, k).value
        assert abs(abs(out[0, 0, 1]) - np.pi) < 0.02


class TestHdr:
    def test_hand_value(self):
        assert fssb.hdr_tone_map(np.array([1.0]), 0.9)[0] == pytest.approx(0.95, abs=1e-15)

    def test_continuity_at_threshold(self):
        assert fssb.hdr_tone_map(np.array([0.9]), 0.9)[0] == 0.9

    def test_below_threshold_bit_identical(self, rng):
        x = rng.uniform(0, 0.5, (3, 8, 8))
        np.testing.assert_array_equal(fssb.hdr_tone_map(x), x)

    @given(hnp.arrays(np.float64, 20, elements=st.floats(0, 0.9)))
    def test_idempotent_below(self, x):
        once = fssb.hdr_tone_map(x)
        np.testing.assert_array_equal(fssb.hdr_tone_map(once), once)

    @given(st.floats(0, 1e6), st.floats(0, 1e6))
    def test_monotone_and_bounded(self, a, b):
        lo, hi = sorted((a, b))
        out = fssb.hdr_tone_map(np.array([lo, hi]))
        assert out[0] <= out[1] < 1.0

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            fssb.hdr_tone_map(np.zeros(1), 1.0)

    def test_var_and_array_agree(self, rng):
        x = rng.uniform(0, 2, 30)
        np.testing.assert_array_equal(fssb.hdr_tone_map(ops.const(x)).value, fssb.hdr_tone_map(x))


class TestFssbForward:
    @pytest.mark.parametrize("shape", [(3, 16, 16), (8, 32, 32)])
    def test_shape(self, rng, shape):
        p = fssb.from_mapping(jittered(shape[0], 4, 4, rng))
        assert fssb.fssb_forward(rng.uniform(0, 1, shape), p, 4).shape == shape

    def test_identity_at_init(self, rng):
        x = rng.uniform(0, 0.85, (3, 16, 16))
        p = fssb.from_mapping(fssb.init_params(3, 4, 4, rng))
        out = fssb.fssb_forward(x, p, 4).value
        assert np.abs(out - fssb.hdr_tone_map(x)).max() <= 1e-6

    def test_identity_at_init_above_threshold(self, rng):
        x = rng.uniform(0, 1.5, (2, 8, 8))
        p = fssb.from_mapping(fssb.init_params(2, 4, 2, rng))
        np.testing.assert_allclose(fssb.fssb_forward(x, p, 4).value, fssb.hdr_tone_map(x), atol=1e-6)

    def test_without_hdr(self, rng):
        x = rng.uniform(0, 2, (2, 8, 8))
        p = fssb.from_mapping(fssb.init_params(2, 4, 2, rng))
        np.testing.assert_allclose(fssb.fssb_forward(x, p, 4, use_hdr=False).value, x, atol=1e-12)

    def test_kernels_agree(self, rng):
        x = rng.uniform(0, 1, (2, 8, 8))
        p = fssb.from_mapping(jittered(2, 4, 2, rng))
        a = fssb.fssb_forward(x, p, 4, method="parallel").value
        b = fssb.fssb_forward(x, p, 4, method="sequential").value
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_active_block_changes_output(self, rng):
        x = rng.uniform(0, 0.8, (2, 8, 8))
        p = fssb.from_mapping(jittered(2, 4, 2, rng, scale=0.3))
        assert np.abs(fssb.fssb_forward(x, p, 4).value - x).max() > 1e-4

    def test_gradient_all_params(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 0.8, (1, 8, 8))
        w = jittered(1, 4, 2, rng)
        # central differences are only valid away from the amplitude clamp's kink
        p = fssb.from_mapping(w)
        amp = ops.cabs(ops.fft2(x))
        level = ops.add(fssb.amp_peak(amp), fssb.AMP_EPS)
        pre = vss2d_forward(p.amp_fwd, p.amp_bwd, ops.div(amp, level), 4).value
        assert np.abs(pre).min() > 1e-4
        names = list(w)
        flat = np.concatenate([np.ravel(w[n]) for n in names])

        def f(v):
            out, off = {}, 0
            for n in names:
                size = int(np.prod(np.shape(w[n])))
                out[n] = ops.reshape(ops.getitem(v, slice(off, off + size)), np.shape(w[n]))
                off += size
            return ops.mean(fssb.fssb_forward(x, fssb.from_mapping(out), 4))
        res = finite_diff_check(f, flat, eps=1e-5, tol=1e-4)
        assert res.passed, res

    def test_gradient_input(self, rng):
        x = rng.uniform(0.1, 0.8, (1, 8, 8))
        p = fssb.from_mapping(jittered(1, 4, 2, rng))
        res = finite_diff_check(lambda v: ops.mean(fssb.fssb_forward(v, p, 4)), x)
        assert res.passed, res


class TestAmpPeak:
    def test_values_and_gradient(self, rng):
        a = rng.uniform(0, 1, (3, 4, 4))
        np.testing.assert_array_equal(fssb.amp_peak(a).value[:, 0, 0], a.reshape(3, -1).max(axis=1))
        t = Tape()
        v = t.leaf(a)
        g = t.backward(ops.sum(fssb.amp_peak(v)))[v.id]
        assert g.sum() == 3 and np.all((g == 0) | (g == 1))
