import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import gaussian_filter

from unaen.kspace import (
    CLEAN,
    MotionSpec,
    PhantomSpec,
    corrupted_fraction,
    corruption_schedule,
    draw_lead_eg,
    fft2,
    ifft2,
    line_order_center_out,
    render_phantom,
    rotate,
    simulate_motion,
    splice_kspace,
)
from unaen.metrics import ssim


def dft_oracle(img):
    """Centred orthonormal DFT written out with explicit DFT matrices."""
    h, w = img.shape

    def mat(n):
        k = np.arange(n) - n // 2
        return np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)

    return mat(h) @ img @ mat(w).T


@pytest.mark.parametrize("shape", [(8, 8), (7, 7), (6, 9), (5, 4)])
def test_fft2_matches_dft_matrix(shape):
    img = np.random.default_rng(0).normal(size=shape)
    np.testing.assert_allclose(fft2(img), dft_oracle(img), atol=1e-10)


def test_fft2_dc_at_centre():
    k = fft2(np.ones((6, 8)))
    assert np.argmax(np.abs(k)) == np.ravel_multi_index((3, 4), (6, 8))
    assert np.isclose(abs(k[3, 4]), np.sqrt(48))


def test_fft2_is_unitary():
    img = np.random.default_rng(1).normal(size=(10, 12))
    assert np.isclose(np.linalg.norm(fft2(img)), np.linalg.norm(img))


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 24), w=st.integers(1, 24), seed=st.integers(0, 10**6))
def test_fft_round_trip(h, w, seed):
    img = np.random.default_rng(seed).normal(size=(h, w))
    assert np.max(np.abs(ifft2(fft2(img)) - img)) < 1e-9


def test_rotate_quarter_turn_matches_rot90():
    img = np.random.default_rng(2).random((9, 9))
    np.testing.assert_allclose(rotate(img, 90), np.rot90(img), atol=1e-9)


def test_rotate_zero_is_copy():
    img = np.random.default_rng(3).random((5, 6))
    out = rotate(img, 0)
    np.testing.assert_array_equal(out, img)
    assert out is not img


def test_rotate_composition_near_identity():
    img = gaussian_filter(render_phantom(PhantomSpec(size=64)), 1.0)
    back = rotate(rotate(img, 5), -5)
    c = slice(16, 48)
    assert np.mean(np.abs(back[c, c] - img[c, c])) < 0.02


def test_line_order_examples():
    assert line_order_center_out(4).tolist() == [2, 1, 3, 0]
    assert line_order_center_out(5).tolist() == [2, 3, 1, 4, 0]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 400))
def test_line_order_is_permutation(h):
    order = line_order_center_out(h)
    assert sorted(order.tolist()) == list(range(h))
    dist = np.abs(2 * order - h)
    assert np.all(np.diff(dist) >= 0)


def count_oracle(height, ts, ce, eg, lead):
    """Corrupted line count from the repeating pattern, integers only."""
    total = 0
    for pos in range(height):
        phase = (pos // eg + ts - lead) % (ts + ce)
        total += phase >= ts
    return total


@settings(max_examples=60, deadline=None)
@given(
    height=st.integers(10, 400),
    ts=st.integers(1, 9),
    ce=st.integers(1, 9),
    eg=st.integers(1, 12),
    data=st.data(),
)
def test_schedule_count_matches_pattern(height, ts, ce, eg, data):
    lead = data.draw(st.integers(1, ts))
    spec = MotionSpec(ts_eg=ts, corrupt_eg=ce, eg_size=eg)
    mask = corruption_schedule(height, spec, lead)
    assert np.count_nonzero(mask != CLEAN) == count_oracle(height, ts, ce, eg, lead)


@pytest.mark.parametrize("ts", [3, 6, 9])
def test_centre_lines_always_clean(ts):
    spec = MotionSpec(ts_eg=ts, onset="center")
    mask = corruption_schedule(320, spec)
    order = line_order_center_out(320)
    assert np.all(mask[order[: ts * 10]] == CLEAN)
    assert mask[order[ts * 10]] != CLEAN


def test_centre_echo_group_clean_for_every_onset():
    spec = MotionSpec(ts_eg=9)
    order = line_order_center_out(320)
    for lead in range(1, 10):
        assert np.all(corruption_schedule(320, spec, lead)[order[:10]] == CLEAN)


def test_sources_round_robin():
    spec = MotionSpec(ts_eg=1, corrupt_eg=1, eg_size=1, onset="center")
    clean = np.zeros((8, 3), dtype=complex)
    srcs = [np.full((8, 3), 1.0 + 0j), np.full((8, 3), 2.0 + 0j)]
    k, mask = splice_kspace(clean, srcs, spec)
    order = line_order_center_out(8)
    assert mask[order].tolist() == [CLEAN, 0, CLEAN, 1, CLEAN, 0, CLEAN, 1]
    np.testing.assert_array_equal(k[mask == 1], 2.0)
    np.testing.assert_array_equal(k[mask == CLEAN], 0.0)


def test_splice_shape_mismatch_raises():
    with pytest.raises(ValueError):
        splice_kspace(np.zeros((4, 4)), [np.zeros((4, 5))], MotionSpec())


def test_center_onset_fraction_at_320_lines():
    spec = MotionSpec(ts_eg=3, onset="center")
    # 32 echo groups: 3 clean, 9, 3 clean, 9, 3 clean, 5 -> 23 corrupted
    assert corrupted_fraction(corruption_schedule(320, spec)) == 230 / 320


def test_draw_lead_eg_range_and_determinism():
    spec = MotionSpec(ts_eg=6)
    draws = [draw_lead_eg(spec, s) for s in range(200)]
    assert set(draws) == set(range(1, 7))
    assert draws == [draw_lead_eg(spec, s) for s in range(200)]
    assert draw_lead_eg(MotionSpec(ts_eg=6, onset="center"), 5) == 6


def test_simulate_motion_output_range_and_determinism():
    img = render_phantom(PhantomSpec(size=48), seed=1)
    a, ma = simulate_motion(img, MotionSpec(), seed=4)
    b, mb = simulate_motion(img, MotionSpec(), seed=4)
    assert a.shape == img.shape and a.min() >= 0 and a.max() <= 1
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ma, mb)


def test_simulate_motion_rejects_out_of_range():
    with pytest.raises(ValueError):
        simulate_motion(np.full((16, 16), 2.0), MotionSpec())


def test_more_clean_lines_means_less_damage():
    votes = 0
    for i in range(20):
        img = render_phantom(PhantomSpec(size=64), seed=100 + i)
        s3 = ssim(simulate_motion(img, MotionSpec(ts_eg=3), seed=i)[0], img)
        s9 = ssim(simulate_motion(img, MotionSpec(ts_eg=9), seed=i)[0], img)
        votes += s3 < s9
    assert votes > 10


def test_motion_spec_validation_and_round_trip():
    with pytest.raises(ValueError):
        MotionSpec(ts_eg=0)
    with pytest.raises(ValueError):
        MotionSpec(onset="late")
    spec = MotionSpec(ts_eg=6, angles_deg=(3, -3, 7))
    assert MotionSpec.from_dict(spec.to_dict()) == spec
    assert np.isclose(MotionSpec(ts_eg=9).asymptotic_fraction, 0.5)


def test_phantom_range_and_jitter():
    base = render_phantom(PhantomSpec(size=32))
    assert base.min() >= 0 and base.max() <= 1 and base.mean() > 0.05
    a = render_phantom(PhantomSpec(size=32), seed=1)
    np.testing.assert_array_equal(a, render_phantom(PhantomSpec(size=32), seed=1))
    assert not np.array_equal(a, base)


def test_empty_phantom_is_black():
    np.testing.assert_array_equal(render_phantom(PhantomSpec(size=20, ellipses=[])), 0)


def test_phantom_too_small():
    with pytest.raises(ValueError):
        render_phantom(PhantomSpec(size=8))
