import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfdenoise.bm3d import (WEIGHT_FLOOR, Bm3dParams, bm3d_denoise, hard_threshold_group,
                            hard_threshold_weight, wiener_group)
from mfdenoise.collaborative import (CHUNK_ROWS, AggregationBuffers, GroupEstimate, aggregate,
                                     set_workers)
from mfdenoise.image import NoiseSpec, add_awgn, psnr
from mfdenoise.transforms import group_transform, inverse_group_transform

from oracles import direct_aggregate


def small_params(sigma, **kw):
    base = dict(k1=3, k2=3, n1=4, n2=8, step1=2, step2=2, radius1=3, radius2=3)
    base.update(kw)
    return Bm3dParams(sigma, **base)


def test_hard_threshold_zero_sigma_keeps_everything():
    c = np.random.default_rng(0).normal(size=(4, 3, 3))
    out, n = hard_threshold_group(c, 0.0, 2.7)
    np.testing.assert_array_equal(out, c)
    assert n == c.size
    assert hard_threshold_weight(n, 0.0) == pytest.approx(1 / WEIGHT_FLOOR)


def test_hard_threshold_only_dc_survives():
    c = np.full((8, 4, 4), 0.1)
    c[0, 0, 0] = 0.05  # the DC entry is exempt even when small
    out, n = hard_threshold_group(c, 25.0, 2.7)
    assert n == 1
    assert out[0, 0, 0] == 0.05
    assert hard_threshold_weight(n, 25.0) == pytest.approx(1 / 625.0)


def test_hard_threshold_scalar_loop():
    rng = np.random.default_rng(1)
    c = rng.normal(0, 80, (8, 8, 8))
    out, n = hard_threshold_group(c, 25.0, 2.7)
    want = np.empty_like(c)
    count = 0
    for a in range(8):
        for i in range(8):
            for j in range(8):
                keep = (a, i, j) == (0, 0, 0) or abs(c[a, i, j]) > 2.7 * 25.0
                want[a, i, j] = c[a, i, j] if keep else 0.0
                count += want[a, i, j] != 0
    np.testing.assert_array_equal(out, want)
    assert n == count
    # batched form agrees with per-group calls
    batch, nb = hard_threshold_group(np.stack([c, 2 * c]), 25.0, 2.7)
    np.testing.assert_array_equal(batch[0], out)
    assert nb[0] == n


def test_wiener_examples():
    rng = np.random.default_rng(2)
    c = rng.normal(size=(4, 3, 3))
    out, w = wiener_group(c, np.zeros_like(c), 10.0)
    assert np.all(out == 0)
    assert w == pytest.approx(1 / (100.0 * WEIGHT_FLOOR))
    out, w = wiener_group(c, rng.normal(size=c.shape), 0.0)
    np.testing.assert_array_equal(out, c)
    with pytest.raises(ValueError):
        wiener_group(c, np.zeros((4, 3, 2)), 1.0)


def test_wiener_scalar_loop():
    rng = np.random.default_rng(3)
    c = rng.normal(0, 40, (4, 5, 5))
    p = rng.normal(0, 40, c.shape)
    s = 17.0
    out, w = wiener_group(c, p, s)
    want = np.empty_like(c)
    energy = 0.0
    for idx in np.ndindex(c.shape):
        h = p[idx] ** 2 / (p[idx] ** 2 + s ** 2)
        want[idx] = h * c[idx]
        energy += h * h
    np.testing.assert_allclose(out, want, rtol=0, atol=1e-12)
    assert w == pytest.approx(1.0 / (s * s * energy), rel=1e-12)


def test_aggregate_single_patch_and_overlap():
    buf = AggregationBuffers.zeros((1, 4, 4))
    patch = np.arange(16.0).reshape(4, 4)
    out = aggregate([GroupEstimate(np.array([0]), np.array([0]), np.array([0]), patch[None], 3.5,
                                   np.array([0]))], buf)
    np.testing.assert_array_equal(out[0], patch)

    buf = AggregationBuffers.zeros((1, 3, 4))
    est = GroupEstimate(np.array([0, 0]), np.array([0, 0]), np.array([0, 1]),
                        np.stack([np.full((3, 3), 2.0), np.full((3, 3), 6.0)]), 1.0, np.array([0, 0]))
    out = aggregate([est], buf)[0]
    np.testing.assert_array_equal(out[:, 1:3], 4.0)
    np.testing.assert_array_equal(out[:, 0], 2.0)
    np.testing.assert_array_equal(out[:, 3], 6.0)


def test_aggregate_rejects_uncovered_pixels():
    buf = AggregationBuffers.zeros((1, 4, 4))
    buf.add([0], [0], [0], np.ones((1, 2, 2)), [1.0])
    with pytest.raises(RuntimeError):
        buf.result()


@pytest.mark.parametrize("mode", ["single", "mf", "sf"])
def test_full_pipeline_equals_direct_sum_8x8(mode):
    rng = np.random.default_rng(4)
    frames = 100 + 30 * rng.standard_normal((2, 8, 8))
    rec = {}
    p = small_params(30.0)
    out = bm3d_denoise(frames, p, mode=mode, ref_index=1, record=rec)
    L = 1 if mode == "single" else 2
    want, _ = direct_aggregate(rec["step2"], (L, 8, 8), fused=(mode == "mf"))
    if mode == "mf":
        np.testing.assert_allclose(out, want, rtol=0, atol=1e-9)
    else:
        np.testing.assert_allclose(out, want[0 if mode == "single" else 1], rtol=0, atol=1e-9)
    pilot, _ = direct_aggregate(rec["step1"], (L, 8, 8))
    done = ~np.isnan(pilot).any(axis=(1, 2))
    np.testing.assert_allclose(rec["pilot"][done], pilot[done], rtol=0, atol=1e-9)


def test_recorded_groups_are_filtered_correctly():
    rng = np.random.default_rng(5)
    frames = 128 + 25 * rng.standard_normal((2, 12, 12))
    rec = {}
    p = small_params(25.0)
    bm3d_denoise(frames, p, mode="mf", record=rec)
    pilot = rec["pilot"]
    for est in rec["step2"][::7]:
        k = 3
        noisy = np.stack([frames[f, y:y + k, x:x + k] for f, y, x in zip(est.frames, est.ys, est.xs)])
        pil = np.stack([pilot[f, y:y + k, x:x + k] for f, y, x in zip(est.frames, est.ys, est.xs)])
        c, pc = group_transform(noisy), group_transform(pil)
        h = pc ** 2 / (pc ** 2 + 25.0 ** 2)
        np.testing.assert_allclose(est.patches, inverse_group_transform(h * c), atol=1e-9)
        assert est.weight == pytest.approx(1 / (625.0 * np.sum(h ** 2)))
        assert len(est.frames) & (len(est.frames) - 1) == 0  # dyadic group size
    for est in rec["step1"][::7]:
        noisy = np.stack([frames[f, y:y + 3, x:x + 3] for f, y, x in zip(est.frames, est.ys, est.xs)])
        c = group_transform(noisy)
        keep = np.abs(c) > 2.7 * 25.0
        keep[0, 0, 0] = True
        np.testing.assert_allclose(est.patches, inverse_group_transform(np.where(keep, c, 0)), atol=1e-9)


def test_zero_sigma_returns_input(camera64):
    out = bm3d_denoise(camera64, Bm3dParams(0.0))
    assert np.abs(out - camera64).max() <= 1e-9


def test_one_frame_modes_are_identical(camera64):
    noisy = add_awgn(camera64, NoiseSpec(20, 1))
    p = Bm3dParams(20.0)
    single = bm3d_denoise(noisy, p)
    np.testing.assert_array_equal(bm3d_denoise(noisy[None], p, mode="mf"), single)
    np.testing.assert_array_equal(bm3d_denoise(noisy[None], p, mode="sf"), single)


def test_denoising_improves_psnr(camera64):
    noisy = add_awgn(camera64, NoiseSpec(25, 2))
    out = bm3d_denoise(noisy, Bm3dParams(25.0))
    assert psnr(camera64, out) > psnr(camera64, noisy) + 4


def test_mode_errors(camera64):
    p = Bm3dParams(10.0)
    with pytest.raises(ValueError):
        bm3d_denoise(camera64, p, mode="cf")
    with pytest.raises(IndexError):
        bm3d_denoise(camera64, p, mode="sf", ref_index=3)
    with pytest.raises(ValueError):
        bm3d_denoise(np.zeros((0, 8, 8)), p)
    with pytest.raises(ValueError):
        Bm3dParams(-1.0)
    with pytest.raises(ValueError):
        Bm3dParams(10.0, lambda_hard=0)


def test_doubled_preset():
    p = Bm3dParams(20.0).doubled()
    assert (p.n1, p.n2) == (32, 64)


def test_thread_count_does_not_change_bits(camera):
    img = camera[:CHUNK_ROWS * 3 * 3 + 7, :90]
    frames = np.stack([add_awgn(img, NoiseSpec(30, s)) for s in range(2)])
    p = Bm3dParams(30.0)
    old = set_workers(1)
    try:
        a = bm3d_denoise(frames, p, mode="mf")
        set_workers(4)
        b = bm3d_denoise(frames, p, mode="mf")
    finally:
        set_workers(old)
    np.testing.assert_array_equal(a, b)


@settings(max_examples=15, deadline=None)
@given(st.floats(20, 230), st.floats(1.0, 30.0))
def test_constant_image_shrinks_only_through_dc_gain(c, sigma):
    # step 2 keeps the DC coefficient with gain p^2 / (p^2 + sigma^2), p = c k sqrt(n)
    img = np.full((12, 12), c)
    out = bm3d_denoise(img, small_params(sigma))
    assert np.ptp(out) < 1e-9
    lo = c * (c * c * 9) / (c * c * 9 + sigma * sigma)  # smallest group: n = 1
    assert lo - 1e-9 <= out[0, 0] <= c
