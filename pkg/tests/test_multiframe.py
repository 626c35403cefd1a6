import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfdenoise.bm3d import Bm3dParams, bm3d_denoise
from mfdenoise.harness import make_registered_dataset
from mfdenoise.image import FrameStack, psnr
from mfdenoise.multiframe import (COMBINED_FILTERS, MethodId, UnsupportedMethodError, default_params,
                                  run_af, run_fa, run_method, run_mf, run_pipeline, run_sf,
                                  temporal_average)
from mfdenoise.nlb import NlbParams, nlb_denoise

from conftest import textured


def test_method_id_parsing():
    assert MethodId.parse("BM-AF") == MethodId("BM3D", "AF")
    assert MethodId.parse("nlb_mf").short == "NL-MF"
    assert str(MethodId.parse("bm3d-mfo")) == "BM-MFO"
    for bad in ("NL-MFO", "XX-AF", "BM-ZZ", "BM"):
        with pytest.raises(ValueError):
            MethodId.parse(bad)


def test_temporal_average_examples():
    img = np.random.default_rng(0).uniform(0, 255, (8, 8))
    one = temporal_average(FrameStack(img, sigma=30.0))
    np.testing.assert_array_equal(one.image, img)
    assert one.sigma == 30.0
    ten = temporal_average(FrameStack(np.stack([img] * 10), sigma=120.0))
    assert ten.sigma == pytest.approx(120 / math.sqrt(10))
    assert ten.sigma == pytest.approx(37.947, abs=5e-4)


def test_temporal_average_statistics(camera):
    stack = make_registered_dataset(camera, 40.0, 5, seed=1)
    avg = temporal_average(stack)
    ratio = np.std(avg.image - camera) / (40 / math.sqrt(5))
    assert 0.95 <= ratio <= 1.05


def test_temporal_average_respects_validity():
    frames = np.stack([np.full((3, 3), v) for v in (1.0, 5.0, 9.0)])
    valid = np.ones_like(frames, bool)
    valid[2, 0, 0] = False
    valid[:, 2, 2] = False
    avg = temporal_average(FrameStack(frames, ref_index=1, validity=valid, sigma=3.0))
    assert avg.image[0, 0] == 3.0
    assert avg.image[1, 1] == 5.0
    assert avg.image[2, 2] == 5.0 and avg.filled[2, 2]  # filled from the reference frame
    assert avg.count[0, 0] == 2 and not avg.uniform
    assert avg.sigma_map[0, 0] == pytest.approx(3 / math.sqrt(2))


def test_unregistered_stack_rejected():
    st_ = FrameStack(np.zeros((2, 8, 8)), registered=False, sigma=1.0)
    for fn in (run_af, run_fa, run_sf, run_mf):
        with pytest.raises(ValueError):
            fn(st_, "BM3D")
    with pytest.raises(ValueError):
        run_af(FrameStack(np.zeros((2, 8, 8))), "BM3D")  # sigma unknown


@pytest.fixture(scope="module")
def small_stack(camera):
    return make_registered_dataset(camera[300:364, 100:164], 30.0, 3, seed=2)


@pytest.mark.parametrize("filt", ["BM3D", "NLB"])
def test_af_filters_average_at_reduced_sigma(small_stack, filt):
    info = {}
    out = run_af(small_stack, filt, info=info)
    s = 30.0 / math.sqrt(3)
    assert info["filter_sigma"] == pytest.approx(s)
    fn = bm3d_denoise if filt == "BM3D" else nlb_denoise
    want = fn(small_stack.frames.mean(axis=0), default_params(filt, s))
    np.testing.assert_array_equal(out, want)


def test_fa_is_mean_of_filtered_frames(small_stack):
    p = Bm3dParams(30.0)
    want = np.mean([bm3d_denoise(f, p) for f in small_stack.frames], axis=0)
    np.testing.assert_allclose(run_fa(small_stack, "BM3D"), want, atol=1e-12)
    np.testing.assert_array_equal(run_fa(small_stack, "BM3D", workers=3), run_fa(small_stack, "BM3D"))


def test_mf_returns_every_frame(small_stack):
    frames, fused = run_mf(small_stack, "NLB")
    assert frames.shape == small_stack.frames.shape
    assert fused.shape == small_stack.shape


@pytest.mark.parametrize("filt", ["BM3D", "NLB"])
def test_one_frame_reductions(camera64, filt):
    stack = make_registered_dataset(camera64, 25.0, 1, seed=3)
    fn = bm3d_denoise if filt == "BM3D" else nlb_denoise
    single = fn(stack.frames[0], default_params(filt, 25.0))
    for ext in ("AF", "FA", "SF", "MF"):
        out = run_method(stack, MethodId(filt, ext))
        np.testing.assert_array_equal(out, single, err_msg=ext)
    if filt == "BM3D":
        np.testing.assert_array_equal(run_method(stack, "BM-MFO"),
                                      bm3d_denoise(stack.frames[0], Bm3dParams(25.0).doubled()))


def test_noise_free_stack_passes_through():
    # with sigma 0 every extension returns the clean image it was given
    img = textured(24, 24, 0)
    stack = make_registered_dataset(img, 0.0, 3)
    for m in ("BM-AF", "BM-FA", "BM-SF", "BM-MF", "NL-AF", "NL-MF"):
        np.testing.assert_allclose(run_method(stack, m, default_params(MethodId.parse(m).filter, 0.0)),
                                   img, atol=1e-9)


def test_combined_filtering_slot():
    stack = make_registered_dataset(np.zeros((16, 16)), 10.0, 2)
    with pytest.raises(UnsupportedMethodError, match="COMBINED_FILTERS"):
        run_method(stack, "BM-CF")
    unreg = FrameStack(stack.frames, registered=False, sigma=10.0)
    with pytest.raises(UnsupportedMethodError):
        run_pipeline(unreg, "NL-CF")
    COMBINED_FILTERS["NLB"] = lambda s, p: s.frames.mean(axis=0)
    try:
        np.testing.assert_array_equal(run_method(stack, "NL-CF"), stack.frames.mean(axis=0))
    finally:
        del COMBINED_FILTERS["NLB"]


def test_pipeline_skips_registration_when_registered(small_stack):
    info = {}
    out = run_pipeline(small_stack, "BM-AF", info=info)
    assert "registered" not in info
    np.testing.assert_array_equal(out, run_af(small_stack, "BM3D"))


def test_pipeline_registers_shifted_sequence():
    big = textured(110, 110, 8, smooth=1.0)
    clean = [big[15:95, 15 + d:95 + d] for d in (0, 1, -2, 2)]
    rng = np.random.default_rng(0)
    noisy = np.stack(clean) + 30 * rng.standard_normal((4, 80, 80))
    stack = FrameStack(noisy, registered=False, ref_index=0, sigma=30.0)
    info = {}
    out = run_pipeline(stack, "BM-AF", info=info)
    assert info["registered"]
    single = bm3d_denoise(noisy[0], Bm3dParams(30.0))
    assert psnr(clean[0], out, border=10) > psnr(clean[0], single, border=10) + 1.0


@pytest.mark.slow
def test_orderings_on_substitute_image(camera):
    clean = camera[160:288, 160:288]
    stack = make_registered_dataset(clean, 40.0, 5, seed=0)
    for f in ("BM", "NL"):
        score = {e: psnr(clean, run_method(stack, f"{f}-{e}")) for e in ("AF", "FA", "SF", "MF")}
        assert score["AF"] > score["FA"], score
        assert score["MF"] > score["SF"], score


def test_af_beats_single_frame_by_two_db(camera):
    clean = camera[100:228, 200:328]
    stack = make_registered_dataset(clean, 40.0, 10, seed=0)
    single = bm3d_denoise(stack.frames[0], Bm3dParams(40.0))
    assert psnr(clean, run_af(stack, "BM3D")) >= psnr(clean, single) + 2.0


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 12), st.floats(1.0, 150.0))
def test_sigma_substitution_is_exact(L, sigma):
    stack = FrameStack(np.zeros((L, 16, 16)), sigma=sigma)
    info = {}
    run_af(stack, "NLB", NlbParams(sigma, k1=3, k2=3, n1=4, n2=4), info=info)
    assert info["filter_sigma"] == sigma / math.sqrt(L)
