import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from srdistill.errors import MetricError, ShapeError
from srdistill.imaging import upscale
from srdistill.metrics import (
    PSNR_CAP,
    evaluate_model,
    make_testset,
    perceptual,
    psnr,
    register_perceptual,
    ssim,
    unregister_perceptual,
)
from srdistill.sr_models import build_model, sr_loss

from oracles import loop_psnr, loop_ssim


def test_psnr_uniform_offset():
    a = np.full((8, 8, 3), 0.5)
    assert abs(psnr(a, a + 0.1) - 20.0) < 1e-6


def test_psnr_identical_capped():
    a = np.random.default_rng(0).random((5, 5, 3))
    assert psnr(a, a) == PSNR_CAP


def test_psnr_shape_mismatch():
    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_psnr_matches_loop(rng):
    for _ in range(20):
        a, b = rng.random((9, 7, 3)), rng.random((9, 7, 3))
        assert abs(psnr(a, b) - loop_psnr(a, b)) < 1e-9


def test_ssim_identical_exact(rng):
    a = rng.random((16, 16, 3))
    assert ssim(a, a) == 1.0


def test_ssim_matches_loop(rng):
    for _ in range(20):
        a = rng.random((15, 14, 3))
        b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
        assert abs(ssim(a, b) - loop_ssim(a, b)) < 1e-9


def test_ssim_constant_closed_form():
    a, b = np.full((16, 16, 3), 0.2), np.full((16, 16, 3), 0.8)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    expected = (2 * 0.2 * 0.8 + c1) / (0.2 ** 2 + 0.8 ** 2 + c1) * (c2 / c2)
    assert abs(ssim(a, b) - expected) < 1e-9


def test_ssim_inverted_negative(rng):
    a = (rng.random((24, 24, 1)) > 0.5).astype(float)
    assert ssim(a, 1 - a) < 0


def test_ssim_too_small():
    with pytest.raises(MetricError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))
    with pytest.raises(MetricError):
        ssim(np.zeros((16, 16, 3)), np.zeros((16, 16, 3)), window=10)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (12, 12, 2), elements=st.floats(0, 1)),
       arrays(np.float64, (12, 12, 2), elements=st.floats(0, 1)))
def test_metric_symmetry_and_range(a, b):
    assert psnr(a, b) == psnr(b, a)
    s = ssim(a, b)
    assert abs(s - ssim(b, a)) < 1e-12
    assert -1.0 <= s <= 1.0
    assert psnr(a, b) <= PSNR_CAP


def test_psnr_monotone_in_noise(rng):
    a = rng.random((16, 16, 3))
    n = rng.standard_normal(a.shape)
    vals = [psnr(a, a + s * n) for s in (0.01, 0.05, 0.1, 0.3)]
    assert vals == sorted(vals, reverse=True)


def test_perceptual_absent():
    a = np.zeros((4, 4, 3))
    assert perceptual(a, a, None) is None
    assert perceptual(a, a, "not-registered") is None


def test_perceptual_stub_equals_sr_loss(rng):
    register_perceptual("mse", lambda x, y: float(np.mean((x - y) ** 2)))
    try:
        a, b = rng.random((6, 6, 3)), rng.random((6, 6, 3))
        expected = sr_loss(torch.as_tensor(a), torch.as_tensor(b)).item()
        assert abs(perceptual(a, b, "mse") - expected) < 1e-12
    finally:
        unregister_perceptual("mse")


def test_perceptual_negative_rejected():
    with pytest.raises(MetricError):
        perceptual(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), lambda x, y: -1.0)


def test_evaluate_exact_inverse_hits_cap(toy_testset):
    testset = make_testset(toy_testset, 2)
    lookup = {id(lr): hr for _, lr, hr in testset}
    report = evaluate_model(None, testset, "toy", predict_fn=lambda lr: lookup[id(lr)])
    assert report.psnr == PSNR_CAP and report.ssim == 1.0
    assert report.perceptual is None


def test_evaluate_mean_of_two(toy_testset):
    testset = make_testset(toy_testset, 2)
    report = evaluate_model(None, testset, predict_fn=lambda lr: np.clip(
        upscale(torch.as_tensor(np.moveaxis(lr, -1, 0)), 2).numpy().transpose(1, 2, 0), 0, 1))
    assert len(report.images) == 2
    assert report.psnr == pytest.approx((report.images[0].psnr + report.images[1].psnr) / 2, abs=1e-12)


def test_evaluate_matches_hand_pipeline(toy_testset):
    model = build_model("srcnn", 2, rng_seed=3)
    testset = make_testset(toy_testset, 2)
    report = evaluate_model(model, testset, "toy")
    for (name, lr, hr), m in zip(testset, report.images):
        with torch.no_grad():
            out = model(torch.as_tensor(lr.transpose(2, 0, 1)[None].copy(), dtype=torch.float32))
        sr = out[0].clamp(0, 1).double().numpy().transpose(1, 2, 0)
        assert m.name == name
        assert m.psnr == pytest.approx(psnr(sr, hr), abs=1e-9)
        assert m.ssim == pytest.approx(ssim(sr, hr), abs=1e-9)


def test_evaluate_records_failures(toy_testset):
    testset = make_testset(toy_testset, 2)
    calls = []

    def flaky(lr):
        calls.append(1)
        if len(calls) == 1:
            raise RuntimeError("boom")
        return np.zeros((lr.shape[0] * 2, lr.shape[1] * 2, 3))

    report = evaluate_model(None, testset, predict_fn=flaky)
    assert "boom" in report.images[0].error
    assert report.row()["n_errors"] == 1
    assert report.psnr == report.images[1].psnr


def test_make_testset_mod_crop():
    ts = make_testset([("odd", np.zeros((21, 18, 3)))], 4)
    name, lr, hr = ts[0]
    assert hr.shape == (20, 16, 3) and lr.shape == (5, 4, 3)


def test_y_only_and_crop_border(toy_testset):
    testset = make_testset(toy_testset, 2)
    lookup = {id(lr): hr for _, lr, hr in testset}
    report = evaluate_model(None, testset, y_only=True, crop_border=2,
                            predict_fn=lambda lr: lookup[id(lr)] * 0.9)
    assert all(m.error is None and m.psnr < PSNR_CAP for m in report.images)
