import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clipfree import data, metrics, zoo
from clipfree.errors import StructuralError

import oracles


def rand_img(seed, h=20, w=20):
    return np.random.default_rng(seed).integers(0, 256, (h, w, 3)).astype(np.float32)


def test_identical_images_hit_the_cap():
    a = rand_img(0)
    assert metrics.psnr_y(a, a) == metrics.PSNR_CAP == 99.0


def test_off_by_one_is_48_13_db():
    a = rand_img(1) * 0.5
    assert metrics.psnr_y(a, a + 1, shave=0) == pytest.approx(48.1308, abs=1e-4)


def test_luma_of_pure_red():
    red = np.zeros((1, 1, 3))
    red[..., 0] = 255
    assert metrics.luma(red)[0, 0] == pytest.approx(76.245)


@pytest.mark.parametrize("shave", [0, 3])
def test_psnr_matches_loop_oracle(shave):
    for s in range(5):
        a, b = rand_img(s), rand_img(s + 10)
        assert metrics.psnr_y(a, b, shave) == pytest.approx(oracles.psnr_y(a, b, shave), abs=1e-9)


def test_shave_ignores_the_border():
    a = rand_img(2)
    b = a.copy()
    b[:3] = 0
    b[:, -3:] = 255
    assert metrics.psnr_y(a, b, shave=3) == 99.0
    assert metrics.psnr_y(a, b, shave=0) < 30
    with pytest.raises(StructuralError, match="shave"):
        metrics.psnr_y(a[:6, :6], b[:6, :6], shave=3)


def test_ssim_matches_loop_oracle():
    for s in range(3):
        a, b = rand_img(s, 12, 14), rand_img(s + 5, 12, 14)
        assert metrics.ssim(a, b) == pytest.approx(oracles.ssim(a, b), abs=1e-9)


@given(seed=st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_ssim_properties(seed):
    a, b = rand_img(seed, 10, 10), rand_img(seed + 1, 10, 10)
    assert metrics.ssim(a, a) == pytest.approx(1.0)
    assert metrics.ssim(a, b) == pytest.approx(metrics.ssim(b, a))
    assert metrics.ssim(a, b) <= 1.0 + 1e-12


def test_more_noise_means_lower_scores():
    base = data.synth_corpus(0, 1, 32).tensors()[0]
    noise = np.random.default_rng(3).normal(size=base.shape)
    ps, ss = [], []
    for sigma in (1, 4, 16):
        noisy = np.clip(base + sigma * noise, 0, 255)
        ps.append(metrics.psnr_y(noisy, base))
        ss.append(metrics.ssim(noisy, base))
    assert ps[0] > ps[1] > ps[2]
    assert ss[0] > ss[1] > ss[2]


def test_shape_mismatch_and_small_ssim():
    with pytest.raises(StructuralError, match="shape mismatch"):
        metrics.psnr_y(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(StructuralError, match="window"):
        metrics.ssim(np.zeros((5, 9, 3)), np.zeros((5, 9, 3)))


def test_eval_model_structure_and_determinism():
    test = data.synth_corpus(9, 3, 36, name="t")
    m = zoo.build_model("abpn_tiny", True, 0)
    r1 = metrics.eval_model(m, test, baseline=True)
    r2 = metrics.eval_model(m, test, baseline=True)
    assert r1.to_json() == r2.to_json()
    assert r1.image_ids == test.ids()
    assert r1.mean_psnr == pytest.approx(np.mean(r1.psnr))
    assert r1.mean_ssim == pytest.approx(np.mean(r1.ssim))
    d = json.loads(r1.to_json())
    assert d["schema_version"] == 1 and d["baseline"]["model_id"] == "bicubic"
    with pytest.raises(StructuralError, match="empty"):
        metrics.eval_model(m, data.Corpus("e", []))


def test_eval_identity_upscaler_on_lr_sized_reference():
    # the bicubic baseline scores its own upscale of the LR input
    test = data.synth_corpus(4, 2, 30)
    r = metrics.eval_model(metrics.bicubic_upscaler(3), test)
    refs = [data.modcrop(t, 3) for t in test.tensors()]
    want = [metrics.psnr_y(data.to_uint8(data.bicubic_resize(metrics.lr_of(h, 3), 3)).astype(np.float32), h, 3)
            for h in refs]
    np.testing.assert_allclose(r.psnr, want)
