import json

import numpy as np
import pytest
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from objcompose.data import Box, generate_scene, synthesize
from objcompose.errors import DataError, ParameterError, ShapeError
from objcompose.evaluation import (
    PSNR_CAP,
    alignment_scores,
    cosine_matrix,
    histogram_divergence,
    l1_metric,
    outside_box_psnr,
    psnr,
    score_samples,
    ssim,
)


def _pair(seed=0, noise=0.1):
    rng = np.random.default_rng(seed)
    a = rng.random((32, 32, 3))
    b = np.clip(a + noise * rng.standard_normal(a.shape), 0, 1)
    return a, b


@pytest.mark.parametrize("seed", range(4))
def test_psnr_matches_skimage(seed):
    a, b = _pair(seed)
    assert abs(psnr(a, b) - peak_signal_noise_ratio(a, b, data_range=1.0)) < 1e-9


def test_psnr_cap_and_shape():
    a, _ = _pair()
    assert psnr(a, a) == PSNR_CAP
    with pytest.raises(ShapeError):
        psnr(a, a[:10])


@pytest.mark.parametrize("seed,noise", [(0, 0.05), (1, 0.2), (2, 0.5)])
def test_ssim_matches_skimage(seed, noise):
    a, b = _pair(seed, noise)
    ref = structural_similarity(a, b, data_range=1.0, channel_axis=-1, gaussian_weights=True,
                                sigma=1.5, use_sample_covariance=False)
    assert abs(ssim(a, b) - ref) < 1e-6


def test_ssim_identity_and_small_image():
    a, _ = _pair()
    assert abs(ssim(a, a) - 1.0) < 1e-12
    with pytest.raises(ShapeError):
        ssim(a[:8, :8], a[:8, :8])


def test_l1_and_outside_box():
    a = np.zeros((16, 16, 3))
    b = a.copy()
    b[4:8, 4:8] = 1.0
    box = Box(4, 4, 8, 8)
    assert outside_box_psnr(a, b, box) == PSNR_CAP
    assert abs(l1_metric(a, b) - 16 / 256) < 1e-12
    b[0, 0] = 0.1
    mse = 3 * 0.01 / ((256 - 16) * 3)
    assert abs(outside_box_psnr(a, b, box) - 10 * np.log10(1 / mse)) < 1e-9


def test_histogram_closed_form():
    n = 10 * 10 * 3
    zeros, ones = [np.zeros((10, 10, 3))], [np.ones((10, 10, 3))]
    expected = 2 * n / (n + 256) * np.log(n + 1)
    assert abs(histogram_divergence(zeros, ones) - expected) < 1e-12
    assert histogram_divergence(zeros, zeros) == 0.0
    with pytest.raises(DataError):
        histogram_divergence([], ones)


def test_histogram_artifacts(tmp_path):
    imgs = [s.target_image for s in synthesize(2, seed=0)]
    histogram_divergence(imgs, imgs[::-1], out_dir=tmp_path, tag="h")
    assert (tmp_path / "h.csv").exists() and (tmp_path / "h.png").exists()
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert len(lines) == 257


def test_score_samples_writes_report(tmp_path):
    scenes = synthesize(3, seed=4)
    gen = [s.target_image for s in scenes]
    rep = score_samples(gen, scenes, out_dir=tmp_path, metadata={"seed": 1})
    assert rep.aggregate["psnr"] == PSNR_CAP and abs(rep.aggregate["ssim"] - 1) < 1e-9
    blob = json.loads((tmp_path / "metrics.json").read_text())
    assert blob["metadata"] == {"seed": 1} and len(blob["per_sample"]) == 3
    assert (tmp_path / "metrics.csv").read_text().startswith("scene_id,psnr,ssim,l1,outside_box_psnr")
    with pytest.raises(ShapeError):
        score_samples(gen[:2], scenes)


def test_cosine_and_alignment_oracle():
    v = np.array([[1.0, 0], [1, 0.1], [0, 1], [0.1, 1], [0, 0]])
    labels = np.array([0, 0, 1, 1, 1])
    res = alignment_scores(v, labels)
    sim = cosine_matrix(v[:4])
    assert res.excluded == 1
    assert abs(res.within - np.mean([sim[0, 1], sim[2, 3]])) < 1e-12
    assert abs(res.between - np.mean([sim[0, 2], sim[0, 3], sim[1, 2], sim[1, 3]])) < 1e-12
    with pytest.raises(DataError):
        alignment_scores(v[:2], labels[:2])


def test_alignment_needs_groups():
    from objcompose.evaluation import ViewGroup, cross_view_alignment

    s = generate_scene(0)
    with pytest.raises(ParameterError):
        cross_view_alignment(None, [ViewGroup(s.hint_image, s.box_viz, [s.source_image] * 2)])


def test_pipeline_on_tiny_state():
    from objcompose.data import SynthParams
    from objcompose.evaluation import cross_view_alignment, generate_images, groups_from_samples, profile_run
    from objcompose.sampler import SamplerSchedule
    from objcompose.training import init_state

    from oracles import tiny_config

    state = init_state(tiny_config())
    params = SynthParams(image_size=16, box_min=4, box_max=12)
    scenes = synthesize(3, seed=0, params=params, views=3)
    sched = SamplerSchedule(ddim_steps=4)
    imgs = generate_images(state, scenes, sched, seed=1)
    assert len(imgs) == 3 and imgs[0].shape == (16, 16, 3)
    again = generate_images(state, scenes, sched, seed=1)
    assert all(np.array_equal(a, b) for a, b in zip(imgs, again))
    res = cross_view_alignment(state, groups_from_samples(scenes))
    assert res.similarity.shape == (9, 9)
    prof = profile_run(state, n=2, sample=scenes[0], steps=3)
    assert prof["runs"] == 2 and len(prof["timings_s"]) == 2 and prof["param_count"] > 0
