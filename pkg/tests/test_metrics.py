import numpy as np
import pytest

from retinagen.errors import ConfigurationError, NumericError
from retinagen.metrics import (CURVE_SCALES, ablation_percept, evaluate_image_sets,
                               fid, mse, severity_curve, toy_embedder,
                               write_curve_csv)
from retinagen.synthetic import synth_descriptor_set, synth_gan_dataset

from oracles import frechet_closed_form


# -- fid -----------------------------------------------------------------

def test_fid_identical_sets_is_zero(rng):
    feats = rng.standard_normal((50, 8))
    assert fid(feats, feats) <= 1e-6


def test_fid_constant_1d_sets():
    a = np.zeros((10, 1))
    b = np.ones((10, 1))
    assert fid(a, b) == pytest.approx(1.0, abs=1e-12)


def test_fid_matches_closed_form_on_gaussians(rng):
    mu_a = np.array([0.0, 1.0, -2.0])
    mu_b = np.array([1.5, -0.5, 0.0])
    la = rng.standard_normal((3, 3)) * 0.6
    lb = rng.standard_normal((3, 3)) * 0.4
    cov_a = la @ la.T + 0.5 * np.eye(3)
    cov_b = lb @ lb.T + 0.8 * np.eye(3)
    a = rng.multivariate_normal(mu_a, cov_a, size=10_000)
    b = rng.multivariate_normal(mu_b, cov_b, size=10_000)
    expected = frechet_closed_form(mu_a, cov_a, mu_b, cov_b)
    assert fid(a, b) == pytest.approx(expected, rel=0.05)


def test_fid_is_symmetric(rng):
    a = rng.standard_normal((40, 5))
    b = rng.standard_normal((40, 5)) + 0.5
    assert abs(fid(a, b) - fid(b, a)) <= 1e-6


def test_fid_input_validation(rng):
    with pytest.raises(ConfigurationError):
        fid(rng.standard_normal((10, 3)), rng.standard_normal((10, 4)))
    with pytest.raises(ConfigurationError):
        fid(rng.standard_normal((1, 3)), rng.standard_normal((10, 3)))


def test_fid_rejects_non_psd_beyond_tolerance():
    from retinagen.metrics import _sqrtm_psd

    with pytest.raises(NumericError):
        _sqrtm_psd(np.array([[1.0, 0.0], [0.0, -0.5]]))


# -- mse -----------------------------------------------------------------

def test_mse_identical_pairs_is_zero(rng):
    img = rng.random((16, 16, 3))
    assert mse([(img, img), (img, img)]) == 0.0


def test_mse_zero_vs_one_is_one():
    z = np.zeros((8, 8, 3))
    o = np.ones((8, 8, 3))
    assert mse([(z, o)]) == 1.0


def test_mse_shape_mismatch():
    with pytest.raises(ConfigurationError):
        mse([(np.zeros((4, 4, 3)), np.zeros((5, 5, 3)))])


def test_mse_nonnegative_and_zero_iff_identical(rng):
    a = rng.random((8, 8, 3))
    b = a.copy()
    b[0, 0, 0] += 0.1
    assert mse([(a, a)]) == 0.0
    assert mse([(a, b)]) > 0.0


def test_evaluate_image_sets_paired(rng):
    images = [rng.random((32, 32, 3)).astype(np.float32) for _ in range(6)]
    report = evaluate_image_sets(images, images, toy_embedder(), paired=True)
    assert report.fid <= 1e-6
    assert report.mse == 0.0
    assert len(report.per_image) == 6


# -- severity curve ------------------------------------------------------

def _mass_stub_pieces():
    """Stub generator painting descriptor mass; stub severity reading it back."""

    def stub_generate(vessels, dset, z):
        size = dset.image_size
        img = np.zeros((size, size, 3), dtype=np.float32)
        for d in dset.descriptors:
            img[d.box.top:d.box.top + d.box.height,
                d.box.left:d.box.left + d.box.width, 0] += 0.05
        return np.clip(img, 0.0, 1.0)

    def stub_severity(image):
        return float(image.sum())

    return stub_generate, stub_severity


def test_severity_curve_protocol_shape():
    cases = [(np.zeros((64, 64), dtype=np.float32),
              synth_descriptor_set(64, [(20, 20), (40, 40)], box=6, seed=i))
             for i in range(3)]
    gen, sev = _mass_stub_pieces()
    rows, records = severity_curve(cases, gen, sev, seed=0)
    assert [r["scale"] for r in rows] == list(CURVE_SCALES)
    assert len(rows) == 9
    medians = [r["median"] for r in rows]
    assert rows[0]["median"] == 0.0
    assert all(medians[i] <= medians[i + 1] for i in range(len(medians) - 1))


def test_severity_curve_isolates_failures():
    def broken_generate(vessels, dset, z):
        if len(dset) == 0:
            raise RuntimeError("boom")
        gen, _ = _mass_stub_pieces()
        return gen(vessels, dset, z)

    cases = [(np.zeros((64, 64), dtype=np.float32),
              synth_descriptor_set(64, [(20, 20)], box=6, seed=0))]
    _, sev = _mass_stub_pieces()
    rows, records = severity_curve(cases, broken_generate, sev, scales=(0.0, 1.0))
    assert rows[0]["n"] == 0
    assert rows[1]["n"] == 1
    assert any("error" in r for r in records)


def test_curve_csv(tmp_path):
    rows = [{"scale": 0.0, "n": 2, "q1": 0.0, "median": 0.1, "q3": 0.2,
             "lo": 0.0, "hi": 0.3}]
    path = write_curve_csv(tmp_path / "curve.csv", rows)
    text = open(path).read().splitlines()
    assert text[0] == "scale,n,q1,median,q3,lo,hi"
    assert len(text) == 2


# -- ablation sweep ------------------------------------------------------

def test_ablation_percept_sweep(tmp_path):
    import torch

    from retinagen.detector import build_detector, desk_config
    from retinagen.gan import DiscriminatorConfig, GanSchedule, GeneratorConfig
    from retinagen.perceptual import toy_feature_net

    size = 64
    triples = synth_gan_dataset(n=2, size=size, seed=0, channels=(4, 4))
    gcfg = GeneratorConfig(image_size=size, kernel=3, down_channels=(4,) * 6,
                           up_channels=(4,) * 6, desc_channels=(4, 4),
                           noise_dim=8, noise_channels=4)
    dcfg = DiscriminatorConfig(image_size=size, kernel=3, channels=(4,) * 5)
    det = build_detector(desk_config(size, 16), seed=1)
    fnet = toy_feature_net(seed=2)
    sched = GanSchedule(steps=4, seed=0, save_every=4)

    weights = [0.0, 1.0]
    rows, grid = ablation_percept(weights, triples, gcfg, dcfg, sched, fnet, det,
                                  out_dir=str(tmp_path / "sweep"))
    assert len(rows) == len(weights)
    assert rows[0]["w_p"] == 0.0 and rows[0]["error"] == ""
    from PIL import Image

    with Image.open(grid) as grid_img:
        assert grid_img.size[0] == size * len(weights)

    rows2, _ = ablation_percept(weights, triples, gcfg, dcfg, sched, fnet, det,
                                out_dir=str(tmp_path / "sweep2"))
    for r1, r2 in zip(rows, rows2):
        assert r1["final_L_G"] == r2["final_L_G"]
        assert r1["final_L_D"] == r2["final_L_D"]
