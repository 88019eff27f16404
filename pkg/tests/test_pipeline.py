import numpy as np
import pytest

from deepdot.forward import groenhuis_reff
from deepdot.pipeline import (
    ExperimentConfig,
    calibrated_sample,
    generate_dataset,
    lm_on_sample,
    noisy_inputs,
    predict,
    snr_experiment,
    substream,
    weighted_labels,
    with_reff,
)
from deepdot.network import standard_spec, xavier_init
from deepdot.recon import LMConfig

TINY = ExperimentConfig(nx=8, ny=8, nz=4, n_src_x=2, n_src_y=2, n_det_x=2, n_det_y=2,
                        radius_min=2.5, radius_max=3.5, count_max=1)


@pytest.fixture(scope="module")
def tiny_set():
    return generate_dataset(TINY, 5, seed=11, n_train=3)


def test_substreams_are_independent_and_reproducible():
    a = substream(0, "phantom", 1).random(4)
    np.testing.assert_array_equal(a, substream(0, "phantom", 1).random(4))
    assert not np.array_equal(a, substream(0, "noise", 1).random(4))
    assert not np.array_equal(a, substream(0, "phantom", 2).random(4))
    assert not np.array_equal(a, substream(1, "phantom", 1).random(4))


def test_config_defaults_and_validation():
    cfg = ExperimentConfig()
    assert cfg.grid.shape == (24, 24, 8)
    assert cfg.fine_grid.shape == (48, 48, 16)
    assert cfg.boundary_reflection == pytest.approx(groenhuis_reff(1.33))
    assert with_reff(cfg, 0.0).boundary_reflection == 0.0
    assert ExperimentConfig.from_mapping(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ExperimentConfig.from_mapping({"nx": 4, "colour": 1})


def test_dataset_layout(tiny_set):
    ds = tiny_set
    M = ds.pairs.shape[0]
    assert ds.inputs.shape == (5, M) and ds.raw.shape == (5, M)
    assert ds.labels.shape == (5, TINY.grid.n_voxels)
    assert ds.manifest["data_grid"]["nx"] == 16
    assert ds.manifest["split"] == {"train": 3, "val": 2}
    np.testing.assert_allclose(ds.inputs.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(np.abs(ds.inputs).max(axis=1), 1)
    for lab in ds.labels:
        assert lab.max() > 0 and lab.min() >= 0
    assert len(ds.manifest["calibration"]["incident_re"]) == M


def test_generation_is_seeded(tiny_set):
    again = generate_dataset(TINY, 5, seed=11, n_train=3)
    np.testing.assert_array_equal(again.raw, tiny_set.raw)
    other = generate_dataset(TINY, 5, seed=12, n_train=3)
    assert not np.array_equal(other.labels, tiny_set.labels)


def test_calibration_is_one_real_scale(tiny_set):
    g, _, _, pairs = calibrated_sample(tiny_set, 0)
    assert g.shape == (pairs.shape[0],)
    ratio = g / tiny_set.raw[0]
    np.testing.assert_allclose(ratio, ratio[0].real, rtol=1e-5)
    assert ratio[0].real > 0
    g0, *_ = calibrated_sample(tiny_set, 0, with_reff(TINY, 0.0))
    rel = g0 / g
    np.testing.assert_allclose(rel, rel[0].real, rtol=1e-5)
    assert rel[0].real < 1


def test_lm_on_sample_runs(tiny_set):
    res = lm_on_sample(tiny_set, 1, lm=LMConfig(max_outer_iterations=3))
    assert res.delta_mu.values.min() >= 0
    assert res.iterations_used <= 3


def test_weighted_labels_factors(tiny_set):
    w, f = weighted_labels(tiny_set.labels)
    for i, lab in enumerate(tiny_set.labels):
        assert f[i] == lab.size / np.count_nonzero(lab)
        np.testing.assert_allclose(w[i], lab * f[i])


def test_noise_and_snr_experiment(tiny_set):
    a = noisy_inputs(tiny_set.raw, 10, 0)
    np.testing.assert_array_equal(a, noisy_inputs(tiny_set.raw, 10, 0))
    assert not np.array_equal(a, tiny_set.inputs)
    spec = standard_spec(tiny_set.inputs.shape[1], TINY.grid.shape, channels=2)
    params = xavier_init(spec, 0)
    pred = predict(spec, params, tiny_set.inputs)
    assert pred.shape == tiny_set.labels.shape
    res = snr_experiment(tiny_set, [0, 1, 2], spec, params, snrs=(0, 20))
    assert set(res) == {None, 0, 20}
    assert len(res[0]["rmse"]) == 3
    assert res[None]["median_rmse"] == pytest.approx(np.median(res[None]["rmse"]))
