"""End-to-end workflows: simulated dataset generation, network training and
prediction, and the boundary-mismatch and noise-robustness experiments."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .forward import ForwardModel, OpticalMedium, groenhuis_reff
from .geometry import PhantomSpec, build_grid, grid_probe_layout, random_phantom, rasterize
from .io import Dataset
from .metrics import evaluate_pair
from .network import network_forward, standard_spec, train
from .preprocess import add_noise_snr, filter_pairs, normalize_input, weight_label
from .recon import LMConfig, lm_reconstruct, mm_sparse_reconstruct


def substream(seed, name, index=0):
    """Independent generator for a named purpose derived from one seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), int(index)])


@dataclass(frozen=True)
class ExperimentConfig:
    """Grid, probe, optics and phantom settings of a simulation study.

    Defaults are the desk-scale setup: a 60 x 60 x 20 mm slab at 2.5 mm.
    ``reff`` is the boundary reflection coefficient; ``None`` derives it from
    ``refractive_index``.
    """

    nx: int = 24
    ny: int = 24
    nz: int = 8
    resolution: float = 2.5
    n_src_x: int = 4
    n_src_y: int = 4
    n_det_x: int = 5
    n_det_y: int = 5
    mu0: float = 0.002
    musp: float = 1.0
    refractive_index: float = 1.33
    reff: float | None = None
    modulation_frequency: float = 70e6
    rho_max: float = 51.0
    count_min: int = 1
    count_max: int = 3
    radius_min: float = 2.5
    radius_max: float = 9.0
    contrast_min: float = 2.0
    contrast_max: float = 5.0
    refine: int = 2

    @classmethod
    def from_mapping(cls, values):
        names = {f.name for f in fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self):
        return asdict(self)

    @property
    def grid(self):
        return build_grid(self.nx, self.ny, self.nz, self.resolution)

    @property
    def fine_grid(self):
        return self.grid.refine(self.refine)

    @property
    def probe(self):
        return grid_probe_layout(self.grid, self.n_src_x, self.n_src_y, self.n_det_x, self.n_det_y,
                                 transport_length=1.0 / self.musp,
                                 modulation_frequency=self.modulation_frequency)

    @property
    def phantom_spec(self):
        return PhantomSpec((self.count_min, self.count_max), (self.radius_min, self.radius_max),
                           (self.contrast_min, self.contrast_max), self.mu0, self.musp)

    @property
    def boundary_reflection(self):
        return groenhuis_reff(self.refractive_index) if self.reff is None else self.reff

    def medium(self, grid=None):
        return OpticalMedium.homogeneous(grid or self.grid, self.mu0, self.musp,
                                         self.refractive_index, self.reff)


def generate_dataset(cfg, count, seed, n_train=None):
    """Simulate ``count`` random phantoms.

    Data come from the grid refined ``cfg.refine`` times; labels are rasterized
    directly on the reconstruction grid.  The manifest keeps the incident
    field of the data-generating background on the filtered pairs for later
    amplitude calibration.
    """
    n_train = count if n_train is None else n_train
    grid, probe = cfg.grid, cfg.probe
    data_grid = cfg.fine_grid if cfg.refine > 1 else grid
    model = ForwardModel(cfg.medium(data_grid), probe)
    pairs = filter_pairs(probe, cfg.rho_max)
    inputs = np.empty((count, pairs.shape[0]))
    labels = np.empty((count, grid.n_voxels))
    raw = np.empty((count, pairs.shape[0]), dtype=complex)
    phantoms = []
    for i in range(count):
        ph = random_phantom(substream(seed, "phantom", i), grid, cfg.phantom_spec)
        data = model.scattered(rasterize(ph, data_grid))
        raw[i] = data.vector(pairs)
        inputs[i] = normalize_input(np.abs(raw[i]))
        labels[i] = rasterize(ph, grid).values
        phantoms.append(ph.to_dict())
    u0 = model.incident_at_detectors()[pairs[:, 1], pairs[:, 0]]
    manifest = {
        "grid": grid.to_dict(),
        "data_grid": data_grid.to_dict(),
        "probe": probe.to_dict(),
        "experiment": cfg.to_dict(),
        "background": {"mu0": cfg.mu0, "musp": cfg.musp,
                       "refractive_index": cfg.refractive_index,
                       "reff": cfg.boundary_reflection},
        "rho_max": cfg.rho_max,
        "pairs": pairs.tolist(),
        "calibration": {"incident_re": u0.real.tolist(), "incident_im": u0.imag.tolist()},
        "split": {"train": n_train, "val": count - n_train},
        "seed": int(seed),
        "phantoms": phantoms,
    }
    return Dataset(manifest, inputs, labels, raw)


def config_from_dataset(dataset):
    return ExperimentConfig.from_mapping(dataset.manifest["experiment"])


def weighted_labels(labels):
    """Weighted labels and the per-sample weighting factors."""
    labels = np.asarray(labels, dtype=float)
    out = np.empty_like(labels)
    factors = np.empty(labels.shape[0])
    for i, lab in enumerate(labels):
        out[i], factors[i] = weight_label(lab)
    return out, factors


def desk_spec(n_meas, volume_shape, channels=8, denoising_layers=1):
    return standard_spec(n_meas, volume_shape, channels=channels, denoising_layers=denoising_layers)


def train_on_dataset(dataset, spec=None, *, channels=8, seed=0, max_epochs=120, patience=10,
                     batch_size=64, lr=1e-4, dtype=np.float32, log=None):
    if spec is None:
        spec = desk_spec(dataset.inputs.shape[1], dataset.grid.shape, channels)
    labels, _ = weighted_labels(dataset.labels)
    result = train(spec, dataset.inputs.astype(np.float64), labels, dataset.train_idx,
                   dataset.val_idx, batch_size=batch_size, max_epochs=max_epochs,
                   patience=patience, lr=lr, rng_seed=seed, dtype=dtype, log=log)
    return spec, result


def predict(spec, params, inputs):
    """Network outputs (weighted scale) as ``(S, N)``."""
    out = network_forward(spec, params, np.atleast_2d(inputs), "infer")
    return out.reshape(out.shape[0], -1).astype(np.float64)


def calibrated_data(raw, model_incident, measured_incident):
    """Scale measured scattered data by the ratio of model to measured background peaks."""
    return raw * (np.abs(model_incident).max() / np.abs(measured_incident).max())


def calibrated_sample(dataset, index, model_cfg=None):
    """Scattered data of one sample ready for a model-based solver.

    The data are calibrated against the background field stored in the
    manifest, so a model whose boundary differs from the data's is handled
    the way measured data would be.  Returns ``(data, medium, probe, pairs)``.
    """
    model_cfg = model_cfg or config_from_dataset(dataset)
    pairs = dataset.pairs
    probe = model_cfg.probe
    medium = model_cfg.medium()
    u_model = ForwardModel(medium, probe).incident_at_detectors()[pairs[:, 1], pairs[:, 0]]
    cal = dataset.manifest["calibration"]
    u_meas = np.asarray(cal["incident_re"]) + 1j * np.asarray(cal["incident_im"])
    g = calibrated_data(dataset.raw[index].astype(complex), u_model, u_meas)
    return g, medium, probe, pairs


def lm_on_sample(dataset, index, model_cfg=None, lm=LMConfig()):
    """LM reconstruction of one sample about ``model_cfg``'s background."""
    g, medium, probe, pairs = calibrated_sample(dataset, index, model_cfg)
    return lm_reconstruct(g, medium, probe, lm, pairs=pairs)


def sparse_on_sample(dataset, index, sparse, model_cfg=None):
    g, medium, probe, pairs = calibrated_sample(dataset, index, model_cfg)
    return mm_sparse_reconstruct(g, medium, probe, sparse, pairs=pairs)


def boundary_mismatch_experiment(train_set, test_set, spec, params, lm=LMConfig(), log=None):
    """Network versus LM on test data simulated with a different boundary.

    Both methods only know the training configuration.  Metrics are computed
    on the weighted-label scale.  Returns ``{"network": [...], "lm": [...]}``
    lists of :class:`~deepdot.metrics.MetricsReport`.
    """
    model_cfg = config_from_dataset(train_set)
    weighted, factors = weighted_labels(test_set.labels)
    preds = predict(spec, params, test_set.inputs)
    shape = test_set.grid.shape
    out = {"network": [], "lm": []}
    for i in range(len(test_set)):
        label = weighted[i].reshape(shape)
        out["network"].append(evaluate_pair(preds[i].reshape(shape), label, f"nn-{i}", f"label-{i}"))
        res = lm_on_sample(test_set, i, model_cfg, lm)
        est = res.delta_mu.values * factors[i]
        out["lm"].append(evaluate_pair(est.reshape(shape), label, f"lm-{i}", f"label-{i}"))
        if log is not None:
            log({"index": i, "network": out["network"][-1].to_dict(), "lm": out["lm"][-1].to_dict(),
                 "lm_iterations": res.iterations_used})
    return out


def noisy_inputs(raw, snr_db, seed):
    """Normalized network inputs from amplitudes corrupted at ``snr_db``."""
    amp = np.abs(np.asarray(raw))
    out = np.empty(amp.shape)
    for i, a in enumerate(amp):
        out[i] = normalize_input(add_noise_snr(a, snr_db, substream(seed, "noise", i)))
    return out


def snr_experiment(dataset, indices, spec, params, snrs=(0, 5, 10, 20), seed=0):
    """Median RMSE (weighted scale) of network predictions per SNR; ``None`` is noiseless."""
    indices = np.asarray(indices, dtype=int)
    weighted, _ = weighted_labels(dataset.labels[indices])
    result = {}
    for snr in (None, *snrs):
        inp = dataset.inputs[indices] if snr is None else noisy_inputs(dataset.raw[indices], snr, seed)
        pred = predict(spec, params, inp)
        err = np.sqrt(np.mean((pred - weighted) ** 2, axis=1))
        result[snr] = {"median_rmse": float(np.median(err)), "rmse": err.tolist()}
    return result


def with_reff(cfg, reff):
    return replace(cfg, reff=reff)
