"""Measurement conditioning: pair filtering, calibration, bulk fitting,
input normalization, label weighting and noise injection."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, InvalidArgument
from .forward import C_VACUUM
from .geometry import DeltaMuVolume

ENVELOPE_BIN = 5.0  # mm


@dataclass(frozen=True)
class MeasurementVector:
    """One real value per ``(source, detector)`` pair.

    ``pair_index`` is an ``(K, 2)`` integer array of ``(source, detector)``
    rows; ``separations`` (mm) is optional and only needed for envelope
    calibration and bulk fitting.
    """

    values: np.ndarray
    pair_index: np.ndarray
    separations: np.ndarray | None = field(default=None, repr=False)
    calibration: tuple = (1.0, 0.0)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        p = np.asarray(self.pair_index, dtype=int).reshape(-1, 2)
        if v.size != p.shape[0]:
            raise InvalidArgument(f"{v.size} values for {p.shape[0]} pairs")
        if not np.all(np.isfinite(v)):
            raise InvalidArgument("measurement values must be finite")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "pair_index", p)
        if self.separations is not None:
            object.__setattr__(self, "separations", np.asarray(self.separations, float).ravel())

    def with_values(self, values):
        return MeasurementVector(values, self.pair_index, self.separations, self.calibration)


def measurement_vector(data, pairs):
    """Amplitudes ``|g|`` of a :class:`~deepdot.forward.MultiStaticMatrix` on ``pairs``."""
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    rho = data.separations()[pairs[:, 1], pairs[:, 0]]
    return MeasurementVector(np.abs(data.vector(pairs)), pairs, rho)


def filter_pairs(config, rho_max=51.0):
    """``(source, detector)`` pairs closer than ``rho_max`` mm, detector-major.

    An empty selection only warns.
    """
    rho = config.separations()
    det, src = np.nonzero(rho < rho_max)
    pairs = np.stack([src, det], axis=1)
    if pairs.shape[0] == 0:
        warnings.warn(f"no source-detector pair closer than {rho_max} mm", RuntimeWarning)
    return pairs


def _envelope(values, rho, width=ENVELOPE_BIN):
    bins = np.floor(rho / width).astype(int)
    keys = np.unique(bins)
    return np.array([values[bins == k].max() for k in keys])


def calibrate(measured, simulated, fit_offset=True):
    """Affine map ``scale * simulated + offset`` onto ``measured``.

    The peak of the mapped simulation equals the measured peak exactly; the
    remaining degree of freedom (the scale) is the least-squares fit of the
    two amplitude-versus-distance envelopes (maxima over 5 mm bins).  Without
    separations every entry is its own bin.  ``fit_offset=False`` gives the
    pure peak ratio.
    """
    if not np.array_equal(measured.pair_index, simulated.pair_index):
        raise InvalidArgument("measurement vectors cover different pairs")
    m, s = measured.values, simulated.values
    if s.max() == 0:
        raise DegenerateInput("simulated data has a zero peak")
    if not fit_offset:
        return {"scale": float(m.max() / s.max()), "offset": 0.0}
    rho = simulated.separations if simulated.separations is not None else measured.separations
    if rho is None:
        em, es = m, s
    else:
        em, es = _envelope(m, rho), _envelope(s, rho)
    dm, ds = em - m.max(), es - s.max()
    denom = float(ds @ ds)
    scale = float(dm @ ds) / denom if denom > 0 else float(m.max() / s.max())
    offset = float(m.max() - scale * s.max())
    return {"scale": scale, "offset": offset}


def apply_calibration(v, calibration):
    out = calibration["scale"] * v.values + calibration["offset"]
    return MeasurementVector(out, v.pair_index, v.separations,
                             (calibration["scale"], calibration["offset"]))


@dataclass
class BulkFit:
    mu_bulk: float
    d_bulk: float
    converged: bool
    iterations: int

    @property
    def musp_bulk(self):
        return 1.0 / (3.0 * self.d_bulk) - self.mu_bulk


def infinite_medium_amplitude(rho, mu, D, omega, refractive_index=1.33, S0=1.0):
    """``|S0 exp(-kappa rho) / (4 pi D rho)|`` with ``kappa = sqrt((mu - i w/c0)/D)``."""
    c0 = C_VACUUM / refractive_index
    kappa = np.sqrt((mu - 1j * omega / c0) / D)
    rho = np.asarray(rho, dtype=float)
    return S0 * np.exp(-kappa.real * rho) / (4.0 * np.pi * D * rho)


def fit_bulk(amplitudes, config, omega=None, *, init=(0.01, 1.0 / 3.0), refractive_index=1.33,
             max_iter=50, rtol=1e-8):
    """Homogeneous ``(mu, D)`` from amplitude-versus-distance data.

    Gauss-Newton (Newton-Raphson on the normal equations) in log-amplitude and
    log-parameters, with step halving when the misfit grows.
    """
    if omega is None:
        omega = config.omega
    rho = amplitudes.separations
    if rho is None:
        p = amplitudes.pair_index
        rho = config.separations()[p[:, 1], p[:, 0]]
    y = amplitudes.values
    if y.size < 10 or np.ptp(rho) < 20.0:
        raise InvalidArgument("bulk fit needs >= 10 pairs spanning >= 20 mm")
    if np.any(y <= 0):
        raise InvalidArgument("amplitudes must be positive")
    logy = np.log(y)
    c0 = C_VACUUM / refractive_index
    S0 = config.source_intensity

    def residual(theta):
        mu, D = np.exp(theta)
        return np.log(infinite_medium_amplitude(rho, mu, D, omega, refractive_index, S0)) - logy

    def jac(theta):
        mu, D = np.exp(theta)
        kappa = np.sqrt((mu - 1j * omega / c0) / D)
        dk_dmu = 1.0 / (2.0 * D * kappa)
        dk_dD = -kappa / (2.0 * D)
        dmu = -rho * dk_dmu.real
        dD = -1.0 / D - rho * dk_dD.real
        return np.stack([dmu * mu, dD * D], axis=1)  # chain rule for log-parameters

    theta = np.log(np.asarray(init, dtype=float))
    r = residual(theta)
    cost = r @ r
    for it in range(1, max_iter + 1):
        J = jac(theta)
        step = np.linalg.lstsq(J, -r, rcond=None)[0]
        t = 1.0
        while True:
            trial = theta + t * step
            rt = residual(trial)
            ct = rt @ rt
            if ct <= cost or t < 1e-6:
                break
            t *= 0.5
        rel = np.max(np.abs(np.expm1(trial - theta)))
        theta, r, cost = trial, rt, ct
        if not np.all(np.isfinite(theta)):
            break
        if rel < rtol:
            mu, D = np.exp(theta)
            return BulkFit(float(mu), float(D), True, it)
    mu, D = np.exp(theta)
    return BulkFit(float(mu), float(D), False, max_iter)


def normalize_input(v):
    """Center on zero and scale the largest deviation to one."""
    vals = v.values if isinstance(v, MeasurementVector) else np.asarray(v, dtype=float)
    c = vals - vals.mean()
    peak = np.abs(c).max() if c.size else 0.0
    if peak == 0:
        raise DegenerateInput("cannot normalize a constant vector")
    out = c / peak
    return v.with_values(out) if isinstance(v, MeasurementVector) else out


def weight_label(volume):
    """Scale nonzero voxels by ``N / count_nonzero``; returns ``(weighted, factor)``."""
    vals = volume.values if isinstance(volume, DeltaMuVolume) else np.asarray(volume, float)
    nnz = np.count_nonzero(vals)
    factor = vals.size / nnz if nnz else 1.0
    out = vals * factor
    if isinstance(volume, DeltaMuVolume):
        out = DeltaMuVolume(volume.grid, out)
    return out, factor


def unweight_label(volume, factor):
    if isinstance(volume, DeltaMuVolume):
        return DeltaMuVolume(volume.grid, volume.values / factor)
    return np.asarray(volume) / factor


def _values(v):
    return v.values if isinstance(v, MeasurementVector) else np.asarray(v, dtype=float)


def _rewrap(v, out):
    return v.with_values(out) if isinstance(v, MeasurementVector) else out


def add_gaussian(v, sigma, rng_seed=None):
    if sigma < 0:
        raise InvalidArgument("sigma must be non-negative")
    vals = _values(v)
    if sigma == 0:
        return _rewrap(v, vals.copy())
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return _rewrap(v, vals + rng.normal(0.0, sigma, size=vals.shape))


def add_noise_snr(v, snr_db, rng_seed=None):
    """White Gaussian noise with power ``mean(v^2) / 10^(snr_db/10)``."""
    if not np.isfinite(snr_db):
        raise InvalidArgument("snr_db must be finite")
    vals = _values(v)
    sigma = np.sqrt(np.mean(vals**2) / 10.0 ** (snr_db / 10.0))
    return add_gaussian(v, sigma, rng_seed)
