"""Voxel domain, probe layout and random spherical-inclusion phantoms.

Volumes are stored as flat arrays over the grid in C order of ``(nx, ny, nz)``,
i.e. the linear index of voxel ``(ix, iy, iz)`` is ``(ix * ny + iy) * nz + iz``
and ``z`` varies fastest.  All lengths are in mm, absorption in mm^-1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationFailure, InvalidArgument

__all__ = [
    "VoxelGrid",
    "SourceDetectorConfig",
    "Inclusion",
    "Phantom",
    "PhantomSpec",
    "DeltaMuVolume",
    "build_grid",
    "grid_probe_layout",
    "random_phantom",
    "rasterize",
]

DEFAULT_FREQUENCY = 70e6


@dataclass(frozen=True)
class VoxelGrid:
    nx: int
    ny: int
    nz: int
    resolution: float
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = (self.nx, self.ny, self.nz)
        if any(int(d) != d or d < 1 for d in dims):
            raise InvalidArgument(f"grid dimensions must be positive integers, got {dims}")
        if not self.resolution > 0:
            raise InvalidArgument(f"resolution must be positive, got {self.resolution}")
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def shape(self):
        return (self.nx, self.ny, self.nz)

    @property
    def n_voxels(self):
        return self.nx * self.ny * self.nz

    @property
    def voxel_volume(self):
        return self.resolution ** 3

    @property
    def extent(self):
        """Physical edge lengths of the box in mm."""
        return np.array(self.shape, dtype=float) * self.resolution

    @property
    def upper(self):
        return np.asarray(self.origin) + self.extent

    def axis_centers(self, axis):
        n = self.shape[axis]
        return self.origin[axis] + (np.arange(n) + 0.5) * self.resolution

    def centers(self):
        """Voxel centers as an ``(N, 3)`` array in linear-index order."""
        cx, cy, cz = (self.axis_centers(a) for a in range(3))
        X, Y, Z = np.meshgrid(cx, cy, cz, indexing="ij")
        return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def voxel_center(self, index):
        ix, iy, iz = np.unravel_index(index, self.shape)
        return np.asarray(self.origin) + (np.array([ix, iy, iz]) + 0.5) * self.resolution

    def nearest_voxel(self, point):
        """Linear index of the voxel whose center is nearest to ``point``."""
        p = (np.asarray(point, dtype=float) - np.asarray(self.origin)) / self.resolution - 0.5
        ijk = np.clip(np.rint(p).astype(int), 0, np.array(self.shape) - 1)
        return int(np.ravel_multi_index(tuple(ijk), self.shape))

    def contains(self, point, tol=1e-9):
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= np.asarray(self.origin) - tol) and np.all(p <= self.upper + tol))

    def refine(self, factor=2):
        """Same box subdivided ``factor`` times per axis."""
        return VoxelGrid(self.nx * factor, self.ny * factor, self.nz * factor,
                         self.resolution / factor, self.origin)

    def to_dict(self):
        return {"nx": self.nx, "ny": self.ny, "nz": self.nz,
                "resolution": self.resolution, "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["nx"]), int(d["ny"]), int(d["nz"]), float(d["resolution"]),
                   tuple(d.get("origin", (0.0, 0.0, 0.0))))


def build_grid(nx, ny, nz, resolution, origin=(0.0, 0.0, 0.0)):
    return VoxelGrid(nx, ny, nz, resolution, origin)


@dataclass(frozen=True)
class SourceDetectorConfig:
    """Point sources ``t_m`` and detectors ``d_n`` in mm."""

    sources: np.ndarray
    detectors: np.ndarray
    modulation_frequency: float = DEFAULT_FREQUENCY
    source_intensity: float = 1.0

    def __post_init__(self):
        src = np.atleast_2d(np.asarray(self.sources, dtype=float))
        det = np.atleast_2d(np.asarray(self.detectors, dtype=float))
        if src.shape[0] < 1 or src.shape[1] != 3:
            raise InvalidArgument("need at least one 3-D source position")
        if det.shape[0] < 1 or det.shape[1] != 3:
            raise InvalidArgument("need at least one 3-D detector position")
        src.setflags(write=False)
        det.setflags(write=False)
        object.__setattr__(self, "sources", src)
        object.__setattr__(self, "detectors", det)

    @property
    def n_sources(self):
        return self.sources.shape[0]

    @property
    def n_detectors(self):
        return self.detectors.shape[0]

    @property
    def omega(self):
        return 2.0 * np.pi * self.modulation_frequency

    def separations(self):
        """``(N_d, N_t)`` matrix of source-detector distances."""
        diff = self.detectors[:, None, :] - self.sources[None, :, :]
        return np.linalg.norm(diff, axis=-1)

    def check_inside(self, grid):
        for p in np.vstack([self.sources, self.detectors]):
            if not grid.contains(p):
                raise InvalidArgument(f"probe position {p} lies outside the grid")

    def to_dict(self):
        return {"sources": self.sources.tolist(), "detectors": self.detectors.tolist(),
                "modulation_frequency": self.modulation_frequency,
                "source_intensity": self.source_intensity}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["sources"]), np.array(d["detectors"]),
                   float(d["modulation_frequency"]), float(d.get("source_intensity", 1.0)))


def _face_lattice(grid, nx, ny):
    xs = grid.origin[0] + (np.arange(nx) + 0.5) * grid.extent[0] / nx
    ys = grid.origin[1] + (np.arange(ny) + 0.5) * grid.extent[1] / ny
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    return X.ravel(), Y.ravel()


def grid_probe_layout(grid, n_src_x, n_src_y, n_det_x, n_det_y, *,
                      transport_length=1.0, modulation_frequency=DEFAULT_FREQUENCY,
                      source_intensity=1.0):
    """Transmission geometry: sources under the top face, detectors on the bottom face.

    Each lattice is uniform and centered on its face (cell-centered spacing
    ``extent / n``).  Sources sit ``transport_length`` (= 1/musp) below the top
    face, which is the face at maximum z.
    """
    counts = (n_src_x, n_src_y, n_det_x, n_det_y)
    if any(int(c) != c or c < 1 for c in counts):
        raise InvalidArgument(f"probe counts must be >= 1, got {counts}")
    if n_src_x > grid.nx or n_det_x > grid.nx or n_src_y > grid.ny or n_det_y > grid.ny:
        raise InvalidArgument("probe lattice is denser than the grid footprint")
    if not 0 <= transport_length <= grid.extent[2]:
        raise InvalidArgument("source depth exceeds the grid thickness")
    top = grid.origin[2] + grid.extent[2]
    sx, sy = _face_lattice(grid, n_src_x, n_src_y)
    dx, dy = _face_lattice(grid, n_det_x, n_det_y)
    sources = np.stack([sx, sy, np.full(sx.size, top - transport_length)], axis=1)
    detectors = np.stack([dx, dy, np.full(dx.size, grid.origin[2])], axis=1)
    return SourceDetectorConfig(sources, detectors, modulation_frequency, source_intensity)


@dataclass(frozen=True)
class Inclusion:
    center: tuple
    radius: float
    contrast: float


@dataclass(frozen=True)
class Phantom:
    inclusions: tuple
    background_mu0: float = 0.002
    background_musp: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "inclusions", tuple(self.inclusions))
        if not _disjoint(self.inclusions):
            raise InvalidArgument("phantom inclusions overlap")

    def to_dict(self):
        return {
            "mu0": self.background_mu0,
            "musp": self.background_musp,
            "inclusions": [
                {"center": list(map(float, c.center)), "radius": c.radius, "contrast": c.contrast}
                for c in self.inclusions
            ],
        }


@dataclass(frozen=True)
class PhantomSpec:
    """Sampling ranges for :func:`random_phantom` (ranges are inclusive)."""

    count_range: tuple = (1, 3)
    radius_range: tuple = (2.0, 13.0)
    contrast_range: tuple = (2.0, 5.0)
    mu0: float = 0.002
    musp: float = 1.0
    max_attempts: int = 1000


@dataclass(frozen=True)
class DeltaMuVolume:
    grid: VoxelGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.size != self.grid.n_voxels:
            raise InvalidArgument(f"expected {self.grid.n_voxels} values, got {v.size}")
        if np.any(v < 0):
            raise InvalidArgument("absorption perturbation must be non-negative")
        object.__setattr__(self, "values", v)

    def as_array(self):
        return self.values.reshape(self.grid.shape)

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.n_voxels))


def random_phantom(rng_seed, grid, spec=PhantomSpec()):
    """Draw 1-3 non-overlapping spheres fully inside ``grid``.

    The inclusion count is drawn once; the whole configuration is then
    re-drawn until no two spheres overlap, at most ``spec.max_attempts`` times.
    """
    rlo, rhi = spec.radius_range
    clo, chi = spec.contrast_range
    half = 0.5 * grid.extent.min()
    if not 0 < rlo <= rhi < half:
        raise InvalidArgument(f"radius range {spec.radius_range} must lie in (0, {half})")
    if not 1 < clo <= chi:
        raise InvalidArgument(f"contrast range {spec.contrast_range} must lie in (1, inf)")
    nlo, nhi = spec.count_range
    if not 0 <= nlo <= nhi:
        raise InvalidArgument(f"bad count range {spec.count_range}")

    rng = np.random.default_rng(rng_seed)
    count = int(rng.integers(nlo, nhi + 1))
    lo = np.asarray(grid.origin)
    hi = grid.upper
    for _ in range(spec.max_attempts):
        incs = []
        for _ in range(count):
            r = float(rng.uniform(rlo, rhi))
            c = rng.uniform(lo + r, hi - r)
            incs.append(Inclusion(tuple(float(x) for x in c), r, float(rng.uniform(clo, chi))))
        if _disjoint(incs):
            return Phantom(tuple(incs), spec.mu0, spec.musp)
    raise GenerationFailure(
        f"could not place {count} non-overlapping inclusions in {spec.max_attempts} attempts")


def _disjoint(incs):
    for i in range(len(incs)):
        for j in range(i + 1, len(incs)):
            d = np.linalg.norm(np.subtract(incs[i].center, incs[j].center))
            if d <= incs[i].radius + incs[j].radius:
                return False
    return True


def rasterize(phantom, grid):
    """Voxel-center membership rasterization of the inclusions."""
    centers = grid.centers()
    values = np.zeros(grid.n_voxels)
    for inc in phantom.inclusions:
        inside = np.linalg.norm(centers - np.asarray(inc.center), axis=1) <= inc.radius
        values[inside] += phantom.background_mu0 * (inc.contrast - 1.0)
    return DeltaMuVolume(grid, values)
