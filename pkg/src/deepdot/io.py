"""Persistence: dataset containers, network checkpoints, volume files, VTK
export and plain-text ``key = value`` configuration files."""

from __future__ import annotations

import configparser
import json
import os
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetError, InvalidArgument
from .geometry import DeltaMuVolume, VoxelGrid
from .network import ConvLayer, NetworkParams, NetworkSpec

DATASET_VERSION = "deepdot-dataset/1"
CHECKPOINT_VERSION = "deepdot-checkpoint/1"
VOLUME_MAGIC = "DOTVOL 1"
F32 = np.dtype("<f4")
F64 = np.dtype("<f8")


# -- configuration -----------------------------------------------------------------

def _coerce(text):
    text = text.strip()
    if "," in text:
        return tuple(_coerce(t) for t in text.split(",") if t.strip())
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_config(text):
    """``key = value`` lines (``#`` comments); comma lists become tuples."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    cp.optionxform = str
    cp.read_string("[config]\n" + text)
    return {k: _coerce(v) for k, v in cp["config"].items()}


def read_config(path):
    return parse_config(Path(path).read_text())


def format_config(values):
    out = []
    for k, v in values.items():
        if isinstance(v, (tuple, list)):
            v = ", ".join(str(x) for x in v)
        out.append(f"{k} = {v}")
    return "\n".join(out) + "\n"


# -- datasets ------------------------------------------------------------------------

@dataclass
class Dataset:
    """Preprocessed samples plus the manifest describing how they were made.

    ``inputs`` are normalized network inputs, ``labels`` physical absorption
    perturbations on the reconstruction grid and ``raw`` the complex scattered
    data on the filtered pairs.
    """

    manifest: dict
    inputs: np.ndarray
    labels: np.ndarray
    raw: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def grid(self):
        return VoxelGrid.from_dict(self.manifest["grid"])

    @property
    def pairs(self):
        return np.asarray(self.manifest["pairs"], dtype=int).reshape(-1, 2)

    @property
    def train_idx(self):
        return np.arange(self.manifest["split"]["train"])

    @property
    def val_idx(self):
        t = self.manifest["split"]["train"]
        return np.arange(t, t + self.manifest["split"]["val"])


def _record(inp, label, raw):
    raw = np.asarray(raw, dtype=complex)
    return b"".join(np.asarray(a, dtype=F32).tobytes()
                    for a in (inp, label, raw.real, raw.imag))


def write_dataset(dataset, path):
    """Write ``manifest.json`` and ``data.bin`` into the directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = dict(dataset.manifest)
    S, M = dataset.inputs.shape
    N = dataset.labels.reshape(S, -1).shape[1]
    split = manifest.get("split", {"train": S, "val": 0})
    if min(split["train"], split["val"]) < 0 or split["train"] + split["val"] != S:
        raise InvalidArgument(f"split {split} does not sum to {S} samples")
    records, offset = [], 0
    blobs = []
    for i in range(S):
        blob = _record(dataset.inputs[i], dataset.labels[i].ravel(), dataset.raw[i])
        records.append({"offset": offset, "crc32": zlib.crc32(blob)})
        offset += len(blob)
        blobs.append(blob)
    manifest.update(version=DATASET_VERSION, count=S, n_meas=M, n_voxels=N, split=split,
                    samples=records)
    (path / "data.bin").write_bytes(b"".join(blobs))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_dataset(path):
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        payload = (path / "data.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read dataset at {path}: {exc}") from exc
    if manifest.get("version") != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {manifest.get('version')!r}")
    S, M, N = manifest["count"], manifest["n_meas"], manifest["n_voxels"]
    rec = 4 * (3 * M + N)
    inputs = np.empty((S, M), dtype=np.float32)
    labels = np.empty((S, N), dtype=np.float32)
    raw = np.empty((S, M), dtype=np.complex64)
    prev = -1
    for i, meta in enumerate(manifest["samples"]):
        off = meta["offset"]
        if off <= prev:
            raise DatasetError("sample offsets are not increasing", i)
        prev = off
        blob = payload[off:off + rec]
        if len(blob) != rec:
            raise DatasetError("truncated payload", i)
        if zlib.crc32(blob) != meta["crc32"]:
            raise DatasetError("checksum mismatch", i)
        a = np.frombuffer(blob, dtype=F32)
        inputs[i] = a[:M]
        labels[i] = a[M:M + N]
        raw[i].real = a[M + N:2 * M + N]
        raw[i].imag = a[2 * M + N:]
    return Dataset(manifest, inputs, labels, raw)


# -- checkpoints ---------------------------------------------------------------------

def _spec_to_kv(spec):
    return {
        "input_length": spec.input_length,
        "fc_shape": ",".join(map(str, spec.fc_shape)),
        "conv_layers": ";".join(f"{l.in_channels}:{l.out_channels}:{l.activation}"
                                for l in spec.conv_layers),
        "dropout_p": repr(spec.dropout_p),
        "input_noise_sigma": repr(spec.input_noise_sigma),
    }


def _spec_from_kv(kv):
    layers = tuple(ConvLayer(int(a), int(b), c) for a, b, c in
                   (item.split(":") for item in kv["conv_layers"].split(";")))
    return NetworkSpec(int(kv["input_length"]), tuple(int(x) for x in kv["fc_shape"].split(",")),
                       layers, float(kv["dropout_p"]), float(kv["input_noise_sigma"]))


def save_checkpoint(path, spec, params, **meta):
    """Directory with ``manifest.txt`` (key=value) and ``params.bin`` (float64 LE)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    kv = {"version": CHECKPOINT_VERSION, **_spec_to_kv(spec)}
    for k, v in meta.items():
        kv[k] = repr(v) if isinstance(v, float) else v
    blob = params.flat().astype(F64).tobytes()
    kv["n_values"] = len(blob) // 8
    kv["crc32"] = zlib.crc32(blob)
    (path / "params.bin").write_bytes(blob)
    (path / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in kv.items()))


def load_checkpoint(path):
    """Returns ``(spec, params, meta)``; Adam moments are reset to zero."""
    path = Path(path)
    kv = {}
    for line in (path / "manifest.txt").read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
    if kv.get("version") != CHECKPOINT_VERSION:
        raise DatasetError(f"unsupported checkpoint version {kv.get('version')!r}")
    spec = _spec_from_kv(kv)
    blob = (path / "params.bin").read_bytes()
    if len(blob) != 8 * int(kv["n_values"]) or zlib.crc32(blob) != int(kv["crc32"]):
        raise DatasetError("checkpoint payload is corrupt")
    flat = np.frombuffer(blob, dtype=F64).astype(np.float64)
    shapes = [(spec.input_length, spec.fc_outputs), (spec.fc_outputs,)]
    shapes += [(3, 3, 3, l.in_channels, l.out_channels) for l in spec.conv_layers]
    tensors, pos = [], 0
    for s in shapes:
        n = int(np.prod(s))
        tensors.append(flat[pos:pos + n].reshape(s).copy())
        pos += n
    if pos != flat.size:
        raise DatasetError("checkpoint size does not match its spec")
    params = NetworkParams(tensors[0], tensors[1], tensors[2:])
    known = {"version", "n_values", "crc32", *_spec_to_kv(spec)}
    meta = {k: _coerce(v) for k, v in kv.items() if k not in known}
    return spec, params, meta


# -- volumes -------------------------------------------------------------------------

def write_volume(volume, path, scale=1.0):
    """Text header terminated by ``END`` followed by float32 LE values in grid order."""
    g = volume.grid
    header = (f"{VOLUME_MAGIC}\n"
              f"dims {g.nx} {g.ny} {g.nz}\n"
              f"resolution {g.resolution!r}\n"
              f"origin {' '.join(repr(o) for o in g.origin)}\n"
              f"scale {scale!r}\n"
              "END\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.asarray(volume.values, dtype=F32).tobytes())


def read_volume(path):
    """Returns ``(DeltaMuVolume, scale)``."""
    data = Path(path).read_bytes()
    end = data.find(b"END\n")
    if not data.startswith(VOLUME_MAGIC.encode()) or end < 0:
        raise DatasetError(f"{path} is not a volume file")
    fields = {}
    for line in data[:end].decode("ascii").splitlines()[1:]:
        key, *vals = line.split()
        fields[key] = vals
    nx, ny, nz = (int(v) for v in fields["dims"])
    grid = VoxelGrid(nx, ny, nz, float(fields["resolution"][0]),
                     tuple(float(v) for v in fields["origin"]))
    payload = data[end + 4:]
    if len(payload) != 4 * grid.n_voxels:
        raise DatasetError(f"volume payload has {len(payload)} bytes, expected {4 * grid.n_voxels}")
    values = np.frombuffer(payload, dtype=F32).astype(np.float64)
    return DeltaMuVolume(grid, values), float(fields["scale"][0])


def export_vtk(volume, path, name="delta_mu"):
    """Legacy ASCII structured-points file, point data in x-fastest order."""
    g = volume.grid
    origin = np.asarray(g.origin) + 0.5 * g.resolution
    values = volume.as_array().ravel(order="F")
    lines = [
        "# vtk DataFile Version 3.0",
        "absorption perturbation",
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {g.nx} {g.ny} {g.nz}",
        "ORIGIN " + " ".join(f"{o:g}" for o in origin),
        "SPACING " + " ".join([f"{g.resolution:g}"] * 3),
        f"POINT_DATA {g.n_voxels}",
        f"SCALARS {name} float 1",
        "LOOKUP_TABLE default",
    ]
    body = "\n".join(" ".join(f"{v:.9g}" for v in values[i:i + 9])
                     for i in range(0, values.size, 9))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n" + body + "\n")


def parse_vtk(path):
    """Strict reader for the subset written by :func:`export_vtk`.

    Returns a dict with ``dimensions``, ``origin``, ``spacing``, ``name`` and
    ``values`` reshaped to ``(nx, ny, nz)``.
    """
    lines = Path(path).read_text().splitlines()

    def expect(i, prefix):
        if i >= len(lines) or not lines[i].startswith(prefix):
            raise DatasetError(f"line {i + 1}: expected {prefix!r}")
        return lines[i][len(prefix):].split()

    if not lines or not lines[0].startswith("# vtk DataFile Version"):
        raise DatasetError("missing VTK signature")
    if lines[2].strip() != "ASCII":
        raise DatasetError("only ASCII files are supported")
    expect(3, "DATASET STRUCTURED_POINTS")
    dims = tuple(int(v) for v in expect(4, "DIMENSIONS "))
    origin = tuple(float(v) for v in expect(5, "ORIGIN "))
    spacing = tuple(float(v) for v in expect(6, "SPACING "))
    npts = int(expect(7, "POINT_DATA ")[0])
    name, dtype, ncomp = expect(8, "SCALARS ")
    expect(9, "LOOKUP_TABLE ")
    if len(dims) != 3 or len(origin) != 3 or len(spacing) != 3:
        raise DatasetError("DIMENSIONS/ORIGIN/SPACING need three entries")
    if npts != int(np.prod(dims)) or int(ncomp) != 1:
        raise DatasetError("POINT_DATA does not match DIMENSIONS")
    values = np.array(" ".join(lines[10:]).split(), dtype=float)
    if values.size != npts:
        raise DatasetError(f"expected {npts} values, found {values.size}")
    return {"dimensions": dims, "origin": origin, "spacing": spacing, "name": name,
            "values": values.reshape(dims, order="F")}


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
