"""Versioned little-endian file formats and the JSON run manifest.

Every binary file starts with a 4-byte magic and a ``u32`` version.  All
payload arrays are little-endian float32.  Byte layouts are documented in
``docs/formats.md``.
"""
from __future__ import annotations

import json
import struct
from importlib import resources
from pathlib import Path
from typing import Any, Union

import jsonschema
import numpy as np

from .field import FieldConfig, FieldParams
from .geometry import ScanGeometry
from .phantom import VolumeGrid
from .projector import PSEUDO, REAL, ProjectionImage, ProjectionSet
from .refiner import DenoiserConfig, DenoiserParams

PathLike = Union[str, Path]

VERSION = 1
MAGIC_VOLUME = b"CTVL"
MAGIC_PROJECTIONS = b"CTPS"
MAGIC_FIELD = b"CTNF"
MAGIC_DENOISER = b"CTDN"
_PROVENANCE = {REAL: 0, PSEUDO: 1}
_PROVENANCE_INV = {v: k for k, v in _PROVENANCE.items()}


class FormatError(ValueError):
    """Base class for malformed-file errors."""


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncationError(FormatError):
    def __init__(self, expected: int, actual: int, what: str = "file"):
        super().__init__(f"truncated {what}: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class NaNPayloadError(FormatError):
    """Refused to write non-finite values."""


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def need(self, total: int) -> None:
        if len(self.data) < total:
            raise TruncationError(total, len(self.data), self.what)

    def take(self, n: int) -> bytes:
        self.need(self.pos + n)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)

    def json(self) -> Any:
        (n,) = self.unpack("<I")
        try:
            return json.loads(self.take(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"bad JSON header in {self.what}: {exc}") from exc

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes in {self.what}")


def _header(magic: bytes) -> bytes:
    return magic + struct.pack("<I", VERSION)


def _check_header(r: _Reader, magic: bytes) -> None:
    got = r.take(4)
    if got != magic:
        raise MagicError(f"bad magic {got!r} in {r.what}, expected {magic!r}")
    (ver,) = r.unpack("<I")
    if ver != VERSION:
        raise VersionError(f"{r.what} version {ver} unsupported (expected {VERSION})")


def _f32(a: np.ndarray, what: str) -> bytes:
    a = np.asarray(a)
    if not np.all(np.isfinite(a)):
        raise NaNPayloadError(f"non-finite values in {what}")
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _json_block(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _read(path: PathLike) -> bytes:
    return Path(path).read_bytes()


# -- volume ------------------------------------------------------------------

def volume_to_bytes(vol: VolumeGrid) -> bytes:
    nx, ny, nz = vol.dims
    return (_header(MAGIC_VOLUME) + struct.pack("<3I4d", nx, ny, nz, float(vol.voxel_mm), *map(float, vol.origin_mm))
            + _f32(vol.values, "volume"))


def volume_from_bytes(data: bytes) -> VolumeGrid:
    r = _Reader(data, "volume")
    _check_header(r, MAGIC_VOLUME)
    nx, ny, nz, voxel, ox, oy, oz = r.unpack("<3I4d")
    r.need(r.pos + 4 * nx * ny * nz)
    vals = r.floats(nx * ny * nz).reshape(nz, ny, nx)
    r.done()
    return VolumeGrid(vals, voxel, (ox, oy, oz))


def write_volume(path: PathLike, vol: VolumeGrid) -> None:
    Path(path).write_bytes(volume_to_bytes(vol))


def read_volume(path: PathLike) -> VolumeGrid:
    return volume_from_bytes(_read(path))


# -- projection set ----------------------------------------------------------

def projections_to_bytes(ps: ProjectionSet) -> bytes:
    g = ps.geometry
    out = [_header(MAGIC_PROJECTIONS), _json_block(g.to_dict()),
           struct.pack("<3I", len(ps.images), g.det_rows, g.det_cols)]
    for im in ps.images:
        out.append(struct.pack("<dBf", float(im.angle_deg), _PROVENANCE[im.provenance], float(im.weight)))
    for im in ps.images:
        out.append(_f32(im.pixels, f"projection at {im.angle_deg} deg"))
    return b"".join(out)


def projections_from_bytes(data: bytes) -> ProjectionSet:
    r = _Reader(data, "projection set")
    _check_header(r, MAGIC_PROJECTIONS)
    try:
        geom = ScanGeometry.from_dict(r.json())
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"bad geometry header: {exc}") from exc
    n, rows, cols = r.unpack("<3I")
    rec = struct.calcsize("<dBf")
    r.need(r.pos + n * rec + 4 * n * rows * cols)
    meta = [r.unpack("<dBf") for _ in range(n)]
    images = []
    for angle, prov, weight in meta:
        if prov not in _PROVENANCE_INV:
            raise FormatError(f"unknown provenance code {prov}")
        pix = r.floats(rows * cols).reshape(rows, cols)
        try:
            images.append(ProjectionImage(angle, pix, _PROVENANCE_INV[prov], weight))
        except ValueError as exc:
            raise FormatError(str(exc)) from exc
    r.done()
    try:
        return ProjectionSet(geom, images)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def write_projection_set(path: PathLike, ps: ProjectionSet) -> None:
    Path(path).write_bytes(projections_to_bytes(ps))


def read_projection_set(path: PathLike) -> ProjectionSet:
    return projections_from_bytes(_read(path))


# -- checkpoints -------------------------------------------------------------

def _arrays_block(arrays: list[np.ndarray], what: str) -> bytes:
    return b"".join(_f32(a, what) for a in arrays)


def _read_arrays(r: _Reader, shapes: list) -> list[np.ndarray]:
    sizes = [int(np.prod(s)) for s in shapes]
    r.need(r.pos + 4 * sum(sizes))
    return [r.floats(n).reshape(s) for n, s in zip(sizes, shapes)]


def field_checkpoint_to_bytes(params: FieldParams, config: FieldConfig) -> bytes:
    arrays = params.arrays()
    header = {"config": config.to_dict(), "shapes": [list(a.shape) for a in arrays]}
    return _header(MAGIC_FIELD) + _json_block(header) + _arrays_block(arrays, "field checkpoint")


def field_checkpoint_from_bytes(data: bytes) -> tuple[FieldParams, FieldConfig]:
    r = _Reader(data, "field checkpoint")
    _check_header(r, MAGIC_FIELD)
    h = r.json()
    try:
        config = FieldConfig.from_dict(h["config"])
        shapes = [tuple(int(x) for x in s) for s in h["shapes"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad field checkpoint header: {exc}") from exc
    arrays = _read_arrays(r, shapes)
    r.done()
    return FieldParams.from_arrays(arrays), config


def write_checkpoint(path: PathLike, params: FieldParams, config: FieldConfig) -> None:
    Path(path).write_bytes(field_checkpoint_to_bytes(params, config))


def read_checkpoint(path: PathLike) -> tuple[FieldParams, FieldConfig]:
    return field_checkpoint_from_bytes(_read(path))


def denoiser_to_bytes(params: DenoiserParams) -> bytes:
    names = list(params.tensors)
    header = {"config": params.config.to_dict(),
              "tensors": [[k, list(params.tensors[k].shape)] for k in names]}
    return (_header(MAGIC_DENOISER) + _json_block(header)
            + _arrays_block([params.tensors[k] for k in names], "denoiser checkpoint"))


def denoiser_from_bytes(data: bytes) -> DenoiserParams:
    r = _Reader(data, "denoiser checkpoint")
    _check_header(r, MAGIC_DENOISER)
    h = r.json()
    try:
        config = DenoiserConfig.from_dict(h["config"])
        names = [str(k) for k, _ in h["tensors"]]
        shapes = [tuple(int(x) for x in s) for _, s in h["tensors"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad denoiser checkpoint header: {exc}") from exc
    arrays = _read_arrays(r, shapes)
    r.done()
    return DenoiserParams(config, dict(zip(names, arrays)))


def write_denoiser(path: PathLike, params: DenoiserParams) -> None:
    Path(path).write_bytes(denoiser_to_bytes(params))


def read_denoiser(path: PathLike) -> DenoiserParams:
    return denoiser_from_bytes(_read(path))


# -- manifest ----------------------------------------------------------------

def manifest_schema() -> dict:
    text = resources.files("ctfield").joinpath("schemas/manifest.schema.json").read_text()
    return json.loads(text)


def validate_manifest(manifest: dict) -> None:
    try:
        jsonschema.validate(manifest, manifest_schema())
    except jsonschema.ValidationError as exc:
        raise FormatError(f"manifest invalid: {exc.message}") from exc


def write_manifest(path: PathLike, manifest: dict) -> None:
    validate_manifest(manifest)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, allow_nan=False) + "\n")


def read_manifest(path: PathLike) -> dict:
    try:
        manifest = json.loads(Path(path).read_text())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not JSON: {exc}") from exc
    validate_manifest(manifest)
    return manifest
