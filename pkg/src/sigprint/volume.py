"""Volumes, file I/O, synthetic phantoms and similarity-transform resampling.

Volume data is held as a read-only float32 array indexed ``[x, y, z]``. On disk
the x index varies fastest, which is Fortran order for that array.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .errors import CorruptHeader, IoFailure, NonFinite, UnknownFormat

SGV_MAGIC = b"SGV1"
_SGV_HEADER = struct.Struct("<4s3I3d3d")
SGV_HEADER_SIZE = _SGV_HEADER.size  # 64 bytes

NIFTI_HEADER_SIZE = 348
_NIFTI_DTYPES = {
    2: "u1",  # uint8
    4: "i2",  # int16
    8: "i4",  # int32
    16: "f4",  # float32
    64: "f8",  # float64
}


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, order="C")
        if data.ndim != 3 or min(data.shape) <= 0:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NonFinite("volume contains NaN or Inf values")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {spacing}")
        if len(origin) != 3:
            raise ValueError("origin must have three components")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.origin == other.origin
            and self.dims == other.dims
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None

    def checksum(self) -> int:
        """64-bit content hash over geometry and voxel bytes."""
        h = hashlib.sha256()
        h.update(struct.pack("<3I3d3d", *self.dims, *self.spacing, *self.origin))
        h.update(self.data.astype("<f4").tobytes(order="F"))
        return int.from_bytes(h.digest()[:8], "little")


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """Maps a physical point ``p`` (mm) to ``scale * rotation @ p + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    scale: float = 1.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or np.linalg.det(r) <= 0:
            raise ValueError("rotation must be orthonormal with det +1")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def about(cls, center, rotation=None, scale=1.0, translation=(0.0, 0.0, 0.0)):
        """Rotate and scale about ``center``, then translate."""
        r = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
        c = np.asarray(center, dtype=np.float64)
        t = c + np.asarray(translation, dtype=np.float64) - scale * r @ c
        return cls(r, scale, t)

    @classmethod
    def random(cls, rng, center, scale_range=(0.9, 1.1), max_translation=5.0):
        """Arbitrary rotation about ``center``, isotropic scale and a bounded shift."""
        r = Rotation.random(random_state=rng).as_matrix()
        s = rng.uniform(*scale_range)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        t = direction * rng.uniform(0.0, max_translation)
        return cls.about(center, r, s, t)

    def inverse(self) -> SimilarityTransform:
        rt = self.rotation.T
        return SimilarityTransform(rt, 1.0 / self.scale, -(rt @ self.translation) / self.scale)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * p @ self.rotation.T + self.translation


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    num_blobs: int = 50
    blob_scale_range: tuple[float, float] = (1.5, 4.0)
    intensity_range: tuple[float, float] = (0.5, 1.5)
    noise_sigma: float = 0.0
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    # Blob centers are drawn inside a ball of this fraction of min(dims) about the
    # volume center, so arbitrary rotations about the center keep content in view.
    support_fraction: float = 0.3

    def __post_init__(self):
        lo, hi = self.blob_scale_range
        if self.num_blobs < 0:
            raise ValueError("num_blobs must be non-negative")
        if lo < 1.0 or hi < lo:
            raise ValueError("blob_scale_range must satisfy 1 <= min <= max (voxels)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass(frozen=True)
class Blob:
    center: tuple[float, float, float]
    sigma: float
    amplitude: float


def _volume_center(dims) -> np.ndarray:
    return (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0


def _draw_blobs(spec: PhantomSpec, rng: np.random.Generator) -> list[Blob]:
    center = _volume_center(spec.dims)
    radius = spec.support_fraction * min(spec.dims)
    blobs = []
    for _ in range(spec.num_blobs):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        r = radius * rng.uniform() ** (1.0 / 3.0)
        c = center + r * direction
        sigma = rng.uniform(*spec.blob_scale_range)
        amp = rng.uniform(*spec.intensity_range)
        blobs.append(Blob(tuple(float(v) for v in c), float(sigma), float(amp)))
    return blobs


def phantom_blobs(spec: PhantomSpec) -> list[Blob]:
    """The blob parameters make_phantom draws for ``spec`` (voxel coordinates)."""
    return _draw_blobs(spec, np.random.default_rng(spec.seed))


def make_phantom(spec: PhantomSpec) -> Volume:
    rng = np.random.default_rng(spec.seed)
    blobs = _draw_blobs(spec, rng)
    axes = [np.arange(n, dtype=np.float64) for n in spec.dims]
    data = np.zeros(spec.dims, dtype=np.float64)
    for b in blobs:
        gx, gy, gz = (np.exp(-((a - c) ** 2) / (2.0 * b.sigma**2)) for a, c in zip(axes, b.center))
        data += b.amplitude * gx[:, None, None] * gy[None, :, None] * gz[None, None, :]
    if spec.noise_sigma > 0:
        data += rng.normal(0.0, spec.noise_sigma, size=spec.dims)
    return Volume(data, spec.spacing)


def add_noise(volume: Volume, sigma: float, rng: np.random.Generator) -> Volume:
    data = volume.data + rng.normal(0.0, sigma, size=volume.dims)
    return Volume(data, volume.spacing, volume.origin)


def apply_transform(volume: Volume, t: SimilarityTransform, shape=None) -> Volume:
    """Resample ``volume`` after mapping its content through ``t``.

    Each output voxel is pulled back through the inverse transform and sampled
    trilinearly; points outside the input grid read 0. The output shares the
    input's spacing and origin; ``shape`` overrides the output dims.
    """
    out_dims = volume.dims if shape is None else tuple(int(n) for n in shape)
    spacing = np.asarray(volume.spacing)
    origin = np.asarray(volume.origin)
    idx = np.indices(out_dims, dtype=np.float64).reshape(3, -1).T
    phys = origin + idx * spacing
    src = t.inverse().apply(phys)
    src_idx = (src - origin) / spacing
    # Snap lattice hits so integer shifts reproduce values exactly.
    rounded = np.rint(src_idx)
    src_idx = np.where(np.abs(src_idx - rounded) < 1e-9, rounded, src_idx)
    values = ndimage.map_coordinates(
        volume.data.astype(np.float64), src_idx.T, order=1, mode="constant", cval=0.0
    )
    return Volume(values.reshape(out_dims), volume.spacing, volume.origin)


def save_volume(volume: Volume, path) -> None:
    header = _SGV_HEADER.pack(SGV_MAGIC, *volume.dims, *volume.spacing, *volume.origin)
    payload = volume.data.astype("<f4").tobytes(order="F")
    try:
        Path(path).write_bytes(header + payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def _finalize(data: np.ndarray, spacing, origin, nonfinite: str) -> Volume:
    bad = ~np.isfinite(data)
    if bad.any():
        if nonfinite == "reject":
            raise NonFinite(f"{int(bad.sum())} non-finite voxel values")
        data = np.where(bad, 0.0, data)
    return Volume(data, spacing, origin)


def _load_sgv(raw: bytes, nonfinite: str) -> Volume:
    if len(raw) < SGV_HEADER_SIZE:
        raise CorruptHeader("truncated SGV header")
    _, nx, ny, nz, sx, sy, sz, ox, oy, oz = _SGV_HEADER.unpack_from(raw)
    for name, n in (("nx", nx), ("ny", ny), ("nz", nz)):
        if n <= 0:
            raise CorruptHeader(f"header field {name} = {n} must be positive")
    for name, s in (("sx", sx), ("sy", sy), ("sz", sz)):
        if not s > 0:
            raise CorruptHeader(f"header field {name} = {s} must be positive")
    n = nx * ny * nz
    if len(raw) != SGV_HEADER_SIZE + 4 * n:
        raise CorruptHeader(
            f"payload length {len(raw) - SGV_HEADER_SIZE} does not match nx*ny*nz = {n} float32 values"
        )
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=SGV_HEADER_SIZE)
    data = data.reshape((nx, ny, nz), order="F")
    return _finalize(data, (sx, sy, sz), (ox, oy, oz), nonfinite)


def _load_nifti(raw: bytes, nonfinite: str) -> Volume:
    if len(raw) < NIFTI_HEADER_SIZE:
        raise CorruptHeader("truncated NIfTI-1 header")
    endian = "<" if struct.unpack_from("<i", raw, 0)[0] == NIFTI_HEADER_SIZE else ">"
    if struct.unpack_from(endian + "i", raw, 0)[0] != NIFTI_HEADER_SIZE:
        raise CorruptHeader("header field sizeof_hdr must be 348")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    datatype, _bitpix = struct.unpack_from(endian + "2h", raw, 70)
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(endian + "3f", raw, 108)

    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise CorruptHeader(f"header field dim[0] = {ndim} out of range")
    shape = [dim[i] if i <= ndim else 1 for i in (1, 2, 3)]
    for name, n in zip(("nx", "ny", "nz"), shape):
        if n <= 0:
            raise CorruptHeader(f"header field {name} = {n} must be positive")
    if any(dim[i] > 1 for i in range(4, ndim + 1)):
        raise CorruptHeader("only single-volume (3D) NIfTI files are supported")
    if datatype not in _NIFTI_DTYPES:
        raise UnknownFormat(f"unsupported NIfTI datatype code {datatype}")

    dtype = np.dtype(endian + _NIFTI_DTYPES[datatype])
    offset = int(vox_offset) if vox_offset >= NIFTI_HEADER_SIZE else NIFTI_HEADER_SIZE + 4
    n = shape[0] * shape[1] * shape[2]
    if len(raw) < offset + n * dtype.itemsize:
        raise CorruptHeader(f"payload shorter than nx*ny*nz = {n} voxels of {dtype}")
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=offset).astype(np.float64)
    if scl_slope != 0.0 and np.isfinite(scl_slope):
        data = data * float(scl_slope) + float(scl_inter)
    data = data.reshape(shape, order="F")

    spacing = [abs(float(s)) or 1.0 for s in pixdim[1:4]]
    return _finalize(data, tuple(spacing), (0.0, 0.0, 0.0), nonfinite)


def load_volume(path, nonfinite: str = "reject") -> Volume:
    """Read an SGV file or an uncompressed single-file NIfTI-1 volume.

    ``nonfinite`` is ``"reject"`` (raise NonFinite) or ``"zero"`` (replace with 0).
    """
    if nonfinite not in ("reject", "zero"):
        raise ValueError("nonfinite policy must be 'reject' or 'zero'")
    raw = _read_bytes(path)
    if raw[:4] == SGV_MAGIC:
        return _load_sgv(raw, nonfinite)
    if len(raw) >= NIFTI_HEADER_SIZE and raw[344:348] == b"n+1\x00":
        return _load_nifti(raw, nonfinite)
    raise UnknownFormat(f"{path}: unrecognized magic bytes {raw[:4]!r}")


def observe(volume: Volume, rng: np.random.Generator, noise_fraction: float = 0.02,
            scale_range=(0.9, 1.1), max_translation: float = 5.0):
    """Re-observe ``volume`` under a random similarity transform plus Gaussian noise.

    The noise std is ``noise_fraction`` of the volume's intensity range. Returns
    (volume, transform).
    """
    t = SimilarityTransform.random(rng, _volume_center(volume.dims), scale_range, max_translation)
    moved = apply_transform(volume, t)
    span = float(volume.data.max() - volume.data.min())
    if noise_fraction > 0 and span > 0:
        moved = add_noise(moved, noise_fraction * span, rng)
    return moved, t
