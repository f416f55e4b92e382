"""Orientation assignment, patch sampling, HoG encoding and rank ordering.

Together these turn detected keypoints into 64-element rank descriptors and
bundle them, with the source checksum and parameters, into a :class:`Signature`.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import CorruptSignature, DegenerateGradient, IoFailure
from .scalespace import Keypoint, ScaleSpace, ScaleSpaceParams, detect_keypoints
from .volume import Volume

PATCH_SIZE = 11
PATCH_EXTENT = 8.0  # patch side, in keypoint sigmas
DESCRIPTOR_LEN = 64
RANK_SUM = DESCRIPTOR_LEN * (DESCRIPTOR_LEN - 1) // 2  # 2016

ORIENTATION_RADIUS = 3.0  # gradient sampling radius, in sigmas
ORIENTATION_WINDOW = 1.5  # Gaussian window std, in sigmas
PEAK_RATIO = 0.8
MAX_ORIENTATIONS = 4
GRADIENT_EPS = 1e-12
MODE_CONCENTRATION = 8.0  # von Mises-Fisher kappa for direction peaks
INPLANE_CONCENTRATION = 4.0  # circular kappa for the secondary axis
_INPLANE_SEEDS = 12
_MEAN_SHIFT_ITERS = 50
_MODE_MERGE_COS = math.cos(math.radians(5.0))

SIGNATURE_MAGIC = b"SGS1"
SIGNATURE_VERSION = 1
_KEYPOINT_REC = struct.Struct("<5f2H")
_DESCRIPTOR_REC = struct.Struct("<IB64s9f")


def _icosahedron_faces() -> np.ndarray:
    """Unit normals of the 20 icosahedron faces (the dodecahedron's vertices)."""
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    pts = [(sx, sy, sz) for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
    for a in (-1, 1):
        for b in (-1, 1):
            pts += [(0, a / phi, b * phi), (a / phi, b * phi, 0), (a * phi, 0, b / phi)]
    v = np.asarray(pts, dtype=np.float64)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


ICOSAHEDRON_FACES = _icosahedron_faces()


@dataclass(frozen=True, eq=False)
class Orientation:
    rotation: np.ndarray  # columns: patch x, y, z axes expressed in the volume frame
    peak_weight: float

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or np.linalg.det(r) <= 0:
            raise ValueError("orientation must be a proper rotation")


@dataclass(frozen=True, eq=False)
class Descriptor:
    values: np.ndarray  # uint8 ranks, length 64
    keypoint_index: int
    orientation_index: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3, dtype=np.float32))

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.uint8).reshape(DESCRIPTOR_LEN)
        r = np.asarray(self.rotation, dtype=np.float32).reshape(3, 3)
        v.flags.writeable = False
        r.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "rotation", r)

    def __eq__(self, other):
        if not isinstance(other, Descriptor):
            return NotImplemented
        return (
            self.keypoint_index == other.keypoint_index
            and self.orientation_index == other.orientation_index
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.rotation, other.rotation)
        )

    __hash__ = None


@dataclass(eq=False)
class Signature:
    image_id: str
    keypoints: list[Keypoint]
    descriptors: list[Descriptor]
    extraction_params: dict = field(default_factory=dict)
    source_checksum: int = 0

    def __post_init__(self):
        n = len(self.keypoints)
        for d in self.descriptors:
            if not 0 <= d.keypoint_index < n:
                raise ValueError(f"descriptor references missing keypoint {d.keypoint_index}")

    def __len__(self):
        return len(self.descriptors)

    def __eq__(self, other):
        if not isinstance(other, Signature):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.source_checksum == other.source_checksum
            and self.extraction_params == other.extraction_params
            and self.keypoints == other.keypoints
            and self.descriptors == other.descriptors
        )

    __hash__ = None

    @property
    def values(self) -> np.ndarray:
        """All descriptor ranks as an (n, 64) uint8 matrix."""
        if not self.descriptors:
            return np.zeros((0, DESCRIPTOR_LEN), dtype=np.uint8)
        return np.stack([d.values for d in self.descriptors])

    def renamed(self, image_id: str) -> Signature:
        return Signature(image_id, self.keypoints, self.descriptors, self.extraction_params, self.source_checksum)


def _nearest_level(ss: ScaleSpace, kp: Keypoint) -> int:
    p = ss.params
    sigma_oct = kp.sigma / ss.octaves[kp.octave_index].factor
    k = round(math.log(sigma_oct / p.base_sigma) / math.log(p.kappa))
    return int(min(max(k, 0), p.levels_per_octave - 1))


def _region_gradients(ss: ScaleSpace, kp: Keypoint):
    """Gradient vectors and window weights within ORIENTATION_RADIUS sigma of kp."""
    octave = ss.octaves[kp.octave_index]
    level = _nearest_level(ss, kp)
    grad = ss.gradient(kp.octave_index, level)
    sigma = kp.sigma / octave.factor
    center = np.asarray(kp.location) / octave.factor
    radius = ORIENTATION_RADIUS * sigma
    shape = grad.shape[1:]
    lo = [max(0, int(math.floor(c - radius))) for c in center]
    hi = [min(n - 1, int(math.ceil(c + radius))) for c, n in zip(center, shape)]
    box = tuple(slice(a, b + 1) for a, b in zip(lo, hi))
    idx = np.stack(np.meshgrid(*(np.arange(a, b + 1) for a, b in zip(lo, hi)), indexing="ij"))
    offsets = idx - center[:, None, None, None]
    r2 = np.sum(offsets**2, axis=0)
    inside = r2 <= radius * radius
    g = grad[(slice(None),) + box][:, inside].T
    w = np.exp(-r2[inside] / (2.0 * (ORIENTATION_WINDOW * sigma) ** 2))
    return g, w


def _orthonormal_basis(v: np.ndarray):
    helper = np.array([1.0, 0.0, 0.0]) if abs(v[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(v, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(v, e1)


def _spherical_modes(units: np.ndarray, weights: np.ndarray, seeds: np.ndarray):
    """Mean-shift on the sphere under a von Mises-Fisher kernel.

    Returns distinct (direction, density) modes reached from ``seeds``.
    """
    def density(v):
        return weights * np.exp(MODE_CONCENTRATION * (units @ v - 1.0))

    modes = []
    for v in seeds:
        for _ in range(_MEAN_SHIFT_ITERS):
            m = density(v) @ units
            n = np.linalg.norm(m)
            if n < GRADIENT_EPS:
                break
            nv = m / n
            done = nv @ v > 1.0 - 1e-12
            v = nv
            if done:
                break
        if all(v @ u < _MODE_MERGE_COS for u, _ in modes):
            modes.append((v, float(density(v).sum())))
    return modes


def _secondary_axis(primary: np.ndarray, g: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Densest in-plane gradient direction orthogonal to ``primary``."""
    e1, e2 = _orthonormal_basis(primary)
    a, b = g @ e1, g @ e2
    theta = np.arctan2(b, a)
    wts = weights * np.hypot(a, b)

    def density(x):
        return wts * np.exp(INPLANE_CONCENTRATION * (np.cos(theta - x) - 1.0))

    best_angle, best_density = 0.0, -1.0
    for x in np.arange(_INPLANE_SEEDS) * (2.0 * math.pi / _INPLANE_SEEDS):
        for _ in range(_MEAN_SHIFT_ITERS):
            k = density(x)
            nx = math.atan2(float(k @ np.sin(theta)), float(k @ np.cos(theta)))
            done = abs((nx - x + math.pi) % (2.0 * math.pi) - math.pi) < 1e-10
            x = nx
            if done:
                break
        dens = float(density(x).sum())
        if dens > best_density * (1.0 + 1e-9):
            best_angle, best_density = x, dens
    return math.cos(best_angle) * e1 + math.sin(best_angle) * e2


def assign_orientations(ss: ScaleSpace, kp: Keypoint) -> list[Orientation]:
    """Dominant 3D gradient orientations around ``kp``.

    Gradient directions inside ORIENTATION_RADIUS sigma are weighted by magnitude
    and a Gaussian window and binned on the 20 icosahedron faces. Each face,
    taken in order of decreasing bin mass, seeds a mean-shift ascent of the
    kernel-smoothed direction density, so the peaks found do not depend on where
    the bin boundaries fall. Every distinct peak within PEAK_RATIO of the
    strongest (at most MAX_ORIENTATIONS) becomes a primary axis; the secondary
    axis is the dominant gradient direction in the orthogonal plane.
    """
    g, w = _region_gradients(ss, kp)
    mag = np.linalg.norm(g, axis=1)
    live = mag > GRADIENT_EPS
    if not live.any():
        raise DegenerateGradient("all gradients vanish around keypoint")
    g, w, mag = g[live], w[live], mag[live]
    units = g / mag[:, None]
    weights = w * mag
    faces = np.argmax(units @ ICOSAHEDRON_FACES.T, axis=1)
    hist = np.bincount(faces, weights=weights, minlength=len(ICOSAHEDRON_FACES))
    order = sorted(range(len(hist)), key=lambda i: (-hist[i], i))
    modes = _spherical_modes(units, weights, ICOSAHEDRON_FACES[order])
    top = max(d for _, d in modes)
    if not top > 0:
        raise DegenerateGradient("empty orientation histogram")
    peaks = sorted((m for m in modes if m[1] >= PEAK_RATIO * top), key=lambda m: -m[1])
    out = []
    for primary, dens in peaks[:MAX_ORIENTATIONS]:
        secondary = _secondary_axis(primary, g, w)
        secondary -= (secondary @ primary) * primary
        secondary /= np.linalg.norm(secondary)
        third = np.cross(primary, secondary)
        out.append(Orientation(np.column_stack([primary, secondary, third]), dens / top))
    return out


def patch_offsets(sigma: float) -> np.ndarray:
    """Sample offsets along one patch axis: PATCH_SIZE points spanning PATCH_EXTENT sigma."""
    half = PATCH_EXTENT * sigma / 2.0
    return np.linspace(-half, half, PATCH_SIZE)


def extract_patch(ss: ScaleSpace, kp: Keypoint, o: Orientation) -> np.ndarray:
    """11^3 trilinear resampling of the keypoint's region in its orientation frame."""
    octave = ss.octaves[kp.octave_index]
    level = octave.levels[_nearest_level(ss, kp)]
    sigma = kp.sigma / octave.factor
    center = np.asarray(kp.location) / octave.factor
    u = patch_offsets(sigma)
    grid = np.stack(np.meshgrid(u, u, u, indexing="ij")).reshape(3, -1)
    coords = center[:, None] + np.asarray(o.rotation) @ grid
    values = ndimage.map_coordinates(level, coords, order=1, mode="nearest")
    upper = np.asarray(level.shape, dtype=np.float64)[:, None] - 1.0
    outside = np.any((coords < 0.0) | (coords > upper), axis=0)
    values[outside] = 0.0
    return values.reshape(PATCH_SIZE, PATCH_SIZE, PATCH_SIZE)


def encode_hog(patch: np.ndarray) -> np.ndarray:
    """64-bin gradient histogram: 8 spatial octants x 8 gradient sign octants.

    Central differences on the interior 9^3 voxels. Bin index is
    ``8 * spatial + orientation`` with spatial = 4[z>=c] + 2[y>=c] + [x>=c]
    relative to the patch center c, and orientation = 4[gz>=0] + 2[gy>=0] + [gx>=0].
    """
    p = np.asarray(patch, dtype=np.float64)
    n = p.shape[0]
    c = n // 2
    inner = slice(1, n - 1)
    gx = 0.5 * (p[2:, inner, inner] - p[:-2, inner, inner])
    gy = 0.5 * (p[inner, 2:, inner] - p[inner, :-2, inner])
    gz = 0.5 * (p[inner, inner, 2:] - p[inner, inner, :-2])
    mag = np.sqrt(gx * gx + gy * gy + gz * gz)
    pos = np.arange(1, n - 1) >= c
    sx, sy, sz = np.meshgrid(pos, pos, pos, indexing="ij")
    spatial = 4 * sz + 2 * sy + sx
    orient = 4 * (gz >= 0) + 2 * (gy >= 0) + (gx >= 0)
    bins = 8 * spatial + orient
    return np.bincount(bins.ravel(), weights=mag.ravel(), minlength=DESCRIPTOR_LEN)


def rank_order(raw) -> np.ndarray:
    """Rank of each bin among all 64, ties broken by bin index."""
    raw = np.asarray(raw)
    ranks = np.empty(raw.shape[0], dtype=np.int64)
    ranks[np.argsort(raw, kind="stable")] = np.arange(raw.shape[0])
    return ranks


def extraction_params(params: ScaleSpaceParams) -> dict:
    return {
        "scale_space": params.to_dict(),
        "patch_size": PATCH_SIZE,
        "patch_extent_sigma": PATCH_EXTENT,
        "orientation_radius_sigma": ORIENTATION_RADIUS,
        "orientation_window_sigma": ORIENTATION_WINDOW,
        "orientation_peak_ratio": PEAK_RATIO,
        "orientation_concentration": MODE_CONCENTRATION,
        "inplane_concentration": INPLANE_CONCENTRATION,
        "max_orientations": MAX_ORIENTATIONS,
    }


def extract_signature(volume: Volume, params: ScaleSpaceParams = ScaleSpaceParams(), image_id: str = "") -> Signature:
    ss, _, candidates = detect_keypoints(volume, params)
    keypoints, descriptors = [], []
    for kp in candidates:
        try:
            orientations = assign_orientations(ss, kp)
        except DegenerateGradient:
            continue
        if not orientations:
            continue
        k = len(keypoints)
        keypoints.append(kp)
        for j, o in enumerate(orientations):
            values = rank_order(encode_hog(extract_patch(ss, kp, o)))
            descriptors.append(Descriptor(values, k, j, o.rotation))
    return Signature(image_id, keypoints, descriptors, extraction_params(params), volume.checksum())


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def signature_bytes(sig: Signature) -> bytes:
    buf = io.BytesIO()
    buf.write(SIGNATURE_MAGIC)
    buf.write(struct.pack("<I", SIGNATURE_VERSION))
    buf.write(_pack_str(sig.image_id))
    buf.write(struct.pack("<Q", sig.source_checksum))
    buf.write(_pack_str(json.dumps(sig.extraction_params, sort_keys=True)))
    buf.write(struct.pack("<I", len(sig.keypoints)))
    for kp in sig.keypoints:
        buf.write(_KEYPOINT_REC.pack(*kp.location, kp.sigma, kp.dog_value, kp.octave_index, kp.level_index))
    buf.write(struct.pack("<I", len(sig.descriptors)))
    for d in sig.descriptors:
        buf.write(
            _DESCRIPTOR_REC.pack(
                d.keypoint_index, d.orientation_index, d.values.tobytes(), *d.rotation.ravel().tolist()
            )
        )
    return buf.getvalue()


def save_signature(sig: Signature, path) -> None:
    try:
        Path(path).write_bytes(signature_bytes(sig))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, fmt):
        s = struct.Struct(fmt) if isinstance(fmt, str) else fmt
        if self.pos + s.size > len(self.raw):
            raise CorruptSignature("truncated signature file")
        out = s.unpack_from(self.raw, self.pos)
        self.pos += s.size
        return out

    def string(self) -> str:
        (n,) = self.take("<I")
        if self.pos + n > len(self.raw):
            raise CorruptSignature("truncated string field")
        b = self.raw[self.pos : self.pos + n]
        self.pos += n
        return b.decode("utf-8")


def signature_from_bytes(raw: bytes) -> Signature:
    if raw[:4] != SIGNATURE_MAGIC:
        raise CorruptSignature(f"bad signature magic {raw[:4]!r}")
    r = _Reader(raw)
    r.pos = 4
    (version,) = r.take("<I")
    if version != SIGNATURE_VERSION:
        raise CorruptSignature(f"unsupported signature version {version}")
    image_id = r.string()
    (checksum,) = r.take("<Q")
    params = json.loads(r.string())
    (n_kp,) = r.take("<I")
    keypoints = []
    for _ in range(n_kp):
        x, y, z, sigma, dog_value, octave, level = r.take(_KEYPOINT_REC)
        keypoints.append(Keypoint((x, y, z), sigma, dog_value, octave, level))
    (n_desc,) = r.take("<I")
    descriptors = []
    for _ in range(n_desc):
        rec = r.take(_DESCRIPTOR_REC)
        values = np.frombuffer(rec[2], dtype=np.uint8)
        descriptors.append(Descriptor(values, rec[0], rec[1], np.array(rec[3:], dtype=np.float32)))
    if r.pos != len(raw):
        raise CorruptSignature("trailing bytes after descriptor table")
    try:
        return Signature(image_id, keypoints, descriptors, params, checksum)
    except ValueError as exc:
        raise CorruptSignature(str(exc)) from exc


def load_signature(path) -> Signature:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return signature_from_bytes(raw)
