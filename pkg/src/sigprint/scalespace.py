"""Gaussian scale space, difference-of-Gaussian stack and keypoint detection."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import VolumeTooSmall
from .volume import Volume

MIN_OCTAVE_DIM = 8


@dataclass(frozen=True)
class ScaleSpaceParams:
    base_sigma: float = 1.6
    scales_per_octave: int = 3
    num_octaves: int | None = None
    # Fraction of the input's 1st-99th percentile intensity range.
    contrast_threshold: float = 0.02
    edge_ratio_threshold: float = 10.0
    max_refine_offset: float = 0.6

    def __post_init__(self):
        if self.scales_per_octave < 1:
            raise ValueError("scales_per_octave must be >= 1")
        if self.base_sigma <= 0:
            raise ValueError("base_sigma must be positive")
        if self.contrast_threshold < 0 or self.edge_ratio_threshold < 0:
            raise ValueError("thresholds must be non-negative")
        if self.num_octaves is not None and self.num_octaves < 1:
            raise ValueError("num_octaves must be >= 1 when given")

    @property
    def kappa(self) -> float:
        return 2.0 ** (1.0 / self.scales_per_octave)

    @property
    def levels_per_octave(self) -> int:
        return self.scales_per_octave + 3

    def level_sigma(self, k: float) -> float:
        """Octave-local blur of (possibly fractional) level ``k``."""
        return self.base_sigma * self.kappa**k

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Octave:
    factor: int  # base-grid voxels per octave voxel
    levels: np.ndarray  # (scales_per_octave + 3, nx, ny, nz), float64
    sigmas: tuple[float, ...]  # octave-local blur per level


@dataclass
class ScaleSpace:
    octaves: list[Octave]
    params: ScaleSpaceParams
    contrast: float  # absolute DoG threshold for this volume
    dims: tuple[int, int, int]
    _gradients: dict = field(default_factory=dict, repr=False)

    def gradient(self, octave: int, level: int) -> np.ndarray:
        """Central-difference gradient of a level, shape (3, nx, ny, nz); memoized."""
        key = (octave, level)
        if key not in self._gradients:
            self._gradients[key] = np.stack(np.gradient(self.octaves[octave].levels[level]))
        return self._gradients[key]


@dataclass
class DoGStack:
    octaves: list[np.ndarray]  # per octave (scales_per_octave + 2, nx, ny, nz)
    factors: list[int]
    sigmas: list[tuple[float, ...]]  # octave-local sigma of the lower Gaussian level
    contrast: float
    dims: tuple[int, int, int]


@dataclass(frozen=True)
class Keypoint:
    location: tuple[float, float, float]  # base-grid voxel coordinates
    sigma: float  # base-grid voxels
    dog_value: float
    octave_index: int
    level_index: int

    def __post_init__(self):
        # Stored at float32 precision so signature files round-trip exactly.
        loc = tuple(float(np.float32(v)) for v in self.location)
        object.__setattr__(self, "location", loc)
        object.__setattr__(self, "sigma", float(np.float32(self.sigma)))
        object.__setattr__(self, "dog_value", float(np.float32(self.dog_value)))
        if not self.sigma > 0:
            raise ValueError("keypoint sigma must be positive")


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled, unit-sum 1D Gaussian truncated at 4 sigma."""
    radius = max(1, int(math.ceil(4.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(data: np.ndarray, sigma: float) -> np.ndarray:
    """Separable isotropic blur with edge-replication padding."""
    if sigma <= 0:
        return np.array(data, dtype=np.float64)
    k = gaussian_kernel(sigma)
    out = np.asarray(data, dtype=np.float64)
    for axis in range(out.ndim):
        out = ndimage.correlate1d(out, k, axis=axis, mode="nearest")
    return out


def robust_range(data: np.ndarray) -> float:
    lo, hi = np.percentile(data, [1.0, 99.0])
    return float(hi - lo)


def auto_num_octaves(dims) -> int:
    n, size = 1, min(dims)
    while (size + 1) // 2 >= MIN_OCTAVE_DIM:
        size = (size + 1) // 2
        n += 1
    return n


def build_scale_space(volume: Volume, params: ScaleSpaceParams = ScaleSpaceParams()) -> ScaleSpace:
    """Blur pyramid with ``scales_per_octave + 3`` levels per octave.

    Octave 0 filters the input directly at each level's sigma. Each later octave
    starts from the previous octave's level at twice the base sigma, decimated by
    taking every other voxel, and blurs incrementally from there.
    """
    dims = volume.dims
    if min(dims) < MIN_OCTAVE_DIM:
        raise VolumeTooSmall(f"volume dims {dims} below the {MIN_OCTAVE_DIM}-voxel minimum")
    n_oct = params.num_octaves or auto_num_octaves(dims)
    n_levels = params.levels_per_octave
    sigmas = tuple(params.level_sigma(k) for k in range(n_levels))
    data = volume.data.astype(np.float64)

    octaves = []
    levels = np.stack([gaussian_blur(data, s) for s in sigmas])
    octaves.append(Octave(1, levels, sigmas))
    for o in range(1, n_oct):
        seed = octaves[-1].levels[params.scales_per_octave][::2, ::2, ::2]
        if min(seed.shape) < 1:
            break
        levels = np.empty((n_levels,) + seed.shape)
        levels[0] = seed
        for k in range(1, n_levels):
            levels[k] = gaussian_blur(seed, math.sqrt(sigmas[k] ** 2 - sigmas[0] ** 2))
        octaves.append(Octave(2**o, levels, sigmas))

    contrast = params.contrast_threshold * robust_range(data)
    return ScaleSpace(octaves, params, contrast, dims)


def compute_dog(ss: ScaleSpace) -> DoGStack:
    return DoGStack(
        octaves=[np.diff(o.levels, axis=0) for o in ss.octaves],
        factors=[o.factor for o in ss.octaves],
        sigmas=[o.sigmas[:-1] for o in ss.octaves],
        contrast=ss.contrast,
        dims=ss.dims,
    )


_NEIGHBORS = np.ones((3, 3, 3, 3), dtype=bool)
_NEIGHBORS[1, 1, 1, 1] = False


def _derivatives(d: np.ndarray, k: int, x: int, y: int, z: int):
    """Gradient and Hessian over (x, y, z, scale) by central differences."""
    c = d[k, x, y, z]

    def at(dx, dy, dz, ds):
        return d[k + ds, x + dx, y + dy, z + dz]

    steps = ((1, 0, 0, 0), (0, 1, 0, 0), (0, 0, 1, 0), (0, 0, 0, 1))
    g = np.empty(4)
    h = np.empty((4, 4))
    for i, si in enumerate(steps):
        plus, minus = at(*si), at(*(-v for v in si))
        g[i] = 0.5 * (plus - minus)
        h[i, i] = plus + minus - 2.0 * c
        for j in range(i + 1, 4):
            sj = steps[j]
            pp = at(*(a + b for a, b in zip(si, sj)))
            mm = at(*(-a - b for a, b in zip(si, sj)))
            pm = at(*(a - b for a, b in zip(si, sj)))
            mp = at(*(-a + b for a, b in zip(si, sj)))
            h[i, j] = h[j, i] = 0.25 * (pp + mm - pm - mp)
    return g, h


def detect_extrema(dog: DoGStack, params: ScaleSpaceParams = ScaleSpaceParams()) -> list[Keypoint]:
    """Strict 80-neighbour scale-space extrema, refined by one quadratic step.

    Candidates whose refined offset exceeds ``max_refine_offset`` on any axis, whose
    refined |DoG| falls below the contrast threshold, or which lie within
    ceil(sigma) octave voxels of a boundary are dropped. Output is sorted by
    (octave, level, z, y, x).
    """
    keypoints = []
    threshold = dog.contrast
    for o, d in enumerate(dog.octaves):
        n_scales = d.shape[0]
        if n_scales < 3:
            continue
        nbr_max = ndimage.maximum_filter(d, footprint=_NEIGHBORS, mode="nearest")
        nbr_min = ndimage.minimum_filter(d, footprint=_NEIGHBORS, mode="nearest")
        strict = ((d > nbr_max) | (d < nbr_min)) & (np.abs(d) >= 0.5 * threshold)
        strict &= np.abs(d) > 0
        strict[0] = strict[-1] = False
        cand = []
        for k in range(1, n_scales - 1):
            b = int(math.ceil(dog.sigmas[o][k]))
            mask = np.zeros(d.shape[1:], dtype=bool)
            sl = tuple(slice(b, n - b) for n in d.shape[1:])
            mask[sl] = True
            xs, ys, zs = np.nonzero(strict[k] & mask)
            cand.extend((k, z, y, x) for x, y, z in zip(xs, ys, zs))
        cand.sort()
        factor = dog.factors[o]
        for k, z, y, x in cand:
            g, h = _derivatives(d, k, x, y, z)
            try:
                offset = -np.linalg.solve(h, g)
            except np.linalg.LinAlgError:
                continue
            if not np.all(np.isfinite(offset)) or np.any(np.abs(offset) > params.max_refine_offset):
                continue
            value = d[k, x, y, z] + 0.5 * float(g @ offset)
            if abs(value) < threshold or value == 0:
                continue
            loc = (np.array([x, y, z], dtype=np.float64) + offset[:3]) * factor
            sigma = params.level_sigma(k + offset[3]) * factor
            keypoints.append(Keypoint(tuple(loc), sigma, value, o, k))
    return keypoints


def _spatial_hessian(d: np.ndarray, k: int, x: int, y: int, z: int) -> np.ndarray:
    _, h = _derivatives(d, k, x, y, z)
    return h[:3, :3]


def reject_unstable(candidates, dog: DoGStack, params: ScaleSpaceParams = ScaleSpaceParams()) -> list[Keypoint]:
    """Drop candidates whose spatial DoG Hessian looks like a ridge or a plane.

    A keypoint survives only when all three Hessian eigenvalues share a sign and
    max|lambda| / min|lambda| <= edge_ratio_threshold.
    """
    kept = []
    for kp in candidates:
        d = dog.octaves[kp.octave_index]
        factor = dog.factors[kp.octave_index]
        _, nx, ny, nz = d.shape
        x, y, z = (int(round(v / factor)) for v in kp.location)
        if not (1 <= x < nx - 1 and 1 <= y < ny - 1 and 1 <= z < nz - 1):
            continue
        eig = np.linalg.eigvalsh(_spatial_hessian(d, kp.level_index, x, y, z))
        if not (np.all(eig > 0) or np.all(eig < 0)):
            continue
        a = np.abs(eig)
        if a.max() > params.edge_ratio_threshold * a.min():
            continue
        kept.append(kp)
    return kept


def detect_keypoints(volume: Volume, params: ScaleSpaceParams = ScaleSpaceParams()):
    """Scale space plus stable keypoints for ``volume``; returns (ss, dog, keypoints)."""
    ss = build_scale_space(volume, params)
    dog = compute_dog(ss)
    return ss, dog, reject_unstable(detect_extrema(dog, params), dog, params)
