"""Soft set intersection, Jaccard overlap and the all-pairs similarity matrix.

The intersection of descriptor sets A and B sums, over each descriptor of A,
the best Gaussian-weighted match among its K nearest neighbours that belong
to B. Each descriptor's kernel width is its own nearest-foreign-neighbour
distance (see :func:`sigprint.index.compute_bandwidths`). In hard mode every
descriptor with at least one neighbour in B counts 1.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numba
import numpy as np

from .errors import EmptyCollection, EmptySignature, IoFailure, NotIndexed
from .index import DEFAULT_CHECKS, UNBOUNDED, BandwidthTable, KnnForest, build_forest, compute_bandwidths

CSV_HEADER = ["image_a", "image_b", "jaccard", "distance"]


@dataclass(frozen=True)
class SoftJaccardParams:
    K: int = 30
    mode: str = "soft"  # soft | hard
    symmetrize: str = "mean"  # none | mean
    checks: int | None = DEFAULT_CHECKS  # None searches every leaf
    epsilon_floor: float = 1.0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.mode not in ("soft", "hard"):
            raise ValueError(f"mode must be 'soft' or 'hard', got {self.mode!r}")
        if self.symmetrize not in ("none", "mean"):
            raise ValueError(f"symmetrize must be 'none' or 'mean', got {self.symmetrize!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PairScore:
    image_a: str
    image_b: str
    intersection: float
    jaccard: float
    distance: float


def jaccard_from_counts(intersection: float, size_a: int, size_b: int) -> float:
    union = size_a + size_b - intersection
    if union <= 0:
        return 1.0
    return min(1.0, max(0.0, intersection / union))


def jaccard_distance(j: float) -> float:
    """-log J, with J = 0 mapped to +inf."""
    return math.inf if j <= 0.0 else -math.log(j) + 0.0


@numba.njit(cache=True)
def _aggregate(owner, neighbor_image, d2, alpha, hard, n_images):
    """Directed intersections out[a, b] summed in entry order over the rows."""
    out = np.zeros((n_images, n_images))
    seen = np.full(n_images, -1, dtype=np.int64)
    for i in range(d2.shape[0]):
        a = owner[i]
        inv = 1.0 / (2.0 * alpha[i] * alpha[i])
        for s in range(d2.shape[1]):
            b = neighbor_image[i, s]
            if b < 0 or seen[b] == i:
                continue
            seen[b] = i  # first hit is the closest, hence the max weight
            if hard:
                out[a, b] += 1.0
            else:
                out[a, b] += math.exp(-d2[i, s] * inv)
    return out


def _checks(p: SoftJaccardParams) -> int:
    return UNBOUNDED if p.checks is None else p.checks


def _directed(forest: KnnForest, entries: np.ndarray, bw: BandwidthTable, p: SoftJaccardParams) -> np.ndarray:
    d2, idx = forest.query_entries(entries, p.K, _checks(p))
    nb_img = np.where(idx >= 0, forest.image_of[np.maximum(idx, 0)], -1).astype(np.int64)
    owner = forest.image_of[entries].astype(np.int64)
    return _aggregate(owner, nb_img, d2, bw.alpha[entries], p.mode == "hard", len(forest.image_ids))


def _check_indexed(sig, forest: KnnForest) -> range:
    if sig.image_id not in forest.image_ids:
        raise NotIndexed(f"image {sig.image_id!r} is not in the forest")
    entries = forest.image_entries(sig.image_id)
    if len(entries) != len(sig) or not np.array_equal(forest.values[entries.start : entries.stop], sig.values):
        raise NotIndexed(f"signature {sig.image_id!r} differs from its indexed copy")
    return entries


def soft_intersection(a, b, forest: KnnForest, bw: BandwidthTable, p: SoftJaccardParams = SoftJaccardParams()) -> float:
    """Directed |A n B|: sum over A's descriptors of the best kernel weight into B."""
    ea = _check_indexed(a, forest)
    _check_indexed(b, forest)
    if len(ea) == 0:
        return 0.0
    out = _directed(forest, np.arange(ea.start, ea.stop), bw, p)
    return float(out[forest.image_ids.index(a.image_id), forest.image_ids.index(b.image_id)])


def _score(a_id, b_id, i_ab, i_ba, n_a, n_b, p: SoftJaccardParams) -> PairScore:
    inter = 0.5 * (i_ab + i_ba) if p.symmetrize == "mean" else i_ab
    j = jaccard_from_counts(inter, n_a, n_b)
    return PairScore(a_id, b_id, inter, j, jaccard_distance(j))


def jaccard_score(a, b, forest: KnnForest, bw: BandwidthTable, p: SoftJaccardParams = SoftJaccardParams()) -> PairScore:
    if len(a) == 0 or len(b) == 0:
        raise EmptySignature("Jaccard overlap needs non-empty descriptor sets")
    if a.image_id == b.image_id:
        _check_indexed(a, forest)
        return PairScore(a.image_id, b.image_id, float(len(a)), 1.0, 0.0)
    i_ab = soft_intersection(a, b, forest, bw, p)
    i_ba = soft_intersection(b, a, forest, bw, p) if p.symmetrize == "mean" else 0.0
    return _score(a.image_id, b.image_id, i_ab, i_ba, len(a), len(b), p)


class SimilarityMatrix:
    """Pair scores over an ordered image list, stored condensed (i < j, row-major).

    With ``symmetrize="none"`` the stored score for (i, j) is the i -> j direction.
    """

    def __init__(self, image_ids, jaccard, distance, intersection=None, sizes=None, params=None, seed=None,
                 query_count=None, directed=None):
        self.image_ids = list(image_ids)
        n = len(self.image_ids)
        m = n * (n - 1) // 2
        self.jaccard = np.asarray(jaccard, dtype=np.float64).reshape(m)
        self.distance = np.asarray(distance, dtype=np.float64).reshape(m)
        self.intersection = None if intersection is None else np.asarray(intersection, dtype=np.float64).reshape(m)
        self.sizes = None if sizes is None else [int(s) for s in sizes]
        self.params = dict(params or {})
        self.seed = seed
        self.query_count = query_count
        self.directed = directed
        self._pos = {img: i for i, img in enumerate(self.image_ids)}

    def __len__(self):
        return len(self.image_ids)

    def _index(self, i: int, j: int) -> int:
        n = len(self.image_ids)
        return i * n - i * (i + 1) // 2 + (j - i - 1)

    def score(self, a: str, b: str) -> PairScore:
        i, j = self._pos[a], self._pos[b]
        if i == j:
            size = float(self.sizes[i]) if self.sizes else math.nan
            return PairScore(a, b, size, 1.0, 0.0)
        lo, hi = min(i, j), max(i, j)
        k = self._index(lo, hi)
        inter = math.nan if self.intersection is None else float(self.intersection[k])
        return PairScore(a, b, inter, float(self.jaccard[k]), float(self.distance[k]))

    def pairs(self):
        """(image_a, image_b, jaccard, distance) for every stored pair, in storage order."""
        n = len(self.image_ids)
        k = 0
        for i in range(n):
            for j in range(i + 1, n):
                yield self.image_ids[i], self.image_ids[j], float(self.jaccard[k]), float(self.distance[k])
                k += 1

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for a, b, j, d in self.pairs():
            w.writerow([a, b, repr(j), "inf" if math.isinf(d) else repr(d)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        try:
            Path(path).write_text(self.to_csv(), encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_matrix_csv(path) -> SimilarityMatrix:
    """Load a matrix CSV; every unordered pair over the listed ids must be present."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != CSV_HEADER:
        raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
    ids, values = [], {}
    for a, b, j, d in rows[1:]:
        for img in (a, b):
            if img not in ids:
                ids.append(img)
        values[frozenset((a, b))] = (float(j), float(d))
    ids.sort()
    n = len(ids)
    jac, dist = [], []
    for i in range(n):
        for k in range(i + 1, n):
            key = frozenset((ids[i], ids[k]))
            if key not in values:
                raise ValueError(f"{path}: missing pair {ids[i]},{ids[k]}")
            jac.append(values[key][0])
            dist.append(values[key][1])
    return SimilarityMatrix(ids, jac, dist)


def pairwise_matrix(signatures, p: SoftJaccardParams = SoftJaccardParams(), seed: int = 0,
                    forest: KnnForest | None = None) -> SimilarityMatrix:
    """All-pairs Jaccard through one global forest.

    Every indexed descriptor is queried once; its K-NN list feeds both its
    bandwidth (first neighbour) and its contribution to every directed
    intersection it touches. Only a descriptor whose bounded search found no
    foreign neighbour at all is queried again, unbounded, for its bandwidth.
    """
    sigs = list(signatures)
    if len(sigs) < 2:
        raise EmptyCollection("pairwise matrix needs at least two signatures")
    for s in sigs:
        if len(s) == 0:
            raise EmptySignature(f"signature {s.image_id!r} has no descriptors")
    if forest is None:
        forest = build_forest(sigs, seed=seed)
    before = forest.query_count
    entries = np.arange(len(forest))
    d2, idx = forest.query_entries(entries, p.K, _checks(p))
    bw = compute_bandwidths(forest, epsilon_floor=p.epsilon_floor, nearest=(d2[:, 0], idx[:, 0]))
    nb_img = np.where(idx >= 0, forest.image_of[np.maximum(idx, 0)], -1).astype(np.int64)
    directed = _aggregate(forest.image_of.astype(np.int64), nb_img, d2, bw.alpha, p.mode == "hard",
                          len(forest.image_ids))

    ids = forest.image_ids
    sizes = [len(forest.image_entries(img)) for img in ids]
    n = len(ids)
    inter, jac, dist = [], [], []
    for i in range(n):
        for j in range(i + 1, n):
            s = _score(ids[i], ids[j], directed[i, j], directed[j, i], sizes[i], sizes[j], p)
            inter.append(s.intersection)
            jac.append(s.jaccard)
            dist.append(s.distance)
    return SimilarityMatrix(ids, jac, dist, inter, sizes, p.to_dict(), seed,
                            forest.query_count - before, directed)
