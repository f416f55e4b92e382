"""Approximate K-nearest-neighbour search over rank descriptors.

A forest of randomized k-d trees (split dimension drawn among the five
highest-variance coordinates, split at the mean) answers best-bin-first
queries under a leaf-visit budget. Matches never pair two descriptors of the
same image. Entries are stored sorted by (image_id, descriptor_index) so that
entry order doubles as the tie-break order for equal distances.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .descriptor import DESCRIPTOR_LEN
from .errors import CorruptSignature, EmptyCollection, EmptyForeignSet, IoFailure, UnresolvableRef

# The work-queue layer is always built; the default search tries TBB first and warns on old versions.
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"

DEFAULT_TREES = 8
DEFAULT_CHECKS = 128
LEAF_SIZE = 192
TOP_VARIANCE_DIMS = 5
VARIANCE_SAMPLE = 100
DEPTH_SLACK = 8
UNBOUNDED = -1

FOREST_MAGIC = b"SGF1"
FOREST_VERSION = 1


@dataclass(frozen=True, order=True)
class DescriptorRef:
    image_id: str
    descriptor_index: int


@dataclass(frozen=True)
class Match:
    query: DescriptorRef
    neighbor: DescriptorRef
    distance: float


@dataclass(frozen=True, eq=False)
class BandwidthTable:
    alpha: np.ndarray  # per forest entry
    epsilon_floor: float


# --------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True)
def _splitmix64(state):
    state = (state + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = state
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    return state, z ^ (z >> np.uint64(31))


@numba.njit(cache=True)
def _required_depth(n, leaf_size):
    d = 0
    cap = leaf_size
    while cap < n:
        cap *= 2
        d += 1
    return d


@numba.njit(cache=True)
def _build_tree(values, leaf_size, max_depth, seed, perm, node_dim, node_thr, node_left, node_right, node_lo, node_hi):
    """Fill one tree's flat node arrays; returns (node count, depth reached)."""
    n, dims = values.shape
    for i in range(n):
        perm[i] = i
    state = np.uint64(seed)
    n_nodes = 1
    node_lo[0] = 0
    node_hi[0] = n
    stack = np.empty((2 * max_depth + 8, 2), dtype=np.int64)  # (node, depth)
    top = 0
    stack[0, 0] = 0
    stack[0, 1] = 0
    top = 1
    deepest = 0
    mean = np.empty(dims)
    var = np.empty(dims)
    keys = np.empty(n)
    while top > 0:
        top -= 1
        node = stack[top, 0]
        depth = stack[top, 1]
        if depth > deepest:
            deepest = depth
        lo = node_lo[node]
        hi = node_hi[node]
        count = hi - lo
        node_left[node] = -1
        node_right[node] = -1
        node_dim[node] = -1
        node_thr[node] = 0.0
        if count <= leaf_size:
            continue
        # variance over the first VARIANCE_SAMPLE points, full node as fallback
        usable = 0
        for attempt in range(2):
            m = count if attempt == 1 else min(count, VARIANCE_SAMPLE)
            for d in range(dims):
                mean[d] = 0.0
                var[d] = 0.0
            for i in range(lo, lo + m):
                row = values[perm[i]]
                for d in range(dims):
                    mean[d] += np.float64(row[d])
            for d in range(dims):
                mean[d] /= m
            for i in range(lo, lo + m):
                row = values[perm[i]]
                for d in range(dims):
                    diff = np.float64(row[d]) - mean[d]
                    var[d] += diff * diff
            usable = 0
            for d in range(dims):
                if var[d] > 0.0:
                    usable += 1
            if usable > 0 or m == count:
                break
        if usable == 0:
            continue  # all points identical: oversized leaf
        # top-k variance dimensions, ties by lower index
        k = min(TOP_VARIANCE_DIMS, usable)
        chosen = np.empty(k, dtype=np.int64)
        taken = np.zeros(dims, dtype=np.bool_)
        for j in range(k):
            best = -1
            for d in range(dims):
                if not taken[d] and (best < 0 or var[d] > var[best]):
                    best = d
            taken[best] = True
            chosen[j] = best
        state, r = _splitmix64(state)
        dim = chosen[r % np.uint64(k)]
        thr = mean[dim]
        # partition perm[lo:hi] on values < thr
        i = lo
        j = hi - 1
        while i <= j:
            if np.float64(values[perm[i], dim]) < thr:
                i += 1
            else:
                tmp = perm[i]
                perm[i] = perm[j]
                perm[j] = tmp
                j -= 1
        cut = i
        larger = max(cut - lo, hi - cut)
        if cut == lo or cut == hi or _required_depth(larger, leaf_size) > max_depth - depth - 1:
            # balanced fallback: order by (value, entry) and halve
            for t in range(lo, hi):
                keys[t] = np.float64(values[perm[t], dim]) * (n + 1.0) + perm[t]
            order = np.argsort(keys[lo:hi])
            seg = perm[lo:hi].copy()
            for t in range(count):
                perm[lo + t] = seg[order[t]]
            cut = lo + count // 2
            a = np.float64(values[perm[cut - 1], dim])
            b = np.float64(values[perm[cut], dim])
            thr = 0.5 * (a + b) if a != b else b
        left = n_nodes
        right = n_nodes + 1
        n_nodes += 2
        node_dim[node] = dim
        node_thr[node] = thr
        node_left[node] = left
        node_right[node] = right
        node_lo[left] = lo
        node_hi[left] = cut
        node_lo[right] = cut
        node_hi[right] = hi
        stack[top, 0] = right
        stack[top, 1] = depth + 1
        top += 1
        stack[top, 0] = left
        stack[top, 1] = depth + 1
        top += 1
    return n_nodes, deepest


@numba.njit(cache=True)
def _heap_push(keys, items, size, key, item):
    i = size
    keys[i] = key
    items[i] = item
    while i > 0:
        p = (i - 1) // 2
        if keys[p] < keys[i] or (keys[p] == keys[i] and items[p] <= items[i]):
            break
        keys[p], keys[i] = keys[i], keys[p]
        items[p], items[i] = items[i], items[p]
        i = p
    return size + 1


@numba.njit(cache=True)
def _heap_pop(keys, items, size):
    key = keys[0]
    item = items[0]
    size -= 1
    keys[0] = keys[size]
    items[0] = items[size]
    i = 0
    while True:
        l = 2 * i + 1
        r = l + 1
        s = i
        if l < size and (keys[l] < keys[s] or (keys[l] == keys[s] and items[l] < items[s])):
            s = l
        if r < size and (keys[r] < keys[s] or (keys[r] == keys[s] and items[r] < items[s])):
            s = r
        if s == i:
            break
        keys[s], keys[i] = keys[i], keys[s]
        items[s], items[i] = items[i], items[s]
        i = s
    return key, item, size


@numba.njit(cache=True)
def _scan_leaf(leaf_values, leaf_image, perm_row, lo, hi, q, qimg, best_d2, best_idx, k):
    dims = leaf_values.shape[1]
    for t in range(lo, hi):
        if leaf_image[t] == qimg:
            continue
        e = perm_row[t]
        d2 = 0
        row = leaf_values[t]
        for d in range(dims):
            diff = np.int64(row[d]) - np.int64(q[d])
            d2 += diff * diff
        worst_d2 = best_d2[k - 1]
        worst_idx = best_idx[k - 1]
        if worst_idx >= 0 and (d2 > worst_d2 or (d2 == worst_d2 and e >= worst_idx)):
            continue
        dup = False
        for s in range(k):
            if best_idx[s] == e:
                dup = True
                break
            if best_idx[s] < 0:
                break
        if dup:
            continue
        # insertion into the sorted top-k
        pos = k - 1
        while pos > 0:
            pi = best_idx[pos - 1]
            if pi >= 0 and (best_d2[pos - 1] < d2 or (best_d2[pos - 1] == d2 and pi < e)):
                break
            best_d2[pos] = best_d2[pos - 1]
            best_idx[pos] = best_idx[pos - 1]
            pos -= 1
        best_d2[pos] = d2
        best_idx[pos] = e


@numba.njit(cache=True)
def _query_one(leaf_values, leaf_image, perm, node_dim, node_thr, node_left, node_right, node_lo, node_hi,
               n_nodes, q, qimg, k, checks, heap_cap, best_d2, best_idx):
    n_trees = perm.shape[0]
    stride = node_dim.shape[1]
    for s in range(k):
        best_d2[s] = 0
        best_idx[s] = -1
    hkeys = np.empty(heap_cap)
    hitems = np.empty(heap_cap, dtype=np.int64)
    size = 0
    visited = 0
    total_leaves = 0
    for t in range(n_trees):
        total_leaves += (n_nodes[t] + 1) // 2
    limit = total_leaves if checks < 0 else min(checks, total_leaves)
    for t in range(n_trees):
        size = _heap_push(hkeys, hitems, size, 0.0, t * stride)
    while size > 0 and visited < limit:
        key, item, size = _heap_pop(hkeys, hitems, size)
        t = item // stride
        node = item % stride
        while node_left[t, node] >= 0:
            dim = node_dim[t, node]
            diff = q[dim] - node_thr[t, node]
            if diff < 0:
                near = node_left[t, node]
                far = node_right[t, node]
            else:
                near = node_right[t, node]
                far = node_left[t, node]
            if size < heap_cap:
                size = _heap_push(hkeys, hitems, size, key + diff * diff, t * stride + far)
            node = near
        _scan_leaf(leaf_values[t], leaf_image[t], perm[t], node_lo[t, node], node_hi[t, node], q, qimg,
                   best_d2, best_idx, k)
        visited += 1
    return visited


@numba.njit(cache=True, parallel=True)
def _query_batch(leaf_values, leaf_image, perm, node_dim, node_thr, node_left, node_right, node_lo, node_hi,
                 n_nodes, queries, query_img, k, checks, heap_cap, out_d2, out_idx, schedule):
    for j in numba.prange(queries.shape[0]):
        i = schedule[j]
        _query_one(leaf_values, leaf_image, perm, node_dim, node_thr, node_left, node_right, node_lo, node_hi,
                   n_nodes, queries[i], query_img[i], k, checks, heap_cap, out_d2[i], out_idx[i])


# --------------------------------------------------------------------------


def _entry_table(signatures):
    sigs = list(signatures)
    ids = [s.image_id for s in sigs]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate image ids in signature collection")
    order = sorted(range(len(sigs)), key=lambda i: ids[i])
    image_ids = [ids[i] for i in order]
    blocks, image_of, desc_index = [], [], []
    for img, i in enumerate(order):
        v = sigs[i].values
        blocks.append(v)
        image_of.append(np.full(len(v), img, dtype=np.int32))
        desc_index.append(np.arange(len(v), dtype=np.int32))
    if not blocks or sum(len(b) for b in blocks) == 0:
        raise EmptyCollection("no descriptors to index")
    return (
        image_ids,
        np.ascontiguousarray(np.concatenate(blocks), dtype=np.uint8),
        np.concatenate(image_of),
        np.concatenate(desc_index),
    )


class KnnForest:
    """Randomized k-d forest over every descriptor of a signature collection."""

    def __init__(self, image_ids, values, image_of, desc_index, seed=0, trees=DEFAULT_TREES, leaf_size=LEAF_SIZE):
        self.image_ids = list(image_ids)
        self.values = np.ascontiguousarray(values, dtype=np.uint8)
        self.image_of = np.ascontiguousarray(image_of, dtype=np.int32)
        self.desc_index = np.ascontiguousarray(desc_index, dtype=np.int32)
        self.seed = int(seed)
        self.n_trees = int(trees)
        self.leaf_size = int(leaf_size)
        self.query_count = 0
        n = len(self.values)
        if n == 0:
            raise EmptyCollection("no descriptors to index")
        self._image_index = {img: i for i, img in enumerate(self.image_ids)}
        self._offsets = np.searchsorted(self.image_of, np.arange(len(self.image_ids) + 1))
        self.max_depth = _required_depth(n, self.leaf_size) + DEPTH_SLACK
        t = self.n_trees
        cap = 2 * n + 1
        built = []
        state = np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF)
        for _ in range(t):
            state, tree_seed = (np.uint64(v) for v in _splitmix64(state))
            perm = np.empty(n, dtype=np.int64)
            arrays = (np.empty(cap, np.int32), np.empty(cap, np.float64), np.empty(cap, np.int32),
                      np.empty(cap, np.int32), np.empty(cap, np.int64), np.empty(cap, np.int64))
            n_nodes, depth = _build_tree(self.values, self.leaf_size, self.max_depth, tree_seed, perm, *arrays)
            built.append((perm, n_nodes, depth, arrays))
        stride = max(b[1] for b in built)
        self.perm = np.stack([b[0] for b in built])
        self.n_nodes = np.array([b[1] for b in built], dtype=np.int64)
        self.depths = np.array([b[2] for b in built], dtype=np.int64)
        # Per-tree copies in leaf order so each leaf scan reads one contiguous block.
        self.leaf_values = np.ascontiguousarray(self.values[self.perm])
        self.leaf_image = np.ascontiguousarray(self.image_of[self.perm])
        (self.node_dim, self.node_thr, self.node_left, self.node_right, self.node_lo, self.node_hi) = (
            np.stack([b[3][j][:stride] for b in built]) for j in range(6)
        )

    def __len__(self):
        return len(self.values)

    def entry_index(self, ref: DescriptorRef) -> int:
        img = self._image_index.get(ref.image_id)
        if img is None:
            raise UnresolvableRef(f"image {ref.image_id!r} is not indexed")
        lo, hi = self._offsets[img], self._offsets[img + 1]
        if not 0 <= ref.descriptor_index < hi - lo:
            raise UnresolvableRef(f"{ref.image_id!r} has no descriptor {ref.descriptor_index}")
        return int(lo + ref.descriptor_index)

    def ref(self, entry: int) -> DescriptorRef:
        return DescriptorRef(self.image_ids[self.image_of[entry]], int(self.desc_index[entry]))

    def image_entries(self, image_id: str) -> range:
        img = self._image_index[image_id]
        return range(int(self._offsets[img]), int(self._offsets[img + 1]))

    def structure(self):
        """Tree arrays trimmed to their used nodes, for structural comparison."""
        out = []
        for t in range(self.n_trees):
            m = self.n_nodes[t]
            out.append((self.perm[t].copy(), self.node_dim[t, :m].copy(), self.node_thr[t, :m].copy(),
                        self.node_left[t, :m].copy(), self.node_right[t, :m].copy()))
        return out

    def query_entries(self, entries, k: int, checks: int = DEFAULT_CHECKS, vectors=None, vector_images=None):
        """Batch K-NN for indexed entries (or for explicit vectors tagged with an image index).

        Returns (squared distances, neighbour entries), both (n, k) int64, ascending by
        (distance, entry); unused slots hold entry -1.
        """
        if k < 1:
            raise ValueError("K must be >= 1")
        vectors_given = vectors is not None
        if not vectors_given:
            entries = np.asarray(entries, dtype=np.int64)
            vectors = self.values[entries]
            vector_images = self.image_of[entries]
        vectors = np.ascontiguousarray(vectors, dtype=np.uint8)
        vector_images = np.ascontiguousarray(vector_images, dtype=np.int32)
        nq = len(vectors)
        out_d2 = np.zeros((nq, k), dtype=np.int64)
        out_idx = np.full((nq, k), -1, dtype=np.int64)
        total_nodes = int(self.n_nodes.sum())
        if checks is None or checks < 0:
            checks = UNBOUNDED
            heap_cap = total_nodes + self.n_trees
        else:
            if checks < 1:
                raise ValueError("checks must be >= 1 or unbounded")
            heap_cap = min(total_nodes + self.n_trees, (checks + self.n_trees) * (self.max_depth + 1))
        if nq:
            # Visiting queries in tree-0 leaf order keeps neighbouring searches cache-warm;
            # results do not depend on the order.
            if vectors_given:
                schedule = np.arange(nq, dtype=np.int64)
            else:
                rank = np.empty(len(self), dtype=np.int64)
                rank[self.perm[0]] = np.arange(len(self))
                schedule = np.argsort(rank[entries], kind="stable")
            _query_batch(self.leaf_values, self.leaf_image, self.perm, self.node_dim, self.node_thr,
                         self.node_left, self.node_right, self.node_lo, self.node_hi, self.n_nodes,
                         vectors, vector_images, k, checks, heap_cap, out_d2, out_idx, schedule)
        self.query_count += nq
        return out_d2, out_idx


def build_forest(signatures, seed: int = 0, trees: int = DEFAULT_TREES, leaf_size: int = LEAF_SIZE) -> KnnForest:
    image_ids, values, image_of, desc_index = _entry_table(signatures)
    return KnnForest(image_ids, values, image_of, desc_index, seed=seed, trees=trees, leaf_size=leaf_size)


def _matches(forest: KnnForest, query: DescriptorRef, d2_row, idx_row) -> list[Match]:
    return [
        Match(query, forest.ref(int(e)), math.sqrt(int(d2)))
        for d2, e in zip(d2_row, idx_row)
        if e >= 0
    ]


def knn_query(forest: KnnForest, query: DescriptorRef, K: int = 30, checks: int | None = DEFAULT_CHECKS) -> list[Match]:
    """Approximate K nearest foreign descriptors; ``checks=None`` searches every leaf."""
    e = forest.entry_index(query)
    d2, idx = forest.query_entries([e], K, UNBOUNDED if checks is None else checks)
    return _matches(forest, query, d2[0], idx[0])


def brute_force_knn(signatures, query: DescriptorRef, K: int = 30) -> list[Match]:
    """Exact K nearest foreign descriptors by exhaustive comparison."""
    if K < 1:
        raise ValueError("K must be >= 1")
    by_id = {s.image_id: s for s in signatures}
    owner = by_id.get(query.image_id)
    if owner is None or not 0 <= query.descriptor_index < len(owner):
        raise UnresolvableRef(f"cannot resolve {query}")
    q = owner.values[query.descriptor_index].astype(np.int64)
    refs, rows = [], []
    for image_id in sorted(by_id):
        if image_id == query.image_id:
            continue
        v = by_id[image_id].values
        refs.extend(DescriptorRef(image_id, i) for i in range(len(v)))
        rows.append(v)
    if not refs:
        return []
    cand = np.concatenate(rows).astype(np.int64)
    d2 = ((cand - q) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(len(d2)), d2))[:K]
    return [Match(query, refs[i], math.sqrt(int(d2[i]))) for i in order]


def compute_bandwidths(forest: KnnForest, checks: int | None = DEFAULT_CHECKS, epsilon_floor: float = 1.0,
                       nearest=None) -> BandwidthTable:
    """alpha_i = max(distance to the nearest foreign descriptor, epsilon_floor).

    ``nearest`` lets a caller that already ran a K-NN pass over every entry pass
    its first-neighbour (squared distances, entries); the same checks budget
    gives the same values. Entries whose bounded search found no foreign
    neighbour are re-queried without a budget.
    """
    if epsilon_floor <= 0:
        raise ValueError("epsilon_floor must be positive")
    if len(forest.image_ids) < 2:
        raise EmptyForeignSet("bandwidths need descriptors from at least two images")
    n = len(forest)
    if nearest is None:
        d2, idx = forest.query_entries(np.arange(n), 1, UNBOUNDED if checks is None else checks)
        nearest = (d2[:, 0], idx[:, 0])
    d2 = np.asarray(nearest[0], dtype=np.float64).copy()
    missing = np.nonzero(np.asarray(nearest[1]) < 0)[0]
    if len(missing):
        d2m, _ = forest.query_entries(missing, 1, UNBOUNDED)
        d2[missing] = d2m[:, 0]
    alpha = np.maximum(np.sqrt(d2), epsilon_floor)
    alpha.flags.writeable = False
    return BandwidthTable(alpha, float(epsilon_floor))


def forest_bytes(forest: KnnForest) -> bytes:
    out = [FOREST_MAGIC, struct.pack("<IQII", FOREST_VERSION, forest.seed & 0xFFFFFFFFFFFFFFFF,
                                     forest.n_trees, forest.leaf_size)]
    out.append(struct.pack("<I", len(forest.image_ids)))
    for img in forest.image_ids:
        b = img.encode("utf-8")
        out.append(struct.pack("<I", len(b)) + b)
    out.append(struct.pack("<I", len(forest)))
    table = np.zeros(len(forest), dtype=[("img", "<u4"), ("desc", "<u4"), ("values", "u1", DESCRIPTOR_LEN)])
    table["img"] = forest.image_of
    table["desc"] = forest.desc_index
    table["values"] = forest.values
    out.append(table.tobytes())
    return b"".join(out)


def save_forest(forest: KnnForest, path) -> None:
    try:
        Path(path).write_bytes(forest_bytes(forest))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_forest(path) -> KnnForest:
    """Read an SGF1 file; tree structure is rebuilt from the stored seed and entries."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if raw[:4] != FOREST_MAGIC:
        raise CorruptSignature(f"bad forest magic {raw[:4]!r}")
    pos = 4
    version, seed, trees, leaf_size = struct.unpack_from("<IQII", raw, pos)
    pos += 20
    if version != FOREST_VERSION:
        raise CorruptSignature(f"unsupported forest version {version}")
    (n_images,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    ids = []
    for _ in range(n_images):
        (m,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        ids.append(raw[pos : pos + m].decode("utf-8"))
        pos += m
    (n,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    dt = np.dtype([("img", "<u4"), ("desc", "<u4"), ("values", "u1", DESCRIPTOR_LEN)])
    if len(raw) - pos != n * dt.itemsize:
        raise CorruptSignature("forest entry table length mismatch")
    table = np.frombuffer(raw, dtype=dt, count=n, offset=pos)
    return KnnForest(ids, table["values"], table["img"].astype(np.int32), table["desc"].astype(np.int32),
                     seed=seed, trees=trees, leaf_size=leaf_size)
