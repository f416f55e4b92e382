"""Quick in-package property checks behind ``sigprint selftest``."""
from __future__ import annotations

import numpy as np

from .curation import ks_two_sample
from .descriptor import RANK_SUM, rank_order
from .index import DescriptorRef, KnnForest, brute_force_knn, knn_query
from .jaccard import SoftJaccardParams, pairwise_matrix
from .volume import PhantomSpec, make_phantom


class _Sig:
    """Minimal signature stand-in: an id plus a (n, 64) uint8 value array."""

    def __init__(self, image_id, values):
        self.image_id = image_id
        self.values = values

    def __len__(self):
        return len(self.values)


def _check_rank_invariance(rng) -> bool:
    for _ in range(50):
        raw = rng.integers(0, 20, 64).astype(np.float64)
        base = rank_order(raw)
        if int(base.sum()) != RANK_SUM:
            return False
        if not np.array_equal(rank_order(np.exp(raw / 7.0) + 3.0), base):
            return False
    return True


def _check_forest_oracle(rng) -> bool:
    sigs = [_Sig(f"s{i}", rng.integers(0, 64, (25, 64)).astype(np.uint8)) for i in range(8)]
    forest = KnnForest([s.image_id for s in sigs], np.concatenate([s.values for s in sigs]),
                       np.repeat(np.arange(8, dtype=np.int32), 25), np.tile(np.arange(25), 8), seed=3)
    for e in range(0, 200, 7):
        ref = DescriptorRef(f"s{e // 25}", e % 25)
        if knn_query(forest, ref, K=10, checks=None) != brute_force_knn(sigs, ref, K=10):
            return False
    return True


def _check_jaccard(rng) -> bool:
    vals = rng.integers(0, 64, (30, 64)).astype(np.uint8)
    sigs = [_Sig("a", vals), _Sig("b", vals.copy()), _Sig("c", rng.integers(0, 64, (30, 64)).astype(np.uint8))]
    m = pairwise_matrix(sigs, SoftJaccardParams(), seed=0)
    if m.score("a", "b").jaccard != 1.0 or not 0.0 <= m.score("a", "c").jaccard < 1.0:
        return False
    return m.score("a", "c").jaccard == m.score("c", "a").jaccard


def _check_ks(rng) -> bool:
    x = rng.normal(size=40)
    if ks_two_sample(x, x) != (0.0, 1.0):
        return False
    return ks_two_sample([0.0], [1.0])[0] == 1.0


def _check_phantom_determinism(rng) -> bool:
    spec = PhantomSpec(seed=int(rng.integers(1 << 31)), num_blobs=5, dims=(16, 16, 16))
    return make_phantom(spec) == make_phantom(spec)


CHECKS = [
    ("rank order invariance", _check_rank_invariance),
    ("forest equals brute force (unbounded)", _check_forest_oracle),
    ("jaccard identity and symmetry", _check_jaccard),
    ("ks identities", _check_ks),
    ("phantom determinism", _check_phantom_determinism),
]


def run_selftest(verbose: bool = True) -> bool:
    ok = True
    for name, fn in CHECKS:
        passed = bool(fn(np.random.default_rng(12345)))
        ok &= passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'}  {name}")
    return ok
