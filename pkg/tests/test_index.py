import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import make_sig, random_sigs
from sigprint.errors import CorruptSignature, EmptyCollection, EmptyForeignSet, UnresolvableRef
from sigprint.index import (
    DescriptorRef,
    brute_force_knn,
    build_forest,
    compute_bandwidths,
    forest_bytes,
    knn_query,
    load_forest,
    save_forest,
)


def all_refs(sigs):
    return [DescriptorRef(s.image_id, i) for s in sigs for i in range(len(s))]


def as_tuples(matches):
    return [(m.neighbor.image_id, m.neighbor.descriptor_index, m.distance) for m in matches]


def test_single_descriptor_forest():
    sigs = [make_sig("only", np.arange(64))]
    f = build_forest(sigs)
    assert len(f) == 1
    assert np.all(f.n_nodes == 1)
    assert knn_query(f, DescriptorRef("only", 0), K=5) == []
    with pytest.raises(EmptyForeignSet):
        compute_bandwidths(f)


def test_empty_collection():
    with pytest.raises(EmptyCollection):
        build_forest([])
    with pytest.raises(EmptyCollection):
        build_forest([make_sig("a", np.zeros((0, 64)))])


def test_structure_deterministic_and_seed_dependent():
    sigs = random_sigs(np.random.default_rng(0), 10, 100)
    a, b = build_forest(sigs, seed=7), build_forest(sigs, seed=7)
    for ta, tb in zip(a.structure(), b.structure()):
        for x, y in zip(ta, tb):
            assert np.array_equal(x, y)
    c = build_forest(sigs, seed=8)
    assert any(not np.array_equal(x[0], y[0]) for x, y in zip(a.structure(), c.structure()))


def test_every_entry_once_per_tree_and_depth_bound():
    sigs = random_sigs(np.random.default_rng(1), 40, 250, permutations=True)
    f = build_forest(sigs, seed=3)
    n = len(f)
    for perm in f.perm:
        assert np.array_equal(np.sort(perm), np.arange(n))
    assert f.depths.max() <= math.ceil(math.log2(n / 16)) + 8
    assert f.depths.max() <= math.ceil(math.log2(n / f.leaf_size)) + 8


def test_input_order_irrelevant():
    sigs = random_sigs(np.random.default_rng(2), 6, 30)
    a = build_forest(sigs, seed=1)
    b = build_forest(sigs[::-1], seed=1)
    assert a.image_ids == b.image_ids
    for ta, tb in zip(a.structure(), b.structure()):
        assert np.array_equal(ta[0], tb[0])


def test_brute_force_examples():
    q = np.full(64, 10)
    near, far = q.copy(), q.copy()
    near[0] += 3
    far[0] += 5
    sigs = [make_sig("q", q), make_sig("b", np.stack([far, near]))]
    m = brute_force_knn(sigs, DescriptorRef("q", 0), K=1)
    assert as_tuples(m) == [("b", 1, 3.0)]
    sigs = [make_sig("q", q), make_sig("b", np.stack([far, q]))]
    assert brute_force_knn(sigs, DescriptorRef("q", 0), K=2)[0].distance == 0.0


def test_unbounded_equals_brute_force_500():
    rng = np.random.default_rng(3)
    sigs = random_sigs(rng, 25, 20)
    f = build_forest(sigs, seed=11)
    for ref in all_refs(sigs):
        assert as_tuples(knn_query(f, ref, K=30, checks=None)) == as_tuples(brute_force_knn(sigs, ref, K=30))


def test_ties_break_by_image_then_index():
    v = np.arange(64)
    sigs = [make_sig("c", np.stack([v, v])), make_sig("a", v), make_sig("b", np.stack([v, v])), make_sig("q", v)]
    f = build_forest(sigs, seed=0)
    got = as_tuples(knn_query(f, DescriptorRef("q", 0), K=4, checks=None))
    assert got == [("a", 0, 0.0), ("b", 0, 0.0), ("b", 1, 0.0), ("c", 0, 0.0)]
    assert got == as_tuples(brute_force_knn(sigs, DescriptorRef("q", 0), K=4))


def test_k_truncation_returns_all_foreign():
    rng = np.random.default_rng(4)
    sigs = random_sigs(rng, 3, 4)
    f = build_forest(sigs)
    m = knn_query(f, DescriptorRef(sigs[0].image_id, 0), K=100)
    assert len(m) == 8
    assert all(x.neighbor.image_id != sigs[0].image_id for x in m)


def test_duplicate_images_zero_distance():
    vals = np.random.default_rng(5).integers(0, 64, (30, 64))
    sigs = [make_sig("x", vals), make_sig("y", vals)]
    f = build_forest(sigs, seed=2)
    for ref in all_refs(sigs):
        m = knn_query(f, ref, K=1)
        other = "y" if ref.image_id == "x" else "x"
        assert m[0].distance == 0.0
        assert m[0].neighbor.image_id == other


def test_recall_at_128_on_200_random():
    rng = np.random.default_rng(6)
    sigs = random_sigs(rng, 10, 20, permutations=True)
    f = build_forest(sigs, seed=6)
    hit = total = 0
    for ref in all_refs(sigs):
        approx = {(m.neighbor.image_id, m.neighbor.descriptor_index) for m in knn_query(f, ref, K=30, checks=128)}
        exact = {(m.neighbor.image_id, m.neighbor.descriptor_index) for m in brute_force_knn(sigs, ref, K=30)}
        hit += len(approx & exact)
        total += len(exact)
    # 200 entries fit in two leaves, so 128 checks cover every tree: recall is exact.
    assert hit / total == 1.0


def test_distances_match_stored_values():
    rng = np.random.default_rng(7)
    sigs = random_sigs(rng, 8, 40)
    by_id = {s.image_id: s for s in sigs}
    f = build_forest(sigs)
    for ref in all_refs(sigs)[::7]:
        q = by_id[ref.image_id].values[ref.descriptor_index].astype(float)
        prev = -1.0
        for m in knn_query(f, ref, K=30):
            assert m.neighbor.image_id != ref.image_id
            v = by_id[m.neighbor.image_id].values[m.neighbor.descriptor_index].astype(float)
            assert abs(m.distance - np.linalg.norm(q - v)) < 1e-6
            assert m.distance >= prev
            prev = m.distance


def test_unresolvable_refs():
    sigs = random_sigs(np.random.default_rng(8), 2, 3)
    f = build_forest(sigs)
    with pytest.raises(UnresolvableRef):
        knn_query(f, DescriptorRef("nope", 0))
    with pytest.raises(UnresolvableRef):
        knn_query(f, DescriptorRef(sigs[0].image_id, 3))
    with pytest.raises(UnresolvableRef):
        brute_force_knn(sigs, DescriptorRef("nope", 0))


def test_bandwidth_example_with_floor():
    # Image a holds the origin; b holds (3,4,0..) and (0,0,12,..): pairwise 5, 12, 13.
    o = np.zeros(64)
    p = np.zeros(64)
    p[:2] = (3, 4)
    r = np.zeros(64)
    r[2] = 12
    sigs = [make_sig("a", o), make_sig("b", p), make_sig("c", r)]
    f = build_forest(sigs)
    bw = compute_bandwidths(f, checks=None)
    assert bw.alpha.tolist() == [5.0, 5.0, 12.0]
    assert compute_bandwidths(f, epsilon_floor=6.0).alpha.tolist() == [6.0, 6.0, 12.0]
    dup = [make_sig("a", o), make_sig("b", o)]
    assert compute_bandwidths(build_forest(dup)).alpha.tolist() == [1.0, 1.0]


def test_bandwidth_matches_brute_force():
    sigs = random_sigs(np.random.default_rng(9), 12, (5, 30))
    f = build_forest(sigs, seed=4)
    bw = compute_bandwidths(f, checks=None)
    for e in range(len(f)):
        ref = f.ref(e)
        expect = max(brute_force_knn(sigs, ref, K=1)[0].distance, 1.0)
        assert bw.alpha[e] == expect
    with pytest.raises(ValueError):
        compute_bandwidths(f, epsilon_floor=0.0)


def test_save_load_round_trip(tmp_path):
    sigs = random_sigs(np.random.default_rng(10), 5, 50)
    f = build_forest(sigs, seed=99)
    path = tmp_path / "f.sgf"
    save_forest(f, path)
    g = load_forest(path)
    assert forest_bytes(g) == path.read_bytes()
    for ta, tb in zip(f.structure(), g.structure()):
        for x, y in zip(ta, tb):
            assert np.array_equal(x, y)
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CorruptSignature):
        load_forest(path)
    path.write_bytes(raw[:-3])
    with pytest.raises(CorruptSignature):
        load_forest(path)


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.integers(1, 40), st.integers(1, 12))
def test_unbounded_oracle_property(seed, n_images, per_image, k):
    rng = np.random.default_rng(seed)
    sigs = random_sigs(rng, n_images, (1, per_image))
    # Coarse values force many exact distance ties.
    for s in sigs:
        for d in s.descriptors:
            d.values.flags.writeable = True
            d.values[:] //= 16
            d.values.flags.writeable = False
    f = build_forest(sigs, seed=seed, leaf_size=4)
    for ref in all_refs(sigs)[:20]:
        assert as_tuples(knn_query(f, ref, K=k, checks=None)) == as_tuples(brute_force_knn(sigs, ref, K=k))


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1), st.integers(1, 64))
def test_bounded_results_are_valid_neighbours(seed, checks):
    rng = np.random.default_rng(seed)
    sigs = random_sigs(rng, 5, 60, permutations=True)
    f = build_forest(sigs, seed=seed, leaf_size=8)
    ref = DescriptorRef(sigs[0].image_id, 0)
    approx = knn_query(f, ref, K=10, checks=checks)
    exact = brute_force_knn(sigs, ref, K=10)
    # A tight budget may see fewer than K foreign entries; what it returns is
    # sorted, foreign, and can only be worse than the exact list rank for rank.
    assert 1 <= len(approx) <= 10
    assert all(m.neighbor.image_id != ref.image_id for m in approx)
    assert [m.distance for m in approx] == sorted(m.distance for m in approx)
    for a, e in zip(approx, exact):
        assert a.distance >= e.distance
