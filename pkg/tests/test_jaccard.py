import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import make_sig, random_sigs
from sigprint.descriptor import extract_signature
from sigprint.errors import EmptyCollection, EmptySignature, NotIndexed
from sigprint.index import build_forest, compute_bandwidths
from sigprint.jaccard import (
    SimilarityMatrix,
    SoftJaccardParams,
    jaccard_distance,
    jaccard_from_counts,
    jaccard_score,
    pairwise_matrix,
    read_matrix_csv,
    soft_intersection,
)
from sigprint.volume import PhantomSpec, make_phantom

SOFT_ALL = SoftJaccardParams(checks=None)


def setup(sigs, floor=1.0, seed=0):
    f = build_forest(sigs, seed=seed)
    return f, compute_bandwidths(f, checks=None, epsilon_floor=floor)


def unit(i, scale=60):
    v = np.zeros(64, dtype=int)
    v[i] = scale
    return v


# ---- arithmetic -------------------------------------------------------------

def test_jaccard_from_counts_example():
    j = jaccard_from_counts(4, 10, 10)
    assert j == 0.25
    assert math.isclose(jaccard_distance(j), math.log(4), rel_tol=1e-15)


def test_distance_sentinels():
    assert jaccard_distance(0.0) == math.inf
    assert jaccard_distance(1.0) == 0.0
    assert jaccard_from_counts(0, 3, 4) == 0.0


def test_params_validate():
    for bad in (dict(K=0), dict(mode="fuzzy"), dict(symmetrize="max")):
        with pytest.raises(ValueError):
            SoftJaccardParams(**bad)


# ---- intersection examples --------------------------------------------------

def test_identical_sets_intersection_is_size():
    vals = np.stack([unit(i) for i in range(5)])
    a, b = make_sig("a", vals), make_sig("b", vals)
    f, bw = setup([a, b])
    assert soft_intersection(a, b, f, bw, SOFT_ALL) == 5.0
    s = jaccard_score(a, b, f, bw, SOFT_ALL)
    assert (s.jaccard, s.distance) == (1.0, 0.0)


def test_disjoint_sets():
    a = make_sig("a", np.stack([unit(0), unit(1)]))
    b = make_sig("b", np.stack([unit(2), unit(3)]))
    # Copies in c and d absorb every K=1 neighbour, so a and b never meet.
    c = make_sig("c", np.stack([unit(0), unit(1)]))
    d = make_sig("d", np.stack([unit(2), unit(3)]))
    f, bw = setup([a, b, c, d])
    p = SoftJaccardParams(K=1, checks=None)
    assert soft_intersection(a, b, f, bw, p) == 0.0
    s = jaccard_score(a, b, f, bw, p)
    assert s.jaccard == 0.0 and s.distance == math.inf


def test_half_weight_terms():
    # Each A descriptor has an exact copy in C (so alpha falls to the floor) and a
    # B neighbour at distance 2; floor = 2 / sqrt(2 ln 2) makes every B term 0.5.
    floor = 2.0 / math.sqrt(2.0 * math.log(2.0))
    a_vals = np.stack([unit(0), unit(1)])
    b_vals = a_vals.copy()
    b_vals[:, 10] += 2
    a, b, c = make_sig("a", a_vals), make_sig("b", b_vals), make_sig("c", a_vals)
    f, bw = setup([a, b, c], floor=floor)
    assert np.allclose(bw.alpha[list(f.image_entries("a"))], floor)
    inter = soft_intersection(a, b, f, bw, SOFT_ALL)
    assert math.isclose(inter, 1.0, rel_tol=1e-12)


def test_nearest_neighbour_kernel_weight():
    # With B the only other image, alpha is the distance to the B match: weight e^-1/2.
    a = make_sig("a", unit(0))
    b_val = unit(0)
    b_val[5] = 7
    b = make_sig("b", b_val)
    f, bw = setup([a, b])
    assert bw.alpha.tolist() == [7.0, 7.0]
    assert math.isclose(soft_intersection(a, b, f, bw, SOFT_ALL), math.exp(-0.5), rel_tol=1e-15)


def test_jaccard_example_symmetrized_four():
    # A third image absorbs the unshared descriptors' neighbours so only the twins hit B.
    shared = [unit(i) for i in range(4)]
    a_only = [unit(10 + i) for i in range(6)]
    b_only = [unit(30 + i) for i in range(6)]
    a = make_sig("a", np.stack(shared + a_only))
    b = make_sig("b", np.stack(shared + b_only))
    c = make_sig("c", np.stack(a_only + b_only))
    f, bw = setup([a, b, c])
    s = jaccard_score(a, b, f, bw, SoftJaccardParams(K=1, mode="hard", checks=None))
    assert s.intersection == 4.0
    assert s.jaccard == 0.25
    assert math.isclose(s.distance, math.log(4), rel_tol=1e-15)


def test_same_image_scores_one():
    sigs = random_sigs(np.random.default_rng(1), 3, 10)
    f, bw = setup(sigs)
    s = jaccard_score(sigs[0], sigs[0], f, bw)
    assert (s.jaccard, s.distance) == (1.0, 0.0)


def test_errors():
    sigs = random_sigs(np.random.default_rng(2), 3, 5)
    f, bw = setup(sigs)
    stranger = make_sig("zzz", np.zeros((2, 64)))
    with pytest.raises(NotIndexed):
        soft_intersection(sigs[0], stranger, f, bw)
    altered = make_sig(sigs[1].image_id, np.zeros((5, 64)))
    with pytest.raises(NotIndexed):
        soft_intersection(sigs[0], altered, f, bw)
    empty = make_sig("e", np.zeros((0, 64)))
    with pytest.raises(EmptySignature):
        jaccard_score(sigs[0], empty, f, bw)
    with pytest.raises(EmptyCollection):
        pairwise_matrix(sigs[:1])
    with pytest.raises(EmptySignature):
        pairwise_matrix(sigs + [empty])


# ---- oracles and properties ---------------------------------------------------

def hard_oracle(sigs, a_id, b_id, K):
    """Exhaustive K-NN over foreign descriptors, ties by (image_id, index); count hits in B."""
    rows = [(s.image_id, i, s.values[i].astype(np.int64)) for s in sorted(sigs, key=lambda s: s.image_id)
            for i in range(len(s))]
    count = 0
    for img, _, q in rows:
        if img != a_id:
            continue
        foreign = [(int(((v - q) ** 2).sum()), k, other) for k, (other, _, v) in enumerate(rows) if other != img]
        foreign.sort()
        count += any(other == b_id for _, _, other in foreign[:K])
    return count


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_hard_mode_matches_counting_oracle(seed, K):
    rng = np.random.default_rng(seed)
    sigs = random_sigs(rng, 4, (1, 12))
    for s in sigs:  # coarse values give plenty of distance ties
        for d in s.descriptors:
            d.values.flags.writeable = True
            d.values[:] //= 21
            d.values.flags.writeable = False
    f, bw = setup(sigs, seed=seed)
    p = SoftJaccardParams(K=K, mode="hard", checks=None)
    for a, b in itertools.permutations(sigs, 2):
        assert soft_intersection(a, b, f, bw, p) == hard_oracle(sigs, a.image_id, b.image_id, K)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.integers(1, 30))
def test_score_properties(seed, K):
    rng = np.random.default_rng(seed)
    sigs = random_sigs(rng, 4, (1, 15))
    f, bw = setup(sigs, seed=seed)
    soft = SoftJaccardParams(K=K)
    hard = SoftJaccardParams(K=K, mode="hard")
    for a, b in itertools.combinations(sigs, 2):
        s_ab, s_ba = jaccard_score(a, b, f, bw, soft), jaccard_score(b, a, f, bw, soft)
        assert 0.0 <= s_ab.jaccard <= 1.0
        assert s_ab.jaccard == s_ba.jaccard and s_ab.distance == s_ba.distance
        assert soft_intersection(a, b, f, bw, soft) <= soft_intersection(a, b, f, bw, hard) <= len(a)
        assert soft_intersection(a, b, f, bw, soft) > 0 or soft_intersection(a, b, f, bw, hard) == 0


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.integers(3, 6), st.integers(2, 14))
def test_hard_jaccard_triangle_inequality(seed, n_sigs, n_elements):
    # Every element lives in exactly two signatures and elements are far apart,
    # so with K=1 each descriptor's only neighbour is its twin: a true bijection.
    rng = np.random.default_rng(seed)
    members = {i: [] for i in range(n_sigs)}
    for e in range(n_elements):
        i, j = rng.choice(n_sigs, 2, replace=False)
        members[int(i)].append(e)
        members[int(j)].append(e)
    if any(not m for m in members.values()):
        return
    sigs = [make_sig(f"s{i}", np.stack([unit(e % 64, 10 + 3 * (e // 64)) for e in members[i]]))
            for i in range(n_sigs)]
    f, bw = setup(sigs, seed=seed)
    p = SoftJaccardParams(K=1, mode="hard", checks=None)
    dist = {}
    for a, b in itertools.combinations(sigs, 2):
        s = jaccard_score(a, b, f, bw, p)
        exact = len(set(members[int(a.image_id[1:])]) & set(members[int(b.image_id[1:])]))
        assert s.intersection == exact
        dist[a.image_id, b.image_id] = dist[b.image_id, a.image_id] = 1.0 - s.jaccard
    ids = [s.image_id for s in sigs]
    for x, y, z in itertools.permutations(ids, 3):
        assert dist[x, z] <= dist[x, y] + dist[y, z] + 1e-12


def test_distance_order_reverses_jaccard_order():
    sigs = random_sigs(np.random.default_rng(3), 8, (5, 20))
    m = pairwise_matrix(sigs, seed=3)
    j, d = m.jaccard, m.distance
    for a, b in itertools.combinations(range(len(j)), 2):
        if j[a] < j[b]:
            assert d[a] > d[b]
        elif j[a] == j[b]:
            assert d[a] == d[b]


# ---- pairwise matrix -----------------------------------------------------------

def test_three_copies_all_one():
    vals = np.random.default_rng(4).integers(0, 64, (12, 64))
    sigs = [make_sig(n, vals) for n in ("x", "y", "z")]
    m = pairwise_matrix(sigs, seed=1)
    assert np.all(m.jaccard == 1.0)
    assert np.all(m.distance == 0.0)
    assert m.score("x", "x").jaccard == 1.0


def test_query_pass_touches_each_descriptor_once():
    sigs = random_sigs(np.random.default_rng(5), 7, (3, 25))
    m = pairwise_matrix(sigs, seed=5)
    assert m.query_count == sum(len(s) for s in sigs)


def test_matrix_matches_per_pair_route():
    sigs = random_sigs(np.random.default_rng(6), 6, (4, 30), permutations=True)
    for p in (SoftJaccardParams(), SoftJaccardParams(K=5, mode="hard"), SoftJaccardParams(symmetrize="none")):
        m = pairwise_matrix(sigs, p, seed=9)
        f = build_forest(sigs, seed=9)
        bw = compute_bandwidths(f, checks=p.checks, epsilon_floor=p.epsilon_floor)
        by_id = {s.image_id: s for s in sigs}
        for a, b, j, d in m.pairs():
            s = jaccard_score(by_id[a], by_id[b], f, bw, p)
            assert (s.jaccard, s.distance) == (j, d)


def test_matrix_thread_and_run_invariant():
    import numba
    sigs = random_sigs(np.random.default_rng(7), 10, (10, 40))
    base = pairwise_matrix(sigs, seed=2).to_csv()
    old = numba.get_num_threads()
    try:
        numba.set_num_threads(1)
        assert pairwise_matrix(sigs, seed=2).to_csv() == base
    finally:
        numba.set_num_threads(old)


def test_duplicate_has_smallest_distance():
    s1 = extract_signature(make_phantom(PhantomSpec(seed=31)), image_id="p1")
    s2 = extract_signature(make_phantom(PhantomSpec(seed=32)), image_id="p2")
    dup = s1.renamed("p1copy")
    m = pairwise_matrix([s1, s2, dup], seed=0)
    d_dup = m.score("p1", "p1copy").distance
    others = [m.score("p1", "p2").distance, m.score("p2", "p1copy").distance]
    assert d_dup < min(others)


def test_csv_round_trip(tmp_path):
    sigs = random_sigs(np.random.default_rng(8), 5, 10)
    sigs.append(make_sig("zz_far", np.full((3, 64), 255)))
    m = pairwise_matrix(sigs, SoftJaccardParams(K=2), seed=0)
    text = m.to_csv()
    assert text.splitlines()[0] == "image_a,image_b,jaccard,distance"
    assert "inf" in text
    path = tmp_path / "m.csv"
    m.write_csv(path)
    back = read_matrix_csv(path)
    assert back.image_ids == m.image_ids
    assert np.array_equal(back.jaccard, m.jaccard)
    assert np.array_equal(back.distance, m.distance)
    assert back.to_csv() == text


def test_csv_missing_pair(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("image_a,image_b,jaccard,distance\na,b,0.5,0.69\na,c,0.5,0.69\n")
    with pytest.raises(ValueError, match="missing pair"):
        read_matrix_csv(path)
    path.write_text("x,y\n")
    with pytest.raises(ValueError):
        read_matrix_csv(path)


def test_matrix_condensed_indexing():
    ids = ["a", "b", "c", "d"]
    j = np.arange(6) / 10
    m = SimilarityMatrix(ids, j, -np.log(np.where(j > 0, j, 1)))
    seen = [(a, b) for a, b, _, _ in m.pairs()]
    assert seen == list(itertools.combinations(ids, 2))
    for k, (a, b) in enumerate(seen):
        assert m.score(a, b).jaccard == m.score(b, a).jaccard == j[k]
