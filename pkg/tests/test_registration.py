import itertools

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from mvdesc.geometry import area_weighted_sample, compute_obb, knn_graph
from mvdesc.registration import (CorrespondenceSet, LabeledPointSet, NoSharedLabelsError,
                                 affine_init, default_smooth_weight, energy_report,
                                 generate_pair_correspondences, graph_laplacian, icp_register,
                                 read_correspondences, read_correspondences_binary, smoothness,
                                 solve_offsets, write_correspondences, write_correspondences_binary)
from oracles import box_mesh


def cloud(seed, n=300, ext=(1.0, 0.6, 0.3)):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 3)) * ext


def warp(P, amp, phase):
    diag = np.linalg.norm(P.max(0) - P.min(0))
    f = 2.5 / diag
    return P + amp * diag * np.stack([np.sin(f * P[:, 1] + phase[0]), np.sin(f * P[:, 2] + phase[1]),
                                      np.sin(f * P[:, 0] + phase[2])], 1)


# ---------------------------------------------------------------- affine init

def test_affine_translation():
    a = cloud(0)
    t = np.array([0.3, -1.0, 2.0])
    T = affine_init(a, a + t)
    assert np.allclose(T.linear, np.eye(3), atol=1e-9)
    assert np.allclose(T.translation, t, atol=1e-9)


def test_affine_scale_two():
    a = cloud(1)
    b = 2 * (a - a.mean(0)) + a.mean(0)
    T = affine_init(a, b)
    assert np.allclose(np.linalg.svd(T.linear, compute_uv=False), 2, atol=1e-9)


def test_affine_rotated_copy_maps_obb_corners():
    a = cloud(2)
    R = Rotation.from_euler("xyz", [0.4, -0.7, 1.1]).as_matrix()
    b = a @ R.T + [1, 2, 3]
    T = affine_init(a, b)
    mapped = T.apply(compute_obb(a).corners())
    target = compute_obb(b).corners()
    d = np.linalg.norm(mapped[:, None] - target[None], axis=2)
    assert d.min(1).max() < 1e-5 and d.min(0).max() < 1e-5


def test_affine_flat_part_keeps_unit_ratio():
    a = cloud(3) * [1, 1, 0]
    b = cloud(4) * [2, 1, 0]
    T = affine_init(a, b)
    assert np.all(np.isfinite(T.linear))


# --------------------------------------------------------------- offset solve

def test_identity_matches_zero_offsets():
    a = cloud(5, 50)
    g = knn_graph(a, 6)
    idx = np.arange(50)
    oa, ob, rep = solve_offsets(a, a, idx, idx, g, g)
    assert np.abs(oa).max() < 1e-12 and np.abs(ob).max() < 1e-12 and rep.total == 0


def test_two_point_closed_form():
    a = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    delta = np.array([[0.2, -0.1, 0.3], [-0.4, 0.5, 0.1]])
    b = a + delta
    g = knn_graph(a, 1)
    w = 0.7
    oa, ob, _ = solve_offsets(a, b, np.array([0, 1]), np.array([0, 1]), g, knn_graph(b, 1), w)
    # |o0-d0|^2 + |o1-d1|^2 + 2w|o0-o1|^2  ->  sum fixed, difference shrunk by 1 + 4w
    s, d = delta[0] + delta[1], (delta[0] - delta[1]) / (1 + 4 * w)
    assert np.allclose(oa, [(s + d) / 2, (s - d) / 2], atol=1e-9)
    assert np.allclose(ob, -np.array([(s + d) / 2, (s - d) / 2]), atol=1e-9)


def test_constant_shift_exact():
    a = cloud(6, 80)
    t = np.array([0.1, 0.2, -0.3])
    idx = np.arange(80)
    oa, ob, _ = solve_offsets(a, a + t, idx, idx, knn_graph(a, 6), knn_graph(a + t, 6), 5.0)
    assert np.allclose(oa, t, atol=1e-6) and np.allclose(ob, -t, atol=1e-6)


def test_cg_matches_direct_solve():
    rng = np.random.default_rng(0)
    for n in (20, 120, 300):
        a = rng.normal(size=(n, 3))
        b = rng.normal(size=(n, 3))
        ga, gb = knn_graph(a, 6), knn_graph(b, 6)
        mab, mba = rng.integers(0, n, n), rng.integers(0, n, n)
        oa, ob, _ = solve_offsets(a, b, mab, mba, ga, gb, 2.0)
        M = np.eye(n) + 2.0 * graph_laplacian(ga, n).toarray()
        assert np.allclose(oa, np.linalg.solve(M, b[mab] - a), atol=1e-6)


def test_laplacian_matches_directed_edge_sum():
    a = cloud(7, 40)
    g = knn_graph(a, 6)
    o = np.random.default_rng(1).normal(size=(40, 3))
    L = graph_laplacian(g, 40)
    assert np.isclose(np.einsum("ic,ij,jc->", o, L.toarray(), o), smoothness(o, g))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_smoothness_nullspace(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(30, 3))
    g = knn_graph(a, 6)
    assert smoothness(np.tile(rng.normal(size=3), (30, 1)), g) == pytest.approx(0, abs=1e-20)
    # a kNN graph on 30 points with k=6 may not be connected; test on its components
    L = graph_laplacian(g, 30)
    n_comp = sp.csgraph.connected_components(L != 0, directed=False)[0]
    o = rng.normal(size=(30, 3))
    if n_comp == 1:
        assert smoothness(o, g) > 0


def test_swapping_inputs_swaps_fields():
    a, b = cloud(8, 60), cloud(9, 70) + 0.1
    ga, gb = knn_graph(a, 6), knn_graph(b, 6)
    rng = np.random.default_rng(0)
    mab, mba = rng.integers(0, 70, 60), rng.integers(0, 60, 70)
    oa, ob, r1 = solve_offsets(a, b, mab, mba, ga, gb)
    ob2, oa2, r2 = solve_offsets(b, a, mba, mab, gb, ga)
    assert np.allclose(oa, oa2) and np.allclose(ob, ob2)
    assert np.isclose(r1.total, r2.total)


def test_energy_report_terms():
    a, b = cloud(1, 40), cloud(2, 40)
    ga, gb = knn_graph(a, 6), knn_graph(b, 6)
    idx = np.arange(40)
    r = energy_report(a, b, 0.1 * a, 0.2 * b, idx, idx, ga, gb, 1.5)
    assert min(r.data_ab, r.data_ba, r.smooth_a, r.smooth_b) >= 0
    assert np.isclose(r.total, r.data_ab + r.data_ba + r.smooth_a + r.smooth_b)


# ------------------------------------------------------------------------ ICP

def test_identical_parts_converge_fast():
    a = cloud(10)
    res = icp_register(a, a)
    assert len(res.reports) - 1 <= 2 and res.converged
    assert np.array_equal(res.pairs, np.stack([np.arange(300)] * 2, 1))


def test_warp_recovery_single():
    a = area_weighted_sample(box_mesh((-0.7, -0.45, -0.25), (0.7, 0.45, 0.25)), 1000, 0).positions
    b = warp(a, 0.05, (0.3, 1.7, 4.0))
    diag = np.linalg.norm(b.max(0) - b.min(0))
    res = icp_register(affine_init(a, b).apply(a), b)
    err = np.linalg.norm(b[res.pairs[:, 0]] - b[res.pairs[:, 1]], axis=1)
    assert np.mean(err <= 0.02 * diag) >= 0.95


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000))
def test_energy_monotone(seed):
    rng = np.random.default_rng(seed)
    a = cloud(seed, 200)
    b = warp(a, 0.05, rng.uniform(0, 6, 3)) + rng.normal(scale=0.01, size=(200, 3))
    res = icp_register(affine_init(a, b).apply(a), b, max_iters=15)
    e = np.array([r.total for r in res.reports])
    assert np.all(np.diff(e) <= 1e-9 * e[:-1])


def test_non_convergence_flag():
    a = cloud(11, 200)
    b = warp(a, 0.05, (1, 2, 3))
    res = icp_register(a, b, max_iters=1, tol=0.0)
    assert not res.converged and len(res.reports) == 2


def test_default_weight_grows_with_density():
    assert default_smooth_weight(500, 500) < default_smooth_weight(8000, 8000)
    assert default_smooth_weight(10_000, 10_000) == pytest.approx(10.0)


# --------------------------------------------------------------- shape pairs

def two_part_shape(shape_id, seed=0, n=400):
    m = box_mesh((-1, -0.3, -0.2), (1, 0.3, 0.2))
    s = area_weighted_sample(m, n, seed)
    labels = (s.positions[:, 0] > 0).astype(int)
    return LabeledPointSet(s.positions, labels, shape_id)


def test_disjoint_labels_error():
    a = two_part_shape("a")
    b = LabeledPointSet(a.points, a.labels + 5, "b")
    with pytest.raises(NoSharedLabelsError):
        generate_pair_correspondences(a, b)


def test_identical_shapes_identity_pairs():
    a = two_part_shape("a")
    b = LabeledPointSet(a.points.copy(), a.labels.copy(), "b")
    c = generate_pair_correspondences(a, b)
    assert np.array_equal(np.sort(c.idx_a), np.arange(len(a.points)))
    assert np.array_equal(c.idx_a, c.idx_b)
    assert set(c.shape_a) == {"a"} and set(c.shape_b) == {"b"}


def test_label_only_in_one_shape_skipped():
    a = two_part_shape("a")
    labels = a.labels.copy()
    labels[:10] = 9
    b = LabeledPointSet(a.points.copy(), labels, "b")
    c = generate_pair_correspondences(a, b)
    assert not np.isin(c.idx_b, np.arange(10)).any()


def test_ten_thousand_point_pair_count():
    m = box_mesh((-1, -0.3, -0.2), (1, 0.3, 0.2))
    a = LabeledPointSet.from_mesh(m.__class__(m.vertices, m.faces, np.zeros(len(m.faces), int)),
                                  10_000, seed=0, shape_id="a")
    b = LabeledPointSet(warp(a.points, 0.03, (0, 1, 2)), a.labels, "b")
    c = generate_pair_correspondences(a, b, max_iters=3)
    assert 10_000 <= len(c) <= 20_000


def test_correspondence_io(tmp_path):
    c = CorrespondenceSet.concat([
        CorrespondenceSet.from_pairs("s1", "s2", np.array([[0, 1], [2, 3]])),
        CorrespondenceSet.from_pairs("s1", "s3", np.array([[4, 5]]))])
    write_correspondences(tmp_path / "c.txt", c)
    write_correspondences_binary(tmp_path / "c.bin", c)
    for back in (read_correspondences(tmp_path / "c.txt"), read_correspondences_binary(tmp_path / "c.bin")):
        assert back.shape_a == c.shape_a and back.shape_b == c.shape_b
        assert np.array_equal(back.idx_a, c.idx_a) and np.array_equal(back.idx_b, c.idx_b)
    assert c.shape_pairs() == [("s1", "s2"), ("s1", "s3")]
