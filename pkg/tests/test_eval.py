import itertools
import json

import numpy as np
import pytest

from shdeconv.evaluation import (
    THRESHOLDS,
    PeakSet,
    SphereRotator,
    concat_graph_op,
    detect_peaks,
    equivariance_error,
    fold_angle,
    gt_directions,
    hemi_conv_op,
    lattice_rotations,
    ls_deconvolve,
    match_peaks,
    random_bandlimited_signal,
    region_voxels,
    rotate_lattice,
    run_equivariance_suite,
    score,
    spatial_sh_op,
    sweep_thresholds,
    vertex_permutation,
    write_suite_reports,
)
from shdeconv.graph import hemi_stack
from shdeconv.grid import healpix_hemisphere
from shdeconv.harmonics import fit_matrix, sh_matrix, sh_rotation
from shdeconv.phantom import FiberConfig, PhantomSpec, gt_fodf, make_phantom, phantom_rf


def _voxel(dirs, fracs):
    d = np.asarray(dirs, dtype=float)[None, None, None]
    f = np.asarray(fracs, dtype=float)[None, None, None]
    return FiberConfig(directions=d, fractions=f, labels=np.array([[["x"]]], dtype=object))


def _rot(axis, deg):
    a = np.asarray(axis, dtype=float) / np.linalg.norm(axis)
    t = np.radians(deg)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(t) * K + (1 - np.cos(t)) * K @ K


# ---------------------------------------------------------------------------
# peaks


def test_single_cap_gives_one_peak_at_centre():
    hemi = healpix_hemisphere(8)
    u = hemi.vertices[37]
    F = gt_fodf(_voxel([u], [1.0]), hemi)
    peaks = detect_peaks(F, hemi)
    d, v = peaks[0, 0, 0]
    assert len(d) == 1 and v[0] == 1.0
    assert fold_angle(d[0], u) < 1e-9


def test_two_equal_caps_at_90_degrees():
    # an equator vertex and its quarter turn about z: the caps are congruent on the grid
    hemi = healpix_hemisphere(8)
    u = hemi.vertices[np.flatnonzero(hemi.vertices[:, 2] == 0)[0]]
    w = _rot([0, 0, 1], 90) @ u
    F = gt_fodf(_voxel([u, w], [0.4, 0.4]), hemi)
    d, v = detect_peaks(F, hemi)[0, 0, 0]
    assert len(d) == 2
    np.testing.assert_allclose(v, [0.5, 0.5], rtol=1e-12)
    got = [min(fold_angle(x, g) for x in d) for g in (u, w)]
    assert max(got) < 1e-6


def test_constant_and_zero_fodf_have_no_peaks():
    hemi = healpix_hemisphere(4)
    F = np.stack([np.full(hemi.count, 0.3), np.zeros(hemi.count)]).reshape(2, 1, 1, hemi.count)
    assert detect_peaks(F, hemi).counts().tolist() == [[[0]], [[0]]]


def test_rel_floor_and_relative_volumes():
    hemi = healpix_hemisphere(8)
    F = gt_fodf(_voxel([[0, 0, 1.0], [1.0, 0, 0]], [0.6, 0.05]), hemi)
    d, v = detect_peaks(F, hemi, rel_floor=0.0)[0, 0, 0]
    assert len(d) == 2 and abs(v.sum() - 1) < 1e-12 and v[0] > v[1]
    d, v = detect_peaks(F, hemi, rel_floor=0.1)[0, 0, 0]
    assert len(d) == 1


def test_min_separation_merges_nearby_maxima():
    hemi = healpix_hemisphere(8)
    vals = np.zeros(hemi.count)
    i = 10
    ang = fold_angle(hemi.vertices, hemi.vertices[i])
    j = int(np.flatnonzero((ang > 16) & (ang < 19))[0])
    vals[i], vals[j] = 1.0, 0.9
    assert len(detect_peaks(vals[None], hemi, min_separation_deg=20).directions[0]) == 1
    assert len(detect_peaks(vals[None], hemi, min_separation_deg=5).directions[0]) == 2


def test_peakset_filter():
    p = PeakSet((2,), [np.eye(3)[:2], np.eye(3)[:1]], [np.array([0.7, 0.3]), np.array([1.0])])
    f = p.filtered(0.5)
    assert f.counts().tolist() == [1, 1] and f.params["threshold"] == 0.5


# ---------------------------------------------------------------------------
# matching


def test_identical_sets_match_perfectly():
    g = np.array([[0, 0, 1.0], [1.0, 0, 0]])
    m = match_peaks(g, g)
    assert (m.tp, m.fp, m.fn) == (2, 0, 0)
    assert m.angles.max() < 1e-6


def test_outside_cone_is_fp_and_fn():
    g = np.array([[0, 0, 1.0]])
    p = (_rot([1, 0, 0], 26.0) @ g[0])[None]
    m = match_peaks(p, g)
    assert (m.tp, m.fp, m.fn) == (0, 1, 1)
    m = match_peaks(-((_rot([1, 0, 0], 24.0) @ g[0])[None]), g)
    assert m.tp == 1 and abs(m.angles[0] - 24.0) < 1e-9


def test_greedy_matches_brute_force_assignment():
    rng = np.random.default_rng(0)
    for _ in range(50):
        gt = np.linalg.qr(rng.standard_normal((3, 3)))[0].T  # orthogonal axes
        pred = np.array([_rot(rng.standard_normal(3), rng.uniform(0, 5)) @ g for g in gt])
        pred = pred[rng.permutation(3)]
        m = match_peaks(pred, gt)
        ang = fold_angle(gt[:, None], pred[None])
        best = min(itertools.permutations(range(3)), key=lambda p: sum(ang[i, p[i]] for i in range(3)))
        assert sorted(m.pairs) == [(i, best[i]) for i in range(3)]


def test_cone_validation():
    with pytest.raises(ValueError):
        match_peaks(np.eye(3), np.eye(3), cone_deg=90)


def _two_peak_set():
    d = np.array([[0, 0, 1.0], [1.0, 0, 0]])
    return PeakSet((1,), [d], [np.array([0.5, 0.5])]), [d]


def test_high_threshold_filters_equal_peaks():
    peaks, gt = _two_peak_set()
    r = score(peaks, gt, threshold=0.95)
    assert (r.tp, r.fp, r.fn) == (0, 0, 2)


def test_perfect_detector_sweep():
    peaks, gt = _two_peak_set()
    rep = sweep_thresholds(peaks, gt)
    assert len(rep.rows) == 19
    np.testing.assert_allclose([r.threshold for r in rep.rows], THRESHOLDS)
    for r in rep.rows:
        if r.threshold <= 0.5:
            assert r.f1 == 1.0
    assert rep.best.f1 == 1.0


def test_all_reject_detector_has_zero_auc():
    empty = PeakSet((1,), [np.zeros((0, 3))], [np.zeros(0)])
    rep = sweep_thresholds(empty, [np.eye(3)[:2]])
    assert rep.pr_auc == 0.0 and rep.best.f1 == 0.0


def test_metric_definitions():
    d = np.array([[0, 0, 1.0]])
    wrong = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    peaks = PeakSet((2,), [d, wrong], [np.ones(1), np.full(2, 0.5)])
    r = score(peaks, [d, d])
    assert (r.tp, r.fp, r.fn) == (1, 2, 1)
    assert r.fpr == 2 / 2 and r.fnr == 1 / 2
    assert r.precision == 1 / 3 and r.recall == 1 / 2
    np.testing.assert_allclose(r.f1, 2 * (1 / 3) * (1 / 2) / (1 / 3 + 1 / 2))
    assert 0 <= r.angular_error <= 25


def test_report_outputs(tmp_path):
    peaks, gt = _two_peak_set()
    rep = sweep_thresholds(peaks, gt)
    rep.write_csv(tmp_path / "t.csv")
    assert len((tmp_path / "t.csv").read_text().strip().splitlines()) == 20
    assert set(rep.summary()) == {"best", "pr_auc"}


# ---------------------------------------------------------------------------
# noiseless-limit oracle


def test_least_squares_oracle_on_noiseless_phantom():
    spec = PhantomSpec(dims=(8, 8, 8), nside=8, snr=np.inf, shells=((1000.0, 29),))
    dwi, fibers = make_phantom(spec)
    hemi = healpix_hemisphere(8)
    F = ls_deconvolve(dwi, phantom_rf(spec), hemi)
    peaks = detect_peaks(np.maximum(F, 0), hemi)
    gt = gt_directions(fibers)
    single = score(peaks, gt, region_voxels(fibers, "single"))
    assert single.angular_error < 3.0 and single.fn == 0


# ---------------------------------------------------------------------------
# equivariance harness


def test_lattice_rotations():
    mats = lattice_rotations()
    assert len(mats) == 24
    assert len({m.tobytes() for m in mats}) == 24
    with pytest.raises(ValueError):
        rotate_lattice(np.zeros((2, 2, 2, 1)), _rot([0, 0, 1], 45))


def test_rotate_lattice_moves_positions():
    x = np.random.default_rng(0).random((4, 4, 4, 1))
    T = _rot([0, 0, 1], 90).round()
    y = rotate_lattice(x, T)
    c = 1.5
    for p in itertools.product(range(4), repeat=3):
        q = T @ (np.array(p) - c) + c
        assert y[tuple(q.round().astype(int))][0] == x[p][0]


def test_bandlimited_signal_round_trip_and_determinism():
    f = random_bandlimited_signal((2, 2, 2), nside=4, seed=3)
    hemi = healpix_hemisphere(4)
    Y = sh_matrix(hemi.vertices, 8)
    again = f @ (Y.values @ fit_matrix(Y)).T
    assert np.abs(again - f).max() < 1e-6
    assert np.array_equal(f, random_bandlimited_signal((2, 2, 2), nside=4, seed=3))
    assert random_bandlimited_signal(nside=4, seed=0).shape == (1, 8, 8, 8, hemi.count)


def test_identity_transform_gives_zero_error():
    hemi = healpix_hemisphere(4)
    op = hemi_conv_op(hemi_stack(4, 4)[1])(np.random.default_rng(0))
    f = random_bandlimited_signal((4, 4, 4), nside=4, seed=1)
    e, deg = equivariance_error(op, f, np.eye(3), np.eye(3), hemi)
    assert e < 1e-24 and not deg


def test_zero_response_is_flagged():
    hemi = healpix_hemisphere(2)
    e, deg = equivariance_error(lambda x: 0 * x, np.ones((1, 2, 2, 2, hemi.count)), np.eye(3), np.eye(3), hemi)
    assert e == 0.0 and deg


def test_graph_filter_commutes_with_lattice_rotation():
    hemi = healpix_hemisphere(4)
    op = hemi_conv_op(hemi_stack(4, 5)[1])(np.random.default_rng(2))
    f = random_bandlimited_signal((4, 4, 4), nside=4, seed=4)
    e, _ = equivariance_error(op, f, _rot([0, 0, 1], 90).round(), np.eye(3), hemi)
    assert e < 1e-5


def test_z_quarter_turn_is_an_exact_vertex_permutation():
    hemi = healpix_hemisphere(4)
    perm = vertex_permutation(_rot([0, 0, 1], 90), hemi)
    assert perm is not None and sorted(perm.tolist()) == list(range(hemi.count))
    assert vertex_permutation(_rot([1, 1, 0], 33), hemi) is None
    rot = SphereRotator(hemi, 8)
    f = random_bandlimited_signal((1, 1, 1), nside=4, seed=0)
    R = _rot([0, 0, 1], 90)
    Y = sh_matrix(hemi.vertices, 8)
    via_sh = f @ (Y.values @ sh_rotation(R, 8) @ fit_matrix(Y)).T
    np.testing.assert_allclose(rot(f, R), via_sh, atol=1e-8)


def test_suite_ordering_and_reports(tmp_path):
    # nside 4 is too coarse for the degree-12 output rotator; nside 8 is the harness resolution
    stack = hemi_stack(8, 4)[1]
    hemi = healpix_hemisphere(8)
    ops = {"hemi_conv": hemi_conv_op(stack, c_out=2), "spatial_sh": spatial_sh_op(hemi, c_out=1),
           "concat": concat_graph_op(stack, c_out=2)}
    res = run_equivariance_suite(ops, n_trials=3, seed=0, nside=8, dims=(4, 4, 4))
    summary = write_suite_reports(res, tmp_path / "e.csv", tmp_path / "e.json")
    med = {(s["op"], s["mode"]): s["median"] for s in summary}
    assert med[("hemi_conv", "voxel")] < 0.1 * med[("spatial_sh", "voxel")]
    assert med[("hemi_conv", "grid")] < 0.1 * med[("concat", "grid")]
    assert json.loads((tmp_path / "e.json").read_text()) == summary
    assert len((tmp_path / "e.csv").read_text().strip().splitlines()) == 1 + 3 * 2 * 3
    again = run_equivariance_suite(ops, n_trials=3, seed=0, nside=8, dims=(4, 4, 4))
    assert [r.summary() for r in again] == summary
    one = run_equivariance_suite({"h": hemi_conv_op(stack)}, n_trials=1, nside=8, dims=(2, 2, 2), modes=("voxel",))
    assert len(one) == 1 and one[0].summary()["trials"] == 1
