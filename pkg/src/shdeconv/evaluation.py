"""Peak extraction and matching metrics, plus the equivariance-error harness."""
import csv
import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .grid import healpix_hemisphere
from .harmonics import (
    IllConditionedFit,
    fit_matrix,
    fodf_degree,
    rf_scaling,
    sh_matrix,
    sh_rotation,
    shell_groups,
)

THRESHOLDS = np.round(np.linspace(0.05, 0.95, 19), 2)
DEFAULT_CONE = 25.0
DEFAULT_MIN_SEPARATION = 15.0
DEFAULT_REL_FLOOR = 0.1


def fold_angle(u, v):
    """Angle in degrees between the axes of ``u`` and ``v`` (antipodes identified)."""
    c = np.abs(np.sum(np.asarray(u) * np.asarray(v), axis=-1))
    return np.degrees(np.arccos(np.clip(c, 0.0, 1.0)))


# ---------------------------------------------------------------------------
# peaks


@dataclass
class PeakSet:
    """Per voxel (flat C order over ``dims``): peak directions (k, 3) and relative volumes (k,)."""

    dims: tuple
    directions: list
    volumes: list
    params: dict = field(default_factory=dict)

    def __getitem__(self, index):
        flat = int(np.ravel_multi_index(index, self.dims))
        return self.directions[flat], self.volumes[flat]

    def counts(self):
        return np.array([len(v) for v in self.volumes]).reshape(self.dims)

    def filtered(self, tau):
        dirs, vols = [], []
        for d, v in zip(self.directions, self.volumes):
            keep = v >= tau
            dirs.append(d[keep])
            vols.append(v[keep])
        return PeakSet(self.dims, dirs, vols, dict(self.params, threshold=float(tau)))


def peak_neighborhoods(hemi, min_separation_deg=DEFAULT_MIN_SEPARATION, k_neighbors=8):
    """For each kept vertex, the kept vertices it must exceed to be a peak.

    Union of its ``k_neighbors`` nearest neighbours on the full sphere (read
    through the fold map) and every vertex within ``min_separation_deg``
    modulo antipodes. Returned as a padded index array with ``-1`` fill.
    """
    sphere = hemi.parent.vertices
    kept = hemi.vertices
    _, knn = cKDTree(sphere).query(kept, k=k_neighbors + 1)
    ang = fold_angle(kept[:, None, :], kept[None, :, :])
    nbrs = []
    for i in range(hemi.count):
        s = set(hemi.fold_map[knn[i, 1:]].tolist())
        s |= set(np.flatnonzero(ang[i] <= min_separation_deg).tolist())
        s.discard(i)
        nbrs.append(sorted(s))
    width = max(len(n) for n in nbrs)
    out = np.full((hemi.count, width), -1, dtype=np.int64)
    for i, n in enumerate(nbrs):
        out[i, : len(n)] = n
    return out


def _voxel_peaks(vals, nbr, valid, vertices, tol):
    vmax = vals.max()
    if not vmax > 0:
        return np.zeros((0, 3)), np.zeros(0)
    padded = np.where(valid, vals[np.where(valid, nbr, 0)], -np.inf)
    nmax = padded.max(axis=1)
    weak = vals >= nmax - tol
    strict = vals > nmax + tol
    peaks = []
    if np.all(strict[weak]):
        idx = np.flatnonzero(weak)
        peaks = [(vertices[i], vals[i]) for i in idx]
    else:
        # plateaus: connected sets of equal-valued weak maxima
        seen = np.zeros(vals.size, dtype=bool)
        for i in np.flatnonzero(weak):
            if seen[i]:
                continue
            group, stack, ok = [i], [i], True
            seen[i] = True
            while stack:
                j = stack.pop()
                for q in nbr[j][valid[j]]:
                    if abs(vals[q] - vals[i]) <= tol:
                        if not seen[q]:
                            seen[q] = True
                            group.append(q)
                            stack.append(q)
                    elif vals[q] > vals[i]:
                        ok = False
            if not ok or len(group) == vals.size:
                continue
            g = vertices[group]
            g = g * np.sign(g @ g[0])[:, None]
            mean = g.sum(0)
            if len(group) == 1:
                d = vertices[group[0]]
            else:
                # report the member vertex closest to the plateau's mean axis
                d = vertices[group[int(np.argmax(np.abs(g @ mean)))]]
            peaks.append((d, vals[i]))
    if not peaks:
        return np.zeros((0, 3)), np.zeros(0)
    dirs = np.array([p[0] for p in peaks])
    heights = np.array([p[1] for p in peaks])
    keep = heights >= 0
    dirs, heights = dirs[keep], heights[keep]
    return dirs, heights


def detect_peaks(values, hemi, min_separation_deg=DEFAULT_MIN_SEPARATION, rel_floor=DEFAULT_REL_FLOOR,
                 k_neighbors=8):
    """Local maxima of an fODF field sampled on ``hemi``.

    ``values`` is (X, Y, Z, V+) (or a FodfField, whose tissue 0 is used). A
    vertex is a peak if it exceeds every vertex of its neighbourhood and is at
    least ``rel_floor`` times the voxel maximum; equal-valued connected
    maxima are merged into one peak. Relative volume is the peak value over
    the sum of peak values in the voxel.
    """
    if hasattr(values, "values") and hasattr(values, "hemi"):
        values = values.values[0]
    values = np.asarray(values, dtype=np.float64)
    dims = values.shape[:-1]
    nbr = peak_neighborhoods(hemi, min_separation_deg, k_neighbors)
    valid = nbr >= 0
    vertices = hemi.vertices
    dirs_out, vols_out = [], []
    for vals in values.reshape(-1, values.shape[-1]):
        tol = 1e-9 * max(np.abs(vals).max(), 1e-300)
        d, h = _voxel_peaks(vals, nbr, valid, vertices, tol)
        if h.size:
            keep = h >= rel_floor * vals.max()
            d, h = d[keep], h[keep]
        total = h.sum()
        order = np.argsort(-h, kind="stable")
        dirs_out.append(d[order])
        vols_out.append(h[order] / total if total > 0 else h[order])
    params = {"min_separation_deg": min_separation_deg, "rel_floor": rel_floor, "k_neighbors": k_neighbors}
    return PeakSet(tuple(dims), dirs_out, vols_out, params)


# ---------------------------------------------------------------------------
# matching


@dataclass
class VoxelMatch:
    pairs: list
    angles: np.ndarray
    fp: int
    fn: int

    @property
    def tp(self):
        return len(self.pairs)


def match_peaks(pred, gt, cone_deg=DEFAULT_CONE):
    """Greedy matching by ascending angle, each ground-truth peak to at most one prediction."""
    if not 0 < cone_deg < 90:
        raise ValueError("cone must be in (0, 90) degrees")
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        return VoxelMatch([], np.zeros(0), len(pred), len(gt))
    ang = fold_angle(gt[:, None, :], pred[None, :, :])
    order = np.argsort(ang, axis=None, kind="stable")
    used_g, used_p = set(), set()
    pairs, angles = [], []
    for flat in order:
        g, p = np.unravel_index(flat, ang.shape)
        if ang[g, p] > cone_deg:
            break
        if g in used_g or p in used_p:
            continue
        used_g.add(g)
        used_p.add(p)
        pairs.append((int(g), int(p)))
        angles.append(ang[g, p])
    return VoxelMatch(pairs, np.array(angles), len(pred) - len(pairs), len(gt) - len(pairs))


@dataclass
class MatchRow:
    threshold: float
    tp: int
    fp: int
    fn: int
    angular_error: float
    fpr: float
    fnr: float
    precision: float
    recall: float
    f1: float


@dataclass
class MatchReport:
    rows: list
    best: MatchRow
    pr_auc: float

    def as_dicts(self):
        return [r.__dict__ for r in self.rows]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(MatchRow.__dataclass_fields__))
            w.writeheader()
            for r in self.rows:
                w.writerow(r.__dict__)

    def summary(self):
        return {"best": self.best.__dict__, "pr_auc": self.pr_auc}


def score(peaks, gt_dirs, voxels=None, cone_deg=DEFAULT_CONE, threshold=0.0):
    """Aggregate counts over voxels. ``gt_dirs`` lists per-voxel (g, 3) arrays in the same flat order."""
    tp = fp = fn = 0
    angles = []
    idx = range(len(peaks.directions)) if voxels is None else voxels
    for i in idx:
        d, v = peaks.directions[i], peaks.volumes[i]
        m = match_peaks(d[v >= threshold], gt_dirs[i], cone_deg)
        tp += m.tp
        fp += m.fp
        fn += m.fn
        angles.extend(m.angles.tolist())
    n_gt = tp + fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / n_gt if n_gt else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MatchRow(
        threshold=float(threshold), tp=tp, fp=fp, fn=fn,
        angular_error=float(np.mean(angles)) if angles else float("nan"),
        fpr=fp / n_gt if n_gt else 0.0,
        fnr=fn / n_gt if n_gt else 0.0,
        precision=precision, recall=recall, f1=f1,
    )


def sweep_thresholds(peaks, gt_dirs, voxels=None, cone_deg=DEFAULT_CONE, thresholds=THRESHOLDS):
    rows = [score(peaks, gt_dirs, voxels, cone_deg, t) for t in thresholds]
    best = max(rows, key=lambda r: (r.f1, -r.threshold))
    pts = sorted((r.recall, r.precision) for r in rows)
    rec = np.array([p[0] for p in pts])
    prec = np.array([p[1] for p in pts])
    auc = float(np.sum(np.diff(rec) * (prec[1:] + prec[:-1]) / 2.0)) if len(pts) > 1 else 0.0
    return MatchReport(rows=rows, best=best, pr_auc=auc)


def gt_directions(fibers):
    """Per-voxel ground-truth direction arrays, flat C order."""
    return [fibers.voxel_fibers(idx)[0] for idx in np.ndindex(fibers.dims)]


def region_voxels(fibers, label):
    return np.flatnonzero((fibers.labels == label).ravel())


# ---------------------------------------------------------------------------
# least-squares deconvolution oracle


def ls_deconvolve(dwi, rf, hemi, l_max=None):
    """Unconstrained per-voxel least-squares SH deconvolution.

    Unknowns are tissue-0 fODF coefficients up to ``l_max`` plus the degree-0
    coefficient of every further tissue. Returns tissue-0 values on ``hemi``
    (X, Y, Z, V+).
    """
    bvals, bvecs = dwi.bvals, dwi.bvecs
    dirs = np.where(np.linalg.norm(bvecs, axis=1, keepdims=True) > 0.5, bvecs, [0.0, 0.0, 1.0])
    if l_max is None:
        n_dw = int((bvals > 50).sum())
        l_max = 0
        while (l_max // 2 + 2) * (l_max + 3) + rf.n_tissues - 1 <= n_dw + 1:
            l_max += 2
    Y = sh_matrix(dirs, l_max).values
    cols = []
    for t in range(rf.n_tissues):
        A = np.zeros_like(Y)
        for b, idx in shell_groups(bvals):
            A[idx] = Y[idx] * rf_scaling(rf, b, l_max)[t]
        cols.append(A if t == 0 else A[:, :1])
    design = np.concatenate(cols, axis=1)
    s = dwi.normalized().reshape(-1, dwi.n_samples).T
    coef, *_ = np.linalg.lstsq(design, s, rcond=None)
    nc = Y.shape[1]
    f0 = coef[:nc].T
    vals = f0 @ sh_matrix(hemi.vertices, l_max).values.T
    return vals.reshape(dwi.dims + (hemi.count,))


# ---------------------------------------------------------------------------
# equivariance harness


def lattice_rotations():
    """The 24 proper rotations of the cubic lattice as signed permutation matrices."""
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            M = np.zeros((3, 3))
            for i in range(3):
                M[i, perm[i]] = signs[i]
            if np.linalg.det(M) > 0:
                mats.append(M)
    return mats


def _check_lattice(T):
    T = np.asarray(T, dtype=np.float64)
    ok = T.shape == (3, 3) and np.allclose(np.abs(T).sum(0), 1) and np.allclose(np.abs(T).sum(1), 1)
    ok = ok and np.allclose(np.abs(T), np.round(np.abs(T))) and np.isclose(np.linalg.det(T), 1.0)
    if not ok:
        raise ValueError("grid rotation must be one of the 24 proper lattice rotations")
    return np.round(T).astype(int)


def rotate_lattice(x, T):
    """Move the voxel at centred position ``p`` to ``T p``; spatial axes are -4, -3, -2."""
    T = _check_lattice(T)
    perm = [int(np.flatnonzero(T[i])[0]) for i in range(3)]
    signs = [int(T[i, perm[i]]) for i in range(3)]
    lead = x.ndim - 4
    axes = list(range(lead)) + [lead + p for p in perm] + [x.ndim - 1]
    y = np.transpose(x, axes)
    for i, s in enumerate(signs):
        if s < 0:
            y = np.flip(y, axis=lead + i)
    return np.ascontiguousarray(y)


def random_rotation(rng):
    return Rotation.random(random_state=rng).as_matrix()


def vertex_permutation(R, hemi, tol=1e-9):
    """Index map ``perm`` with ``(R f)[i] = f[perm[i]]`` if ``R`` maps V+ onto itself modulo antipodes."""
    src = hemi.vertices @ R  # rows are R^T v_i
    dist, idx = cKDTree(hemi.parent.vertices).query(src)
    if np.any(dist > tol):
        return None
    return hemi.fold_map[idx]


class SphereRotator:
    """Per-voxel rotation ``f -> f(R^T p)`` of signals sampled on a hemisphere grid."""

    def __init__(self, hemi, l_max):
        self.hemi = hemi
        self.l_max = l_max
        Y = sh_matrix(hemi.vertices, l_max)
        try:
            self.fit = fit_matrix(Y)
        except IllConditionedFit:
            self.fit = fit_matrix(Y, reg=1e-6)
        self.Y = Y.values

    def __call__(self, x, R):
        perm = vertex_permutation(R, self.hemi)
        if perm is not None:
            return x[..., perm]
        D = sh_rotation(R, self.l_max)
        op = self.Y @ D @ self.fit  # (V+, V+)
        return x @ op.T


def random_bandlimited_signal(dims=(8, 8, 8), nside=8, l_cap=8, rng=None, channels=1, seed=None):
    """Uniform [0, 1] grid samples per voxel, low-passed to degree ``l_cap``: (C, X, Y, Z, V+)."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    hemi = healpix_hemisphere(nside)
    Y = sh_matrix(hemi.vertices, l_cap)
    proj = Y.values @ fit_matrix(Y)
    raw = rng.uniform(0.0, 1.0, (channels,) + tuple(dims) + (hemi.count,))
    return raw @ proj.T


def equivariance_error(op, f, T, R, hemi, in_rotator=None, out_rotator=None):
    """``||G N(f) - N(G f)||^2 / ||N(f)||^2`` with ``G`` = lattice rotation ``T`` then per-voxel ``R``.

    Returns ``(error, degenerate)``; a zero response gives ``(0.0, True)``.
    """
    in_rot = in_rotator or SphereRotator(hemi, 8)
    out_rot = out_rotator or SphereRotator(hemi, fodf_degree(hemi.count))

    def G(x, rot):
        return rot(rotate_lattice(x, T), R)

    y = op(f)
    denom = float(np.sum(y * y))
    if denom == 0.0:
        return 0.0, True
    diff = G(y, out_rot) - op(G(f, in_rot))
    return float(np.sum(diff * diff) / denom), False


@dataclass
class SuiteResult:
    name: str
    mode: str
    errors: np.ndarray

    def summary(self):
        e = self.errors
        return {
            "op": self.name, "mode": self.mode, "trials": int(e.size),
            "median": float(np.median(e)), "mean": float(np.mean(e)),
            "p95": float(np.percentile(e, 95)),
        }


def run_equivariance_suite(op_factories, n_trials=1000, seed=0, nside=8, dims=(8, 8, 8),
                           modes=("voxel", "grid"), channels=1, exact_grid_only=False):
    """Equivariance errors for freshly initialized ops over random trials.

    ``op_factories`` maps a name to ``factory(rng) -> op`` where ``op`` takes
    and returns arrays (C, X, Y, Z, V+). In mode ``voxel`` the transform is a
    random per-voxel sphere rotation; in mode ``grid`` it is a random lattice
    rotation whose spherical content is carried along by the same rotation.
    ``exact_grid_only`` restricts grid mode to lattice rotations that map the
    sampling onto itself.
    """
    hemi = healpix_hemisphere(nside)
    in_rot = SphereRotator(hemi, 8)
    out_rot = SphereRotator(hemi, fodf_degree(hemi.count))
    lattice = lattice_rotations()
    if exact_grid_only:
        lattice = [T for T in lattice if vertex_permutation(T, hemi) is not None]
    results = []
    for mode in modes:
        errs = {name: [] for name in op_factories}
        for trial in range(n_trials):
            rng = np.random.default_rng([seed, trial, 0 if mode == "voxel" else 1])
            f = random_bandlimited_signal(dims, nside, 8, rng=rng, channels=channels)
            if mode == "voxel":
                T, R = np.eye(3), random_rotation(rng)
            else:
                T = lattice[rng.integers(len(lattice))]
                R = T
            for name, factory in op_factories.items():
                op = factory(np.random.default_rng([seed, trial, 2, len(errs[name])]))
                e, _ = equivariance_error(op, f, T, R, hemi, in_rot, out_rot)
                errs[name].append(e)
        results += [SuiteResult(name, mode, np.array(v)) for name, v in errs.items()]
    return results


def write_suite_reports(results, csv_path=None, json_path=None):
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["op", "mode", "trial", "error"])
            for r in results:
                for i, e in enumerate(r.errors):
                    w.writerow([r.name, r.mode, i, repr(float(e))])
    summary = [r.summary() for r in results]
    if json_path:
        with open(json_path, "w") as fh:
            json.dump(summary, fh, indent=2)
    return summary


# reference ops ---------------------------------------------------------------


def hemi_conv_op(stack, c_in=1, c_out=4, K=None):
    """Factory for a randomly weighted spatio-hemispherical convolution."""
    from .layers import hemi_conv_forward

    mats = [m.astype(np.float64) for m in stack.matrices]
    K = K or stack.K

    def factory(rng):
        w = rng.standard_normal((c_out, c_in, K, 4)) / np.sqrt(c_in * K * 4)
        return lambda x: hemi_conv_forward(x[None], w, None, mats[:K])[0]

    return factory


def spatial_sh_op(hemi, l_max=8, c_in=1, c_out=1):
    """Non-equivariant reference: full 3x3x3 convolution over SH-coefficient channels."""
    Y = sh_matrix(hemi.vertices, l_max)
    fit = fit_matrix(Y)
    nc = Y.n_coeffs

    def factory(rng):
        w = rng.standard_normal((3, 3, 3, c_out * nc, c_in * nc)) / np.sqrt(27 * c_in * nc)

        def op(x):
            C, X, Yd, Z, V = x.shape
            coef = (x @ fit.T)  # (C, X, Y, Z, nc)
            coef = np.moveaxis(coef, 0, -2).reshape(X, Yd, Z, C * nc)
            pad = np.pad(coef, ((1, 1), (1, 1), (1, 1), (0, 0)))
            out = np.zeros((X, Yd, Z, c_out * nc))
            for i, j, k in itertools.product(range(3), repeat=3):
                out += pad[i:i + X, j:j + Yd, k:k + Z] @ w[i, j, k].T
            out = np.moveaxis(out.reshape(X, Yd, Z, c_out, nc), 3, 0)
            return out @ Y.values.T

        return op

    return factory


def concat_graph_op(stack, c_in=1, c_out=4, K=None):
    """Non-equivariant reference: the 27 neighbours' signals as channels, then graph filtering."""
    mats = [m.astype(np.float64) for m in stack.matrices]
    K = K or stack.K

    def factory(rng):
        w = rng.standard_normal((c_out, 27 * c_in, K)) / np.sqrt(27 * c_in * K)

        def op(x):
            C, X, Yd, Z, V = x.shape
            pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
            chans = [pad[:, i:i + X, j:j + Yd, k:k + Z] for i, j, k in itertools.product(range(3), repeat=3)]
            feats = np.concatenate(chans, axis=0)  # (27 C, X, Y, Z, V)
            out = np.zeros((c_out, X, Yd, Z, V))
            for k in range(K):
                # mix channels first: the graph filter is linear and acts on the vertex axis only
                out += np.tensordot(w[:, :, k], feats, axes=(1, 0)) @ mats[k]
            return out

        return op

    return factory
