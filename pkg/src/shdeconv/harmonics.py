"""Real even-degree spherical harmonics.

Convention (orthonormal on the unit sphere, no Condon-Shortley phase)::

    Y_l^0        = N_l^0 P_l^0(cos t)
    Y_l^m (m>0)  = sqrt(2) N_l^m P_l^m(cos t) cos(m p)
    Y_l^-m (m>0) = sqrt(2) N_l^m P_l^m(cos t) sin(m p)
    N_l^m        = sqrt((2l+1)/(4 pi) (l-m)!/(l+m)!)

First basis functions, with (x, y, z) a unit vector::

    Y_0^0  = 1 / (2 sqrt(pi))
    Y_2^-2 = sqrt(15/pi) / 2 * x y
    Y_2^-1 = sqrt(15/pi) / 2 * y z
    Y_2^0  = sqrt(5/pi) / 4 * (3 z^2 - 1)
    Y_2^1  = sqrt(15/pi) / 2 * x z
    Y_2^2  = sqrt(15/pi) / 4 * (x^2 - y^2)

Coefficients are ordered by degree l = 0, 2, 4, ... then order m = -l .. l.
"""
from dataclasses import dataclass

import numpy as np
import scipy.linalg

MAX_INTERP_DEGREE = 8
MAX_FODF_DEGREE = 18
UNIT_TOL = 1e-6
B0_THRESHOLD = 50.0


class IllConditionedFit(np.linalg.LinAlgError):
    pass


def n_coeffs(l_max):
    return (l_max // 2 + 1) * (l_max + 1)


def degree_index(l_max):
    """Degree ``l`` of every coefficient slot."""
    return np.concatenate([np.full(2 * l + 1, l) for l in range(0, l_max + 1, 2)])


def order_index(l_max):
    return np.concatenate([np.arange(-l, l + 1) for l in range(0, l_max + 1, 2)])


def _check_l_max(l_max):
    if l_max < 0 or l_max % 2:
        raise ValueError(f"l_max must be a nonnegative even integer, got {l_max}")


def _legendre_normalized(l_max, x):
    """Fully normalised associated Legendre values P[l][m] (no phase), m <= l."""
    x = np.asarray(x, dtype=np.float64)
    s = np.sqrt(np.maximum(1.0 - x * x, 0.0))
    P = [[None] * (l + 1) for l in range(l_max + 1)]
    pmm = np.full_like(x, 1.0 / np.sqrt(4.0 * np.pi))
    for m in range(l_max + 1):
        if m > 0:
            pmm = pmm * np.sqrt((2.0 * m + 1.0) / (2.0 * m)) * s
        P[m][m] = pmm
        if m + 1 <= l_max:
            P[m + 1][m] = np.sqrt(2.0 * m + 3.0) * x * pmm
        for l in range(m + 2, l_max + 1):
            a = np.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = np.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
            P[l][m] = a * (x * P[l - 1][m] - b * P[l - 2][m])
    return P


def sh_basis_all(directions, l_max):
    """Real SH of every degree 0..l_max (odd included), shape (n, (l_max+1)^2)."""
    d = np.asarray(directions, dtype=np.float64)
    P = _legendre_normalized(l_max, d[:, 2])
    phi = np.arctan2(d[:, 1], d[:, 0])
    cols = []
    for l in range(l_max + 1):
        for m in range(-l, l + 1):
            if m == 0:
                cols.append(P[l][0])
            elif m > 0:
                cols.append(np.sqrt(2.0) * P[l][m] * np.cos(m * phi))
            else:
                cols.append(np.sqrt(2.0) * P[l][-m] * np.sin(-m * phi))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class ShMatrix:
    directions: np.ndarray
    l_max: int
    values: np.ndarray

    @property
    def n_coeffs(self):
        return self.values.shape[1]


def sh_matrix(directions, l_max):
    """Even-degree real SH evaluated at unit ``directions``: (n_dirs, n_coeffs)."""
    _check_l_max(l_max)
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    norms = np.linalg.norm(d, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError("directions must be unit vectors")
    full = sh_basis_all(d, l_max)
    keep = np.concatenate(
        [np.arange(l * l, (l + 1) ** 2) for l in range(0, l_max + 1, 2)]
    )
    return ShMatrix(directions=d, l_max=l_max, values=full[:, keep])


def _values(Y):
    return Y.values if isinstance(Y, ShMatrix) else np.asarray(Y)


def fit_matrix(Y, reg=0.0):
    """Linear map (n_coeffs, n_dirs) from samples to least-squares coefficients."""
    Yv = _values(Y)
    n_dirs, nc = Yv.shape
    if reg < 0:
        raise ValueError("reg must be nonnegative")
    if reg == 0 and n_dirs < nc:
        raise IllConditionedFit(
            f"{n_dirs} samples cannot determine {nc} coefficients; use reg > 0 or a lower l_max"
        )
    G = Yv.T @ Yv + reg * np.eye(nc)
    try:
        factor = scipy.linalg.cho_factor(G)
    except np.linalg.LinAlgError:
        factor = None
    if factor is not None:
        diag = np.abs(np.diag(factor[0]))
        if reg == 0 and diag.min() < 1e-7 * diag.max():
            factor = None
    if factor is None:
        raise IllConditionedFit(
            "normal equations are rank deficient; use reg > 0 or a lower l_max"
        )
    return scipy.linalg.cho_solve(factor, Yv.T)


def fit_coeffs(samples, Y, reg=0.0):
    """Solve ``min ||Y c - s||^2 + reg ||c||^2`` for every leading index."""
    samples = np.asarray(samples)
    Yv = _values(Y)
    if samples.shape[-1] != Yv.shape[0]:
        raise ValueError(f"samples have {samples.shape[-1]} directions, basis has {Yv.shape[0]}")
    return samples @ fit_matrix(Yv, reg).T


def synthesize(coeffs, Y):
    coeffs = np.asarray(coeffs)
    Yv = _values(Y)
    if coeffs.shape[-1] != Yv.shape[1]:
        raise ValueError(f"{coeffs.shape[-1]} coefficients given, basis has {Yv.shape[1]}")
    return coeffs @ Yv.T


def max_degree_for(n_samples, cap=MAX_INTERP_DEGREE):
    """Largest even degree whose coefficient count fits in ``n_samples``."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    L = 0
    while L + 2 <= cap and n_coeffs(L + 2) <= n_samples:
        L += 2
    return L


def fodf_degree(n_vertices):
    """fODF degree on a hemisphere of ``n_vertices``: up to 18, limited by the grid."""
    return max_degree_for(n_vertices, cap=MAX_FODF_DEGREE)


# ---------------------------------------------------------------------------
# rotation


def _check_rotation(R):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError("rotation must be 3x3")
    if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-8 or abs(np.linalg.det(R) - 1.0) > 1e-8:
        raise ValueError("matrix is not a proper rotation")
    return R


def _rotation_blocks(R, l_max):
    """Real Wigner blocks for degrees 0..l_max (Ivanic-Ruedenberg recurrence).

    Block ``l`` maps coefficients of f to coefficients of ``f(R^T p)``.
    """
    # degree-1 real harmonics are proportional to (y, z, x)
    perm = [1, 2, 0]
    R1 = R[np.ix_(perm, perm)]
    blocks = [np.ones((1, 1)), R1]

    def P(i, l, a, b, prev):
        ri1, ri0, rim1 = R1[i + 1, 2], R1[i + 1, 1], R1[i + 1, 0]
        if b == -l:
            return ri1 * prev[a + l - 1, 0] + rim1 * prev[a + l - 1, 2 * l - 2]
        if b == l:
            return ri1 * prev[a + l - 1, 2 * l - 2] - rim1 * prev[a + l - 1, 0]
        return ri0 * prev[a + l - 1, b + l - 1]

    for l in range(2, l_max + 1):
        prev = blocks[l - 1]
        M = np.zeros((2 * l + 1, 2 * l + 1))
        for m in range(-l, l + 1):
            for n in range(-l, l + 1):
                d = 1.0 if m == 0 else 0.0
                denom = (l + n) * (l - n) if abs(n) < l else (2 * l) * (2 * l - 1)
                u = np.sqrt((l + m) * (l - m) / denom)
                v = 0.5 * np.sqrt((1 + d) * (l + abs(m) - 1) * (l + abs(m)) / denom) * (1 - 2 * d)
                w = -0.5 * np.sqrt((l - abs(m) - 1) * (l - abs(m)) / denom) * (1 - d)
                val = 0.0
                if u != 0:
                    val += u * P(0, l, m, n, prev)
                if v != 0:
                    if m == 0:
                        V = P(1, l, 1, n, prev) + P(-1, l, -1, n, prev)
                    elif m > 0:
                        d1 = 1.0 if m == 1 else 0.0
                        V = P(1, l, m - 1, n, prev) * np.sqrt(1 + d1) - P(-1, l, -m + 1, n, prev) * (1 - d1)
                    else:
                        d1 = 1.0 if m == -1 else 0.0
                        V = P(1, l, m + 1, n, prev) * (1 - d1) + P(-1, l, -m - 1, n, prev) * np.sqrt(1 + d1)
                    val += v * V
                if w != 0:
                    if m > 0:
                        W = P(1, l, m + 1, n, prev) + P(-1, l, -m - 1, n, prev)
                    else:
                        W = P(1, l, m - 1, n, prev) - P(-1, l, -m + 1, n, prev)
                    val += w * W
                M[m + l, n + l] = val
        blocks.append(M)
    return blocks[: l_max + 1]


def sh_rotation(R, l_max):
    """Block-diagonal matrix rotating even-degree coefficient vectors by ``R``.

    With ``D = sh_rotation(R, L)``, ``synthesize(c @ D.T, Y(dirs))`` equals
    ``synthesize(c, Y(R.T @ dirs))``.
    """
    _check_l_max(l_max)
    R = _check_rotation(R)
    blocks = _rotation_blocks(R, l_max)
    return scipy.linalg.block_diag(*[blocks[l] for l in range(0, l_max + 1, 2)])


# ---------------------------------------------------------------------------
# response functions


@dataclass(frozen=True)
class ZonalRf:
    """Zonal SH coefficients ``r_l`` (even l) per tissue and shell.

    ``coeffs`` has shape (T, B, l_max/2 + 1); ``bvals`` the B shell b-values.
    """

    bvals: np.ndarray
    coeffs: np.ndarray

    @property
    def l_max(self):
        return 2 * (self.coeffs.shape[-1] - 1)

    @property
    def n_tissues(self):
        return self.coeffs.shape[0]

    def shell_index(self, b, tol=B0_THRESHOLD / 2):
        diff = np.abs(np.asarray(self.bvals, dtype=float) - float(b))
        i = int(np.argmin(diff))
        if diff[i] > tol:
            raise ValueError(f"response function has no shell at b={b}")
        return i

    def degree_coeffs(self, shell, l_max):
        """(T, l_max/2+1) zonal coefficients of one shell, zero-padded/truncated."""
        r = self.coeffs[:, self.shell_index(shell)]
        out = np.zeros((r.shape[0], l_max // 2 + 1))
        k = min(out.shape[1], r.shape[1])
        out[:, :k] = r[:, :k]
        return out


def rf_scaling(rf, shell, l_max):
    """(T, n_coeffs) multipliers ``sqrt(2 pi / (2l+1)) r_{l,t}`` per coefficient slot."""
    r = rf.degree_coeffs(shell, l_max)
    deg = degree_index(l_max)
    return np.sqrt(2.0 * np.pi / (2.0 * deg + 1.0))[None, :] * r[:, deg // 2]


def rf_convolve(fodf_coeffs, rf, shell):
    """Signal SH coefficients of one shell from per-tissue fODF coefficients.

    ``fodf_coeffs`` has shape (..., T, n_coeffs);
    ``s_l^m = sum_t sqrt(2 pi / (2l+1)) f_{l,t}^m r_{l,t}``.
    """
    f = np.asarray(fodf_coeffs)
    T, nc = f.shape[-2:]
    if T != rf.n_tissues:
        raise ValueError(f"{T} fODF tissues but response function has {rf.n_tissues}")
    l_max = 2 * (int(round((-3 + np.sqrt(1 + 8 * nc)) / 2)) // 2)
    if n_coeffs(l_max) != nc:
        raise ValueError(f"{nc} is not an even-degree coefficient count")
    return (f * rf_scaling(rf, shell, l_max)).sum(axis=-2)


def save_rf(rf, path):
    with open(path, "w") as fh:
        for t in range(rf.n_tissues):
            for i, b in enumerate(rf.bvals):
                vals = " ".join(f"{v:.17g}" for v in rf.coeffs[t, i])
                fh.write(f"{t} {b:.17g} {vals}\n")


def load_rf(path):
    rows = [line.split() for line in open(path) if line.strip()]
    tissues = sorted({int(r[0]) for r in rows})
    bvals = sorted({float(r[1]) for r in rows})
    n = len(rows[0]) - 2
    coeffs = np.zeros((len(tissues), len(bvals), n))
    for r in rows:
        coeffs[tissues.index(int(r[0])), bvals.index(float(r[1]))] = [float(v) for v in r[2:]]
    return ZonalRf(bvals=np.array(bvals), coeffs=coeffs)


# ---------------------------------------------------------------------------
# shell resampling


def shell_groups(bvals, b0_threshold=B0_THRESHOLD):
    """Group sample indices by shell; b-values within 5% (or below the b0 threshold) merge."""
    bvals = np.asarray(bvals, dtype=np.float64)
    order = np.argsort(bvals, kind="stable")
    groups = []
    for i in order:
        b = bvals[i]
        if groups:
            ref = groups[-1][0]
            same = (b <= b0_threshold and ref <= b0_threshold) or abs(b - ref) <= 0.05 * max(ref, 1.0)
            if same:
                groups[-1][1].append(i)
                continue
        groups.append((b, [i]))
    return [(float(np.mean(bvals[idx])), np.array(sorted(idx))) for _, idx in groups]


def shell_resampling_matrices(bvals, bvecs, target, b0_threshold=B0_THRESHOLD, min_dirs=6):
    """Per shell ``(b, sample_indices, M)`` with ``samples[idx] @ M`` on the target vertices.

    Non-b0 shells are fitted at ``max_degree_for(N_b)`` (<= 8); b0 shells are
    treated as isotropic and averaged.
    """
    bvecs = np.asarray(bvecs, dtype=np.float64)
    tv = target.vertices
    out = []
    for b, idx in shell_groups(bvals, b0_threshold):
        if b <= b0_threshold:
            M = np.full((idx.size, tv.shape[0]), 1.0 / idx.size)
        else:
            if idx.size < min_dirs:
                raise ValueError(f"shell b={b:g} has {idx.size} directions; at least {min_dirs} needed")
            L = max_degree_for(idx.size)
            Y = sh_matrix(bvecs[idx], L)
            try:
                fit = fit_matrix(Y)
            except IllConditionedFit:
                fit = fit_matrix(Y, reg=1e-6)
            M = (sh_matrix(tv, L).values @ fit).T
        out.append((b, idx, M))
    return out


def resample_shells(dwi, target, **kwargs):
    """Interpolate every shell of ``dwi`` onto ``target``: (X, Y, Z, B, V+)."""
    samples = np.asarray(dwi.samples)
    mats = shell_resampling_matrices(dwi.bvals, dwi.bvecs, target, **kwargs)
    out = [samples[..., idx] @ M for _, idx, M in mats]
    return np.stack(out, axis=-2)
