"""HEALPix samplings of the sphere and their hemispherical restriction.

All indexing is the HEALPix *nested* scheme, so the four children of
pixel ``i`` at resolution ``nside`` are pixels ``4i .. 4i+3`` at ``2*nside``.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

ANTIPODE_TOL = 1e-9

# face layout of the base resolution (ring offset / longitude offset per face)
_JRLL = np.array([2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4])
_JPLL = np.array([1, 3, 5, 7, 0, 2, 4, 6, 1, 3, 5, 7])


def _check_nside(nside):
    if isinstance(nside, bool) or int(nside) != nside or nside < 1:
        raise ValueError(f"nside must be a positive power of two, got {nside!r}")
    nside = int(nside)
    if nside & (nside - 1):
        raise ValueError(f"nside must be a positive power of two, got {nside}")
    return nside


def _compact_bits(v):
    """Collect the even-position bits of ``v`` (inverse of bit interleaving)."""
    v = v & 0x5555555555555555
    v = (v | (v >> 1)) & 0x3333333333333333
    v = (v | (v >> 2)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v >> 4)) & 0x00FF00FF00FF00FF
    v = (v | (v >> 8)) & 0x0000FFFF0000FFFF
    v = (v | (v >> 16)) & 0x00000000FFFFFFFF
    return v


def nest2vec(nside, ipix):
    """Unit vectors of nested pixel centres ``ipix`` at resolution ``nside``."""
    nside = _check_nside(nside)
    ipix = np.asarray(ipix, dtype=np.int64)
    npface = nside * nside
    face = ipix // npface
    ipf = ipix % npface
    ix = _compact_bits(ipf)
    iy = _compact_bits(ipf >> 1)

    jr = _JRLL[face] * nside - ix - iy - 1
    nr = np.where(jr < nside, jr, np.where(jr > 3 * nside, 4 * nside - jr, nside))
    north = jr < nside
    south = jr > 3 * nside
    equatorial = ~(north | south)

    z = np.empty(ipix.shape, dtype=np.float64)
    sin_theta = np.empty(ipix.shape, dtype=np.float64)
    # polar caps: z = +-(1 - nr^2 / (3 nside^2)); sin(theta) from the exact factorisation
    tmp = nr[~equatorial].astype(np.float64) ** 2 / (3.0 * npface)
    zc = 1.0 - tmp
    z[~equatorial] = np.where(north[~equatorial], zc, -zc)
    sin_theta[~equatorial] = np.sqrt(tmp * (2.0 - tmp))
    ze = (2 * nside - jr[equatorial]) * 2.0 / (3.0 * nside)
    z[equatorial] = ze
    sin_theta[equatorial] = np.sqrt((1.0 - ze) * (1.0 + ze))

    kshift = np.where(equatorial, (jr - nside) & 1, 0)
    jp = (_JPLL[face] * nr + ix - iy + 1 + kshift) // 2
    jp = np.where(jp > 4 * nside, jp - 4 * nside, jp)
    jp = np.where(jp < 1, jp + 4 * nside, jp)
    phi = (jp - (kshift + 1) * 0.5) * (0.5 * np.pi / nr)

    vec = np.stack([sin_theta * np.cos(phi), sin_theta * np.sin(phi), z], axis=-1)
    # cos/sin of multiples of pi/2 leave ~1e-16 residue; snap so exact symmetries survive
    vec[np.abs(vec) < 1e-14] = 0.0
    return vec


@dataclass(frozen=True)
class SphereSampling:
    nside: int
    vertices: np.ndarray

    @property
    def count(self):
        return self.vertices.shape[0]


@dataclass(frozen=True)
class HemisphereSampling:
    parent: SphereSampling
    kept_indices: np.ndarray
    antipode_map: np.ndarray
    fold_map: np.ndarray

    @property
    def nside(self):
        return self.parent.nside

    @property
    def vertices(self):
        return self.parent.vertices[self.kept_indices]

    @property
    def count(self):
        return self.kept_indices.size

    def fold(self, f):
        """Restrict a full-sphere signal (trailing axis ``V``) to the kept vertices."""
        return np.asarray(f)[..., self.kept_indices]

    def unfold(self, f_plus):
        """Extend a hemisphere signal antipodally back to the full sphere."""
        return np.asarray(f_plus)[..., self.fold_map]


@dataclass(frozen=True)
class Hierarchy:
    levels: list
    child_of: list = field(default_factory=list)


def healpix_sphere(nside):
    """Nested-ordered HEALPix pixel centres, ``12 * nside**2`` unit vectors."""
    nside = _check_nside(nside)
    vertices = nest2vec(nside, np.arange(12 * nside * nside))
    vertices.setflags(write=False)
    return SphereSampling(nside=nside, vertices=vertices)


def antipode_index(s):
    """Permutation ``pi`` with ``vertices[pi[i]] == -vertices[i]``."""
    vertices = s.vertices if isinstance(s, SphereSampling) else np.asarray(s)
    tree = cKDTree(vertices)
    dist, idx = tree.query(-vertices, k=1)
    if np.any(dist >= ANTIPODE_TOL):
        bad = int(np.argmax(dist))
        raise ValueError(
            f"sampling is not antipodally symmetric: vertex {bad} has no antipode "
            f"(nearest at distance {dist[bad]:.3g})"
        )
    idx = idx.astype(np.int64)
    if np.any(idx[idx] != np.arange(idx.size)) or np.any(idx == np.arange(idx.size)):
        raise ValueError("antipode matching is not a fixed-point-free involution")
    return idx


def in_upper_hemisphere(vertices, tol=0.0):
    """Three-stage tie-break: z > 0, else y > 0 on the equator, else x > 0."""
    v = np.asarray(vertices)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    z0 = np.abs(z) <= tol
    y0 = np.abs(y) <= tol
    return (z > tol) | (z0 & (y > tol)) | (z0 & y0 & (x > 0))


def hemisphere_restrict(s):
    antipode = antipode_index(s)
    keep = in_upper_hemisphere(s.vertices)
    if keep.sum() * 2 != s.count or np.any(keep == keep[antipode]):
        raise ValueError("tie-break did not split the sampling into antipodal halves")
    kept = np.flatnonzero(keep)
    position = np.full(s.count, -1, dtype=np.int64)
    position[kept] = np.arange(kept.size)
    fold = np.where(keep, position, position[antipode])
    for arr in (kept, antipode, fold):
        arr.setflags(write=False)
    return HemisphereSampling(parent=s, kept_indices=kept, antipode_map=antipode, fold_map=fold)


def healpix_hemisphere(nside):
    return hemisphere_restrict(healpix_sphere(nside))


def build_hierarchy(nside):
    """Samplings from ``nside`` down to 1 with the nested parent -> children maps.

    ``child_of[i]`` maps pixels of ``levels[i + 1]`` (coarse) to their four
    children in ``levels[i]``.
    """
    nside = _check_nside(nside)
    levels = []
    n = nside
    while n >= 1:
        levels.append(healpix_sphere(n))
        n //= 2
    child_of = []
    for coarse in levels[1:]:
        child_of.append(np.arange(4 * coarse.count, dtype=np.int64).reshape(coarse.count, 4))
    return Hierarchy(levels=levels, child_of=child_of)


def hemisphere_pooling(fine, coarse):
    """Mean-pooling and replication matrices between two hemisphere levels.

    Returns ``(pool, unpool)`` with ``pool`` of shape (V+_fine, V+_coarse) and
    ``unpool`` of shape (V+_coarse, V+_fine), to be right-multiplied onto
    signals whose trailing axis is the vertex axis. Children that fall in the
    discarded hemisphere are read through the fold map.
    """
    if fine.nside != 2 * coarse.nside:
        raise ValueError(f"nside {fine.nside} is not a refinement of {coarse.nside}")
    nf, nc = fine.count, coarse.count
    pool = np.zeros((nf, nc))
    children = 4 * coarse.kept_indices[:, None] + np.arange(4)[None, :]
    for c in range(nc):
        for child in children[c]:
            pool[fine.fold_map[child], c] += 0.25
    unpool = np.zeros((nc, nf))
    parents = coarse.fold_map[fine.kept_indices // 4]
    unpool[parents, np.arange(nf)] = 1.0
    return pool, unpool


def export_vertices(sampling, path):
    """Write one ``x y z`` row per vertex with 17 significant digits."""
    np.savetxt(path, np.asarray(sampling.vertices), fmt="%.17g")


def load_vertices(path):
    return np.loadtxt(path, ndmin=2)


def mean_neighbor_chord(sampling):
    """Mean chord distance from each vertex to its nearest neighbour."""
    v = sampling.vertices if hasattr(sampling, "vertices") else np.asarray(sampling)
    dist, _ = cKDTree(v).query(v, k=2)
    return float(dist[:, 1].mean())
