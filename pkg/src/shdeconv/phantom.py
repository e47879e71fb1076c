"""Synthetic spatio-spherical dMRI phantoms with known fibre configurations."""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import eval_legendre

from .deconv import DwiVolume
from .grid import healpix_hemisphere
from .harmonics import ZonalRf

MAX_FIBERS = 10
REGION_TYPES = ("single", "crossing", "triple", "iso")

D_PAR = 1.7e-3
D_PERP = 0.2e-3
D_ISO = 3.0e-3


@dataclass
class FiberConfig:
    """Per-voxel fibre directions and volume fractions.

    ``directions`` is (X, Y, Z, F, 3) and ``fractions`` (X, Y, Z, F) with
    zero fractions for unused slots; ``iso`` holds the isotropic remainder.
    """

    directions: np.ndarray
    fractions: np.ndarray
    labels: np.ndarray  # (X, Y, Z) region names

    def __post_init__(self):
        if self.fractions.shape[-1] > MAX_FIBERS:
            raise ValueError(f"at most {MAX_FIBERS} fibres per voxel")
        if np.any(self.fractions < 0) or np.any(self.fractions.sum(-1) > 1 + 1e-12):
            raise ValueError("fibre fractions must be nonnegative and sum to at most 1")

    @property
    def dims(self):
        return self.fractions.shape[:3]

    @property
    def iso(self):
        return 1.0 - self.fractions.sum(-1)

    def count(self):
        return (self.fractions > 0).sum(-1)

    def voxel_fibers(self, index):
        f = self.fractions[index]
        keep = f > 0
        return self.directions[index][keep], f[keep]

    def to_json(self):
        voxels = []
        for idx in np.ndindex(self.dims):
            dirs, fr = self.voxel_fibers(idx)
            voxels.append({
                "index": list(idx),
                "region": str(self.labels[idx]),
                "fibers": [{"direction": d.tolist(), "fraction": float(f)} for d, f in zip(dirs, fr)],
                "iso": float(self.iso[idx]),
            })
        return {"dims": list(self.dims), "voxels": voxels}

    @classmethod
    def from_json(cls, doc):
        dims = tuple(doc["dims"])
        nf = max([len(v["fibers"]) for v in doc["voxels"]] + [1])
        dirs = np.zeros(dims + (nf, 3))
        fr = np.zeros(dims + (nf,))
        labels = np.empty(dims, dtype=object)
        for v in doc["voxels"]:
            idx = tuple(v["index"])
            labels[idx] = v["region"]
            for i, fib in enumerate(v["fibers"]):
                dirs[idx + (i,)] = fib["direction"]
                fr[idx + (i,)] = fib["fraction"]
        return cls(directions=dirs, fractions=fr, labels=labels)


@dataclass
class PhantomSpec:
    dims: tuple = (16, 16, 16)
    nside: int = 4
    shells: tuple = ((1000.0, 29),)
    n_b0: int = 1
    crossing_angles: tuple = (90.0,)
    snr: float = 30.0
    seed: int = 0
    d_par: float = D_PAR
    d_perp: float = D_PERP
    d_iso: float = D_ISO
    block: int = 4
    fiber_fraction: float = 0.8
    b0_reference: float = 100.0
    direction_mode: str = "grid"
    rf_l_max: int = 8

    def validate(self):
        if not self.snr > 0:
            raise ValueError("SNR must be positive")
        for a in self.crossing_angles:
            if not 0 < a <= 90:
                raise ValueError(f"crossing angle {a} outside (0, 90]")
        if any(d % self.block for d in self.dims):
            raise ValueError(f"dims {self.dims} cannot be tiled by {self.block}^3 regions")
        if self.direction_mode not in ("grid", "random"):
            raise ValueError("direction_mode must be 'grid' or 'random'")
        if not 0 < self.fiber_fraction <= 1:
            raise ValueError("fiber_fraction must be in (0, 1]")
        if not self.d_par >= self.d_perp >= 0:
            raise ValueError("need d_par >= d_perp >= 0")
        return self

    def to_dict(self):
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["shells"] = [list(s) for s in self.shells]
        d["crossing_angles"] = list(self.crossing_angles)
        return d


HIGH_PROTOCOL = ((1000.0, 90), (2000.0, 90), (3000.0, 90), (4000.0, 90))
LOW_PROTOCOL = ((1000.0, 29),)


# ---------------------------------------------------------------------------
# response functions


def zonal_coefficients(profile, l_max, n_nodes=64):
    """Zonal SH coefficients ``r_l`` of an axially symmetric ``profile(cos t)``.

    ``r_l = 2 pi * int_{-1}^{1} profile(x) sqrt((2l+1)/(4 pi)) P_l(x) dx``,
    evaluated with Gauss-Legendre quadrature.
    """
    if n_nodes < 64:
        raise ValueError("use at least 64 quadrature nodes")
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    f = profile(x)
    return np.array([
        2.0 * np.pi * np.sqrt((2 * l + 1) / (4.0 * np.pi)) * np.sum(w * f * eval_legendre(l, x))
        for l in range(0, l_max + 1, 2)
    ])


def analytic_rf(bvals, d_par=D_PAR, d_perp=D_PERP, l_max=8, n_nodes=64, d_iso=None):
    """Zonal response of a cylindrically symmetric tensor, one row per b-value.

    Tissue 0 is the fibre response ``exp(-b (d_perp + (d_par - d_perp) cos^2 t))``;
    with ``d_iso`` a second, isotropic tissue ``exp(-b d_iso)`` is appended.
    """
    if d_par < d_perp or d_perp < 0:
        raise ValueError("need d_par >= d_perp >= 0")
    bvals = np.asarray(sorted(set(float(b) for b in bvals)))
    rows = [[zonal_coefficients(lambda x, b=b: np.exp(-b * (d_perp + (d_par - d_perp) * x * x)), l_max, n_nodes)
             for b in bvals]]
    if d_iso is not None:
        rows.append([zonal_coefficients(lambda x, b=b: np.full_like(x, np.exp(-b * d_iso)), l_max, n_nodes)
                     for b in bvals])
    return ZonalRf(bvals=bvals, coeffs=np.array(rows))


def fiber_signal(bvals, bvecs, direction, d_par=D_PAR, d_perp=D_PERP):
    c = np.asarray(bvecs) @ np.asarray(direction)
    return np.exp(-np.asarray(bvals) * (d_perp + (d_par - d_perp) * c * c))


# ---------------------------------------------------------------------------
# direction sets


def electrostatic_directions(n, seed=0, iters=400, step=0.05):
    """``n`` antipodally symmetric repulsion directions (upper hemisphere representatives).

    Each point repels both the others and their antipodes, so the set of
    ``2n`` points ``+-p`` is spread uniformly over the sphere.
    """
    rng = np.random.default_rng(seed)
    p = rng.standard_normal((n, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    if n == 1:
        return np.array([[0.0, 0.0, 1.0]])
    eye = np.eye(n, dtype=bool)
    for _ in range(iters):
        force = np.zeros_like(p)
        for sgn in (1.0, -1.0):
            diff = p[:, None, :] - sgn * p[None, :, :]
            dist = np.linalg.norm(diff, axis=-1)
            if sgn > 0:
                dist[eye] = np.inf
            force += (diff / dist[..., None] ** 3).sum(axis=1)
        # move along the tangential component only
        force -= (force * p).sum(1, keepdims=True) * p
        scale = step / max(np.abs(force).max(), 1e-12)
        p = p + scale * force
        p /= np.linalg.norm(p, axis=1, keepdims=True)
    p[p[:, 2] < 0] *= -1
    return p


def gradient_table(shells, n_b0=1, seed=0):
    """b-values and unit directions for ``n_b0`` b0 samples plus the given shells."""
    bvals = [np.zeros(n_b0)]
    bvecs = [np.tile([0.0, 0.0, 1.0], (n_b0, 1))]
    for i, (b, n) in enumerate(shells):
        bvals.append(np.full(int(n), float(b)))
        bvecs.append(electrostatic_directions(int(n), seed=seed + 1 + i))
    return np.concatenate(bvals), np.concatenate(bvecs)


# ---------------------------------------------------------------------------
# layout


def _fold_angle(u, v):
    return np.degrees(np.arccos(np.clip(np.abs(u @ v), 0.0, 1.0)))


def _direction_pool(spec, rng):
    if spec.direction_mode == "grid":
        return healpix_hemisphere(spec.nside).vertices
    return electrostatic_directions(64, seed=spec.seed + 1000)


def _pairs_at(pool, angle, tol=0.5):
    ang = np.degrees(np.arccos(np.clip(np.abs(pool @ pool.T), 0.0, 1.0)))
    i, j = np.nonzero(np.triu(np.abs(ang - angle) <= tol, 1))
    return np.column_stack([i, j])


def _random_pair(rng, angle, pool):
    """Two unit vectors exactly ``angle`` degrees apart."""
    u = pool[rng.integers(len(pool))]
    a = rng.standard_normal(3)
    a -= (a @ u) * u
    a /= np.linalg.norm(a)
    t = np.radians(angle)
    return u, np.cos(t) * u + np.sin(t) * a


def _layout(spec, rng):
    """Region labels and fibre lists per block of ``block^3`` voxels."""
    pool = _direction_pool(spec, rng)
    kinds = ["single"] + [f"crossing{a:g}" for a in spec.crossing_angles] + ["triple", "iso"]
    pairs = {}
    if spec.direction_mode == "grid":
        for a in spec.crossing_angles:
            pairs[a] = _pairs_at(pool, a)
            if len(pairs[a]) == 0:
                raise ValueError(f"no grid vertex pair at {a} degrees for nside={spec.nside}; "
                                 "use direction_mode='random'")
    nb = tuple(d // spec.block for d in spec.dims)
    blocks = {}
    order = list(np.ndindex(nb))
    for n, b in enumerate(order):
        kind = kinds[n % len(kinds)]
        total = spec.fiber_fraction
        if kind == "single":
            fibers = [(pool[rng.integers(len(pool))], total)]
        elif kind.startswith("crossing"):
            a = float(kind[len("crossing"):])
            if spec.direction_mode == "grid":
                i, j = pairs[a][rng.integers(len(pairs[a]))]
                u, v = pool[i], pool[j]
            else:
                u, v = _random_pair(rng, a, pool)
            fibers = [(u, total / 2), (v, total / 2)]
        elif kind == "triple":
            fibers = []
            while len(fibers) < 3:
                c = pool[rng.integers(len(pool))]
                if all(_fold_angle(c, f[0]) >= 50.0 for f in fibers):
                    fibers.append((c, None))
            w = np.array([0.375, 0.375, 0.25]) * total
            fibers = [(d, wi) for (d, _), wi in zip(fibers, w)]
        else:
            fibers = []
        blocks[b] = (kind, fibers)
    return blocks


def make_fibers(spec, rng=None):
    spec.validate()
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    blocks = _layout(spec, rng)
    nf = max(max((len(f) for _, f in blocks.values()), default=0), 1)
    dims = tuple(spec.dims)
    dirs = np.zeros(dims + (nf, 3))
    fr = np.zeros(dims + (nf,))
    labels = np.empty(dims, dtype=object)
    s = spec.block
    for (bi, bj, bk), (kind, fibers) in blocks.items():
        sl = (slice(bi * s, bi * s + s), slice(bj * s, bj * s + s), slice(bk * s, bk * s + s))
        labels[sl] = kind
        for n, (d, f) in enumerate(fibers):
            dirs[sl + (n,)] = d
            fr[sl + (n,)] = f
    return FiberConfig(directions=dirs, fractions=fr, labels=labels)


def noiseless_signal(fibers, bvals, bvecs, spec):
    """Normalized noiseless signal (X, Y, Z, N) for a fibre configuration."""
    bvals = np.asarray(bvals, dtype=np.float64)
    c = np.einsum("xyzfk,nk->xyzfn", fibers.directions, bvecs)
    att = np.exp(-bvals * (spec.d_perp + (spec.d_par - spec.d_perp) * c * c))
    sig = np.einsum("xyzf,xyzfn->xyzn", fibers.fractions, att)
    sig += fibers.iso[..., None] * np.exp(-bvals * spec.d_iso)
    return sig


def rician(signal, sigma, seed, shape_prefix):
    """Magnitude of the signal plus complex Gaussian noise, one counter-keyed stream per voxel."""
    out = np.empty_like(signal)
    for n, idx in enumerate(np.ndindex(shape_prefix)):
        rng = np.random.default_rng([seed, n])
        re = signal[idx] + sigma * rng.standard_normal(signal.shape[-1])
        im = sigma * rng.standard_normal(signal.shape[-1])
        out[idx] = np.hypot(re, im)
    return out


def make_phantom(spec):
    """Return ``(DwiVolume, FiberConfig)``; signals scaled by ``spec.b0_reference``."""
    spec.validate()
    fibers = make_fibers(spec)
    bvals, bvecs = gradient_table(spec.shells, spec.n_b0, seed=spec.seed)
    clean = noiseless_signal(fibers, bvals, bvecs, spec) * spec.b0_reference
    if np.isfinite(spec.snr):
        noisy = rician(clean, spec.b0_reference / spec.snr, spec.seed + 7919, spec.dims)
    else:
        noisy = clean
    dwi = DwiVolume(noisy.astype(np.float32), bvals, bvecs, mask=None, b0_reference=spec.b0_reference)
    return dwi, fibers


def phantom_rf(spec, l_max=None):
    """Two-tissue (fibre, isotropic) zonal response matching the phantom's signal model."""
    bvals = [0.0] + [b for b, _ in spec.shells]
    return analytic_rf(bvals, spec.d_par, spec.d_perp, l_max or spec.rf_l_max, d_iso=spec.d_iso)


def gt_fodf(fibers, hemi, kernel_deg=15.0):
    """Fraction-weighted uniform caps of half-angle ``kernel_deg`` around each fibre.

    Each cap pair (+-u) is normalized to unit integral under the uniform
    quadrature ``4 pi / V`` of the full sphere. Returns (X, Y, Z, V+).
    """
    if not 0 < kernel_deg <= 45:
        raise ValueError("kernel_deg must be in (0, 45]")
    v = hemi.vertices
    cos_k = np.cos(np.radians(kernel_deg))
    dots = np.abs(np.einsum("xyzfk,vk->xyzfv", fibers.directions, v))
    caps = (dots >= cos_k - 1e-12).astype(np.float64)
    # hemisphere counts double on the full sphere
    area = 2.0 * caps.sum(-1, keepdims=True) * (4.0 * np.pi / (2 * hemi.count))
    caps = np.where(area > 0, caps / np.where(area > 0, area, 1.0), 0.0)
    return np.einsum("xyzf,xyzfv->xyzv", fibers.fractions, caps)


# ---------------------------------------------------------------------------
# files


def save_phantom(dwi, fibers, spec, directory):
    from .deconv import save_dwi

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_dwi(dwi, d, phantom=spec.to_dict())
    (d / "gt.json").write_text(json.dumps(fibers.to_json()))
    return d


def load_ground_truth(path):
    return FiberConfig.from_json(json.loads(Path(path).read_text()))
