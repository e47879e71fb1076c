"""Spherical graph Laplacians, hemispherical reduction and Chebyshev filtering."""
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
from scipy.spatial import cKDTree

from .grid import HemisphereSampling, SphereSampling, mean_neighbor_chord

DEFAULT_K_NEIGHBORS = 8
MAX_CHEBYSHEV_ORDER = 16
STACK_MAGIC = b"CHEB"
STACK_VERSION = 1


@dataclass(frozen=True)
class GraphOperator:
    sampling: SphereSampling
    adjacency: np.ndarray
    laplacian: np.ndarray
    scaled_laplacian: np.ndarray
    lambda_max: float
    sigma: float
    k_neighbors: int | None


@dataclass(frozen=True)
class HemiOperator:
    hemi: HemisphereSampling
    laplacian_plus: np.ndarray
    scaled_laplacian_plus: np.ndarray
    source: GraphOperator


@dataclass
class ChebyshevStack:
    """Dense stack ``[T^0(L), ..., T^{K-1}(L)]`` of a rescaled Laplacian."""

    matrices: np.ndarray
    _stacked: np.ndarray = field(default=None, repr=False)
    _sparse: list = field(default=None, repr=False)

    @property
    def K(self):
        return self.matrices.shape[0]

    @property
    def size(self):
        return self.matrices.shape[1]

    @property
    def nbytes(self):
        return self.matrices.nbytes

    def stacked(self):
        """(n, K*n) matrix so that ``f @ stacked`` yields all K filtered maps."""
        if self._stacked is None:
            K, n, _ = self.matrices.shape
            # T^k are symmetric: f . T^k^T == f . T^k
            self._stacked = np.ascontiguousarray(
                self.matrices.transpose(1, 0, 2).reshape(n, K * n)
            )
        return self._stacked

    def sparse(self):
        if self._sparse is None:
            self._sparse = [sps.csr_matrix(m) for m in self.matrices]
        return self._sparse


def default_sigma(sampling):
    return mean_neighbor_chord(sampling)


def build_adjacency(s, k_neighbors=DEFAULT_K_NEIGHBORS, sigma=None, kernel="exp"):
    """Weighted k-nearest-neighbour adjacency on a full sphere sampling.

    Weights are ``exp(-d / sigma)`` on chord distance ``d`` (``kernel="exp"``)
    or ``exp(-d**2 / sigma**2)`` (``kernel="gauss"``). Every vertex whose
    distance ties with the k-th neighbour is included, so the neighbourhood
    depends on distances only and inherits the symmetries of the sampling.
    ``k_neighbors=None`` connects all pairs.
    """
    if isinstance(s, HemisphereSampling):
        raise ValueError(
            "adjacency must be built on the full sphere; fold it with hemispherical_laplacian"
        )
    v = s.vertices if hasattr(s, "vertices") else np.asarray(s, dtype=np.float64)
    n = v.shape[0]
    if sigma is None:
        sigma = default_sigma(v)
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if kernel not in ("exp", "gauss"):
        raise ValueError(f"unknown kernel {kernel!r}")

    dist = np.sqrt(np.maximum(((v[:, None, :] - v[None, :, :]) ** 2).sum(-1), 0.0))
    if k_neighbors is None:
        connect = np.ones((n, n), dtype=bool)
    else:
        if k_neighbors < 1 or k_neighbors >= n:
            raise ValueError(f"k_neighbors must be in [1, {n - 1}], got {k_neighbors}")
        kth, _ = cKDTree(v).query(v, k=k_neighbors + 1)
        radius = kth[:, -1] + 1e-9
        connect = dist <= radius[:, None]
        connect = connect | connect.T
    np.fill_diagonal(connect, False)

    if kernel == "exp":
        w = np.exp(-dist / sigma)
    else:
        w = np.exp(-(dist / sigma) ** 2)
    adjacency = np.where(connect, w, 0.0)
    return 0.5 * (adjacency + adjacency.T)


def normalized_laplacian(A):
    """``I - D^-1/2 A D^-1/2`` for a symmetric nonnegative adjacency."""
    A = np.asarray(A, dtype=np.float64)
    if np.any(A < 0):
        raise ValueError("adjacency must be nonnegative")
    if not np.allclose(A, A.T, atol=1e-12):
        raise ValueError("adjacency must be symmetric")
    degree = A.sum(axis=1)
    if np.any(degree <= 0):
        raise ValueError(f"graph has {int((degree <= 0).sum())} isolated vertices")
    d = 1.0 / np.sqrt(degree)
    L = np.eye(A.shape[0]) - d[:, None] * A * d[None, :]
    return 0.5 * (L + L.T)


def estimate_lambda_max(L, max_iter=200, tol=1e-7, seed=0):
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Returns ``None`` when the iteration does not converge.
    """
    L = np.asarray(L, dtype=np.float64)
    x = np.random.default_rng(seed).standard_normal(L.shape[0])
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = L @ x
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0
        new = float(x @ y)
        x = y / norm
        if abs(new - lam) <= tol * max(abs(new), 1.0):
            return new
        lam = new
    return None


def rescale_spectrum(L, lambda_max=None, **power_kwargs):
    """Map the spectrum of ``L`` into [-1, 1]: ``2 L / lambda_max - I``.

    ``lambda_max`` is estimated by power iteration and inflated by 1 %, or
    falls back to the bound 2 of normalized Laplacians. Returns the rescaled
    matrix and the scale used.
    """
    L = np.asarray(L, dtype=np.float64)
    if lambda_max is None:
        est = estimate_lambda_max(L, **power_kwargs)
        lambda_max = 2.0 if est is None or est <= 0 else min(1.01 * est, 2.0)
    scaled = 2.0 * L / lambda_max - np.eye(L.shape[0])
    return 0.5 * (scaled + scaled.T), float(lambda_max)


def build_graph(sampling, k_neighbors=DEFAULT_K_NEIGHBORS, sigma=None, kernel="exp"):
    if sigma is None:
        sigma = default_sigma(sampling)
    A = build_adjacency(sampling, k_neighbors=k_neighbors, sigma=sigma, kernel=kernel)
    L = normalized_laplacian(A)
    scaled, lam = rescale_spectrum(L)
    return GraphOperator(
        sampling=sampling,
        adjacency=A,
        laplacian=L,
        scaled_laplacian=scaled,
        lambda_max=lam,
        sigma=float(sigma),
        k_neighbors=k_neighbors,
    )


def fold_matrix(M, hemi):
    """``M+(p, q) = M(p, q) + M(p, -q)`` over the kept vertices."""
    kept = hemi.kept_indices
    anti = hemi.antipode_map[kept]
    M = np.asarray(M)
    return M[np.ix_(kept, kept)] + M[np.ix_(kept, anti)]


def hemispherical_laplacian(L, hemi, scaled=None, check_samples=16, seed=0):
    """Reduce a full-sphere operator to the kept hemisphere.

    ``L`` may be a :class:`GraphOperator` (the rescaled operator is folded
    too) or a plain matrix. Raises if ``L(p, q) != L(-p, -q)``.
    """
    source = None
    if isinstance(L, GraphOperator):
        source = L
        scaled = L.scaled_laplacian
        L = L.laplacian
    L = np.asarray(L, dtype=np.float64)
    anti = hemi.antipode_map
    if L.shape != (anti.size, anti.size):
        raise ValueError(f"operator shape {L.shape} does not match sampling of {anti.size}")
    if np.max(np.abs(L[np.ix_(anti, anti)] - L)) > 1e-9:
        raise ValueError("operator is not antipodally symmetric: L(p,q) != L(-p,-q)")
    L_plus = fold_matrix(L, hemi)

    # spot-check the reduction on random symmetric signals
    rng = np.random.default_rng(seed)
    f_plus = rng.standard_normal((hemi.count, check_samples))
    f = f_plus[hemi.fold_map]
    err = np.max(np.abs((L @ f)[hemi.kept_indices] - L_plus @ f_plus))
    if err > 1e-9 * max(1.0, np.abs(L).max() * hemi.count):
        raise ValueError(f"hemispherical reduction check failed (error {err:.3g})")

    scaled_plus = None if scaled is None else fold_matrix(scaled, hemi)
    return HemiOperator(
        hemi=hemi, laplacian_plus=L_plus, scaled_laplacian_plus=scaled_plus, source=source
    )


def chebyshev_stack(scaled, K, max_order=MAX_CHEBYSHEV_ORDER, dtype=np.float32):
    """Precompute ``T^k(scaled)`` for ``k < K`` by the three-term recurrence."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if K > max_order:
        raise ValueError(f"K={K} exceeds the configured limit of {max_order} polynomials")
    if isinstance(scaled, HemiOperator):
        scaled = scaled.scaled_laplacian_plus
    elif isinstance(scaled, GraphOperator):
        scaled = scaled.scaled_laplacian
    Lt = np.asarray(scaled, dtype=np.float64)
    n = Lt.shape[0]
    out = np.empty((K, n, n))
    out[0] = np.eye(n)
    if K > 1:
        out[1] = Lt
    for k in range(2, K):
        out[k] = 2.0 * Lt @ out[k - 1] - out[k - 2]
    return ChebyshevStack(matrices=out.astype(dtype))


def chebyshev_iterative(scaled, f, K, sparse=False):
    """Apply ``T^k(scaled)`` to ``f`` (trailing vertex axis) on the fly.

    Returns ``(..., K, n)`` like :func:`graph_filter`. This is the
    per-input recurrence used when polynomials are not precomputed.
    """
    f = np.asarray(f)
    n = f.shape[-1]
    lead = f.shape[:-1]
    x0 = f.reshape(-1, n).T
    if sparse:
        op = scaled if sps.issparse(scaled) else sps.csr_matrix(scaled)
    else:
        op = np.asarray(scaled, dtype=f.dtype)
    out = np.empty((K,) + x0.shape, dtype=f.dtype)
    out[0] = x0
    if K > 1:
        out[1] = op @ x0
    for k in range(2, K):
        out[k] = 2.0 * (op @ out[k - 1]) - out[k - 2]
    return out.transpose(2, 0, 1).reshape(lead + (K, n))


def graph_filter(stack, f, sparse=False):
    """All K filtered maps of ``f``: output slice ``k`` is ``f @ T^k``.

    ``sparse=True`` routes through CSR matrices; it exists as a reference
    path and gives the same values as the dense default.
    """
    f = np.asarray(f)
    n = stack.size
    if f.shape[-1] != n:
        raise ValueError(f"trailing dimension {f.shape[-1]} does not match operator size {n}")
    lead = f.shape[:-1]
    flat = f.reshape(-1, n)
    if sparse:
        cols = flat.T
        out = np.stack([(m @ cols).T for m in stack.sparse()], axis=1)
    else:
        out = (flat @ stack.stacked().astype(f.dtype, copy=False)).reshape(-1, stack.K, n)
    return out.reshape(lead + (stack.K, n))


def hemi_stack(nside, K, k_neighbors=DEFAULT_K_NEIGHBORS, sigma=None, kernel="exp"):
    """Graph, hemisphere operator and Chebyshev stack for a HEALPix resolution."""
    from .grid import healpix_sphere, hemisphere_restrict

    sphere = healpix_sphere(nside)
    hemi = hemisphere_restrict(sphere)
    op = build_graph(sphere, k_neighbors=k_neighbors, sigma=sigma, kernel=kernel)
    hop = hemispherical_laplacian(op, hemi)
    return hop, chebyshev_stack(hop, K)


def save_stack(stack, path):
    K, n, _ = stack.matrices.shape
    with open(path, "wb") as fh:
        fh.write(STACK_MAGIC)
        fh.write(struct.pack("<III", STACK_VERSION, K, n))
        fh.write(np.ascontiguousarray(stack.matrices, dtype="<f4").tobytes())


def load_stack(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != STACK_MAGIC:
            raise ValueError(f"{path}: not a Chebyshev stack (magic {magic!r})")
        version, K, n = struct.unpack("<III", fh.read(12))
        if version != STACK_VERSION:
            raise ValueError(f"{path}: unsupported stack version {version}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != K * n * n:
        raise ValueError(f"{path}: truncated payload")
    return ChebyshevStack(matrices=data.reshape(K, n, n).astype(np.float32))


def select_sigma(sampling, candidate_sigmas, probe_config=None, return_errors=False):
    """Candidate sigma with the smallest mean equivariance error of a random filter.

    ``probe_config`` keys: ``n_trials``, ``K``, ``k_neighbors``, ``kernel``,
    ``dims``, ``l_cap``, ``seed``. Ties go to the smaller sigma. With
    ``return_errors`` the per-candidate mean errors are returned as well.
    """
    from .evaluation import equivariance_error, random_bandlimited_signal, random_rotation

    candidates = sorted(float(c) for c in candidate_sigmas)
    if not candidates:
        raise ValueError("no candidate sigmas")
    if len(candidates) == 1 and not return_errors:
        return candidates[0]
    cfg = {"n_trials": 4, "K": 5, "k_neighbors": DEFAULT_K_NEIGHBORS, "kernel": "exp",
           "dims": (1, 1, 1), "l_cap": 8, "seed": 0}
    cfg.update(probe_config or {})
    if isinstance(sampling, HemisphereSampling):
        sampling = sampling.parent
    from .grid import hemisphere_restrict

    hemi = hemisphere_restrict(sampling)
    best, best_err = None, np.inf
    table = {}
    for sigma in candidates:
        op = build_graph(sampling, k_neighbors=cfg["k_neighbors"], sigma=sigma, kernel=cfg["kernel"])
        stack = chebyshev_stack(hemispherical_laplacian(op, hemi), cfg["K"], dtype=np.float64)
        rng = np.random.default_rng(cfg["seed"])
        errs = []
        for _ in range(cfg["n_trials"]):
            coef = rng.standard_normal(stack.K)
            f = random_bandlimited_signal(cfg["dims"], sampling.nside, cfg["l_cap"], rng=rng)

            def op_fn(x, coef=coef):
                return np.tensordot(coef, np.moveaxis(graph_filter(stack, x), -2, 0), axes=1)

            errs.append(equivariance_error(op_fn, f, np.eye(3, dtype=int), random_rotation(rng), hemi)[0])
        err = float(np.mean(errs))
        table[sigma] = err
        if err < best_err:
            best, best_err = sigma, err
    return (best, table) if return_errors else best
