"""Wall-time and peak-allocation benchmarks of the graph-convolution variants.

Variants cross three choices: full sphere or folded hemisphere, dense or CSR
sparse matrices, and precomputed Chebyshev polynomials or the on-the-fly
recurrence. The baseline is sphere x sparse x iterative.
"""
import csv
import gc
import itertools
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .graph import DEFAULT_K_NEIGHBORS, build_graph, chebyshev_stack, hemispherical_laplacian
from .grid import healpix_sphere, hemisphere_restrict

DOMAINS = ("sphere", "hemi")
STORAGE = ("dense", "sparse")
METHODS = ("precomp", "iter")
BASELINE = "sphere-sparse-iter"
CSV_COLUMNS = ["variant", "nside", "V", "median_ms", "mean_ms", "std_ms", "peak_bytes",
               "pct_of_baseline_time", "pct_of_baseline_mem"]


def variant_names():
    return ["-".join(v) for v in itertools.product(DOMAINS, STORAGE, METHODS)]


@dataclass
class BenchCase:
    variant: str
    nside: int = 8
    dims: tuple = (8, 8, 8)
    K: int = 5
    reps: int = 50
    warmup: int = 5
    k_neighbors: int | None = DEFAULT_K_NEIGHBORS
    seed: int = 0

    def __post_init__(self):
        if self.variant not in variant_names():
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.reps < 3:
            raise ValueError("need at least 3 repetitions")
        if self.warmup < 1:
            raise ValueError("need at least 1 warmup run")

    @property
    def parts(self):
        return self.variant.split("-")


@dataclass
class BenchResult:
    variant: str
    nside: int
    V: int
    median_ms: float
    mean_ms: float
    std_ms: float
    peak_bytes: int
    operator_bytes: int
    pct_of_baseline_time: float = float("nan")
    pct_of_baseline_mem: float = float("nan")
    ok: bool = True
    error: str = ""

    def row(self):
        return {c: getattr(self, c) for c in CSV_COLUMNS}


class OperatorSource:
    """Double-precision rescaled Laplacians for one resolution, shared by all variants."""

    def __init__(self, nside, k_neighbors=DEFAULT_K_NEIGHBORS):
        sphere = healpix_sphere(nside)
        self.hemi = hemisphere_restrict(sphere)
        self.graph = build_graph(sphere, k_neighbors=k_neighbors)
        self.hop = hemispherical_laplacian(self.graph, self.hemi)

    def scaled(self, domain):
        return self.graph.scaled_laplacian if domain == "sphere" else self.hop.scaled_laplacian_plus


def build_operator(source, case):
    """Materialize the matrices a variant needs in its storage format."""
    domain, storage, method = case.parts
    L = source.scaled(domain)
    if method == "precomp":
        mats = list(chebyshev_stack(L, case.K).matrices)
    else:
        mats = [np.asarray(L, dtype=np.float32)]
    if storage == "sparse":
        mats = [sp.csr_matrix(m) for m in mats]
    return mats


def operator_bytes(mats):
    total = 0
    for m in mats:
        if sp.issparse(m):
            total += m.data.nbytes + m.indices.nbytes + m.indptr.nbytes
        else:
            total += m.nbytes
    return total


def make_input(source, case):
    """Random antipodally symmetric signals, (voxels, V) on the case's domain."""
    rng = np.random.default_rng(case.seed)
    n_vox = int(np.prod(case.dims))
    half = rng.standard_normal((n_vox, source.hemi.count)).astype(np.float32)
    return half if case.parts[0] == "hemi" else np.ascontiguousarray(source.hemi.unfold(half))


def make_weights(case):
    return np.random.default_rng(case.seed + 1).standard_normal(case.K).astype(np.float32)


def run_variant(mats, f, alpha, case):
    """``sum_k alpha_k T^k f`` for every voxel row of ``f``."""
    _, storage, method = case.parts
    dense = storage == "dense"
    if method == "precomp":
        if dense:
            out = alpha[0] * f
            for a, T in zip(alpha[1:], mats[1:]):
                out += a * (f @ T)
            return out
        ft = f.T
        out = alpha[0] * ft
        for a, T in zip(alpha[1:], mats[1:]):
            out += a * (T @ ft)
        return out.T
    L = mats[0]
    x0 = f if dense else f.T
    out = alpha[0] * x0
    if case.K == 1:
        return out if dense else out.T
    x1 = x0 @ L if dense else L @ x0
    out += alpha[1] * x1
    for k in range(2, case.K):
        x2 = 2.0 * (x1 @ L if dense else L @ x1) - x0
        out += alpha[k] * x2
        x0, x1 = x1, x2
    return out if dense else out.T


def time_variant(case, source=None):
    source = source or OperatorSource(case.nside, case.k_neighbors)
    V = source.hemi.count if case.parts[0] == "hemi" else source.hemi.parent.count
    try:
        mats = build_operator(source, case)
        f = make_input(source, case)
        alpha = make_weights(case)
        for _ in range(case.warmup):
            run_variant(mats, f, alpha, case)
        times = []
        for _ in range(case.reps):
            t0 = time.perf_counter_ns()
            run_variant(mats, f, alpha, case)
            times.append((time.perf_counter_ns() - t0) / 1e6)
        peak = measure_peak_memory(case, source)
    except MemoryError as exc:
        return BenchResult(case.variant, case.nside, V, np.nan, np.nan, np.nan, 0, 0, ok=False, error=str(exc))
    t = np.array(times)
    return BenchResult(case.variant, case.nside, V, float(np.median(t)), float(t.mean()), float(t.std()),
                       peak, operator_bytes(mats))


def measure_peak_memory(case, source=None, workload=None):
    """Peak traced bytes while materializing the operator and running one forward.

    With ``workload`` given, it is called instead (for calibrating the counter).
    """
    source = source if source is not None or workload is not None else OperatorSource(case.nside, case.k_neighbors)
    gc.collect()
    tracemalloc.start()
    try:
        base, _ = tracemalloc.get_traced_memory()
        tracemalloc.reset_peak()
        if workload is not None:
            workload()
        else:
            mats = build_operator(source, case)
            f = make_input(source, case)
            out = run_variant(mats, f, make_weights(case), case)
            del mats, f, out
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return max(int(peak - base), 0)


def variant_outputs(source, nside, dims=(8, 8, 8), K=5, seed=0):
    """Every variant's output mapped to the hemisphere (voxels, V+), for the correctness gate."""
    outs = {}
    for name in variant_names():
        case = BenchCase(name, nside=nside, dims=dims, K=K, reps=3, warmup=1, seed=seed)
        y = run_variant(build_operator(source, case), make_input(source, case), make_weights(case), case)
        outs[name] = y if case.parts[0] == "hemi" else y[:, source.hemi.kept_indices]
    return outs


def correctness_gate(source, nside, dims=(8, 8, 8), K=5, tol=1e-4):
    """Max abs deviation of each variant from the baseline output; ``ok`` when below ``tol``."""
    outs = variant_outputs(source, nside, dims, K)
    ref = outs[BASELINE]
    scale = max(float(np.abs(ref).max()), 1.0)
    return {name: (float(np.abs(y - ref).max()), float(np.abs(y - ref).max()) < tol * scale)
            for name, y in outs.items()}


def ablation_table(nsides=(1, 2, 4, 8), dims=(8, 8, 8), K=5, reps=50, warmup=5,
                   k_neighbors=DEFAULT_K_NEIGHBORS, variants=None):
    """Time every variant at every resolution; percentages are relative to the baseline."""
    variants = variants or variant_names()
    if BASELINE not in variants:
        variants = [BASELINE] + list(variants)
    results, gates = [], {}
    for nside in nsides:
        source = OperatorSource(nside, k_neighbors)
        gate = correctness_gate(source, nside, dims, K)
        gates[nside] = gate
        rows = []
        for name in variants:
            if not gate[name][1]:
                rows.append(BenchResult(name, nside, 0, np.nan, np.nan, np.nan, 0, 0, ok=False,
                                        error=f"output deviates by {gate[name][0]:.3g}"))
                continue
            rows.append(time_variant(BenchCase(name, nside, dims, K, reps, warmup, k_neighbors), source))
        base = next(r for r in rows if r.variant == BASELINE)
        for r in rows:
            if r.ok and base.ok:
                r.pct_of_baseline_time = 100.0 * r.median_ms / base.median_ms
                r.pct_of_baseline_mem = 100.0 * r.peak_bytes / base.peak_bytes if base.peak_bytes else np.nan
        # the baseline is 100 by definition, not up to division round-off
        if base.ok:
            base.pct_of_baseline_time = base.pct_of_baseline_mem = 100.0
        results += rows
    return results, gates


def write_csv(results, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in results:
            w.writerow(r.row())


def stack_memory_ratio(nside, K=5, k_neighbors=DEFAULT_K_NEIGHBORS):
    """(hemi bytes, sphere bytes) for the dense rescaled Laplacian plus its Chebyshev stack."""
    source = OperatorSource(nside, k_neighbors)
    sizes = {}
    for domain in DOMAINS:
        L = np.asarray(source.scaled(domain), dtype=np.float32)
        stack = chebyshev_stack(source.scaled(domain), K)
        sizes[domain] = L.nbytes + stack.nbytes
    return sizes["hemi"], sizes["sphere"]
