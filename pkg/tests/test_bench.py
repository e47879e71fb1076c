import csv

import numpy as np
import pytest

from shdeconv.bench import (
    BASELINE,
    CSV_COLUMNS,
    BenchCase,
    OperatorSource,
    ablation_table,
    build_operator,
    correctness_gate,
    make_input,
    make_weights,
    measure_peak_memory,
    operator_bytes,
    run_variant,
    stack_memory_ratio,
    time_variant,
    variant_names,
    write_csv,
)
from shdeconv.graph import chebyshev_iterative


def test_eight_variants_with_baseline():
    names = variant_names()
    assert len(names) == 8 and len(set(names)) == 8
    assert BASELINE == "sphere-sparse-iter" and BASELINE in names


def test_case_validation():
    with pytest.raises(ValueError):
        BenchCase("hemi-dense-fast")
    with pytest.raises(ValueError):
        BenchCase("hemi-dense-iter", reps=2)
    with pytest.raises(ValueError):
        BenchCase("hemi-dense-iter", warmup=0)


def test_baseline_matches_reference_recurrence():
    src = OperatorSource(2)
    case = BenchCase(BASELINE, nside=2, dims=(2, 2, 2), K=4, reps=3)
    f = make_input(src, case)
    a = make_weights(case)
    got = run_variant(build_operator(src, case), f, a, case)
    ref = chebyshev_iterative(src.graph.scaled_laplacian, f.astype(np.float64), 4)
    want = np.einsum("k,...kv->...v", a.astype(np.float64), ref)
    np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-4)


@pytest.mark.parametrize("nside", [1, 2, 4])
def test_correctness_gate_passes_for_every_variant(nside):
    gate = correctness_gate(OperatorSource(nside), nside, dims=(2, 2, 2))
    assert set(gate) == set(variant_names())
    for name, (dev, ok) in gate.items():
        assert ok and dev < 1e-5, name


def test_hemisphere_stack_memory_is_a_quarter():
    hemi, sphere = stack_memory_ratio(4, K=5)
    assert hemi / sphere == pytest.approx(0.25, abs=0.01)


def test_operator_bytes_counts_sparse_parts():
    src = OperatorSource(2)
    dense = build_operator(src, BenchCase("hemi-dense-precomp", nside=2))
    sparse = build_operator(src, BenchCase("hemi-sparse-precomp", nside=2))
    assert operator_bytes(dense) == sum(m.nbytes for m in dense)
    assert operator_bytes(sparse) == sum(m.data.nbytes + m.indices.nbytes + m.indptr.nbytes for m in sparse)


def test_peak_memory_counter_is_calibrated():
    n = 2_000_000
    peak = measure_peak_memory(None, workload=lambda: np.ones(n).sum())
    assert abs(peak - 8 * n) / (8 * n) < 0.05


def test_time_variant_statistics():
    r = time_variant(BenchCase("hemi-dense-precomp", nside=2, dims=(2, 2, 2), reps=5, warmup=1))
    assert r.ok and r.V == 24
    assert r.median_ms > 0 and r.std_ms >= 0 and r.peak_bytes > 0


def test_ablation_table_and_csv(tmp_path):
    results, gates = ablation_table(nsides=(1, 2), dims=(2, 2, 2), reps=3, warmup=1)
    assert len(results) == 16 and set(gates) == {1, 2}
    for r in results:
        if r.variant == BASELINE:
            assert r.pct_of_baseline_time == 100.0 and r.pct_of_baseline_mem == 100.0
    write_csv(results, tmp_path / "a.csv")
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert list(rows[0]) == CSV_COLUMNS and len(rows) == 16


def test_baseline_is_always_included():
    results, _ = ablation_table(nsides=(1,), dims=(2, 2, 2), reps=3, warmup=1, variants=["hemi-dense-iter"])
    assert [r.variant for r in results] == [BASELINE, "hemi-dense-iter"]
