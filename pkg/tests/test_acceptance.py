"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with ``pytest tests/test_acceptance.py -v -s``).

The heavyweight criteria (recall target, speed ratio) run at the scales
fixed below; all randomness is seeded so every figure here is reproducible.
"""

import time

import numpy as np
import pytest

from hybridsearch.data import SynthConfig, generate_synthetic, save_dataset
from hybridsearch.dense import (
    PQCodes,
    adc_scan_float,
    lut16_scan,
    lut16_scan_reference,
    pq_encode,
    quantize_lut,
    rate_distortion_bound,
    train_codebooks,
    whiten_apply,
)
from hybridsearch.harness import (
    METHODS,
    recall_at_h,
    run_benchmark,
    verify_bounds,
)
from hybridsearch.pipeline import (
    HybridIndexConfig,
    build_index,
    save_index,
    search_topk,
    select_topk,
)
from hybridsearch.sparse import (
    CostModelParams,
    build_inverted,
    cache_sort,
    expected_cachelines_unsorted,
    measure_cachelines,
)


def _report(name: str, passed: bool, detail: str) -> None:
    print(f"\n{'PASS' if passed else 'FAIL'} {name}: {detail}", flush=True)
    assert passed, f"{name}: {detail}"


def _batched_truth(ds, qs, h):
    """Exact top-h per query via one dense GEMM block plus sparse dots."""
    dense = ds.dense
    truths = []
    for lo in range(0, qs.n, 200):
        hi = min(qs.n, lo + 200)
        block = (dense @ qs.dense[lo:hi].T).astype(np.float64)
        for c, qi in enumerate(range(lo, hi)):
            s = block[:, c]
            q = qs.point(qi)
            if q.sparse.nnz:
                qvec = np.zeros(ds.d_sparse)
                qvec[q.sparse.dims] = q.sparse.values.astype(np.float64)
                s = s + ds.sparse @ qvec
            truths.append(select_topk(s, h))
    return truths


class TestCriterion1OracleEquivalence:
    def test_exhaustive_search_equals_brute_force(self):
        h = 20
        start = time.perf_counter()
        mismatches = 0
        for seed in range(10):
            ds, qs = generate_synthetic(SynthConfig(
                n=10_000, d_sparse=10_000, d_dense=64, n_queries=3, seed=seed))
            # index quality is irrelevant here: the full dataset is fetched
            idx = build_index(ds, HybridIndexConfig(
                seed=seed, kmeans_iters=5, train_sample=5_000))
            truths = _batched_truth(ds, qs, h)
            for qi in range(qs.n):
                res = search_topk(idx, qs.point(qi), h,
                                  overfetch=ds.n / h, retain=ds.n / h,
                                  exact_final_rerank=True)
                if res.ids.tolist() != truths[qi].tolist():
                    mismatches += 1
        elapsed = time.perf_counter() - start
        _report("criterion 1 (oracle equivalence)",
                mismatches == 0 and elapsed < 120.0,
                f"{mismatches} mismatches over 10 datasets x 3 queries, "
                f"{elapsed:.1f}s (< 120s)")


class TestCriterion2RecallTarget:
    def test_mean_recall_at_defaults(self):
        h = 20
        ds, qs = generate_synthetic(SynthConfig(
            n=100_000, d_sparse=10_000, d_dense=96, n_queries=1_000, seed=0))
        idx = build_index(ds, HybridIndexConfig(seed=0))  # alpha=10, beta=3,
        # top_t=128, subspaces=d_dense/2, 16 centers: the library defaults
        truths = _batched_truth(ds, qs, h)
        recalls = [recall_at_h(search_topk(idx, qs.point(i), h).ids,
                               truths[i], h)
                   for i in range(qs.n)]
        mean = float(np.mean(recalls))
        _report("criterion 2 (recall target)", mean >= 0.90,
                f"mean recall@20 = {mean:.4f} over 1000 queries (>= 0.90)")


class TestCriterion3CacheSortEfficacy:
    def test_line_reduction_and_model_agreement(self):
        B, n = 16, 100_000
        total_unsorted = total_sorted = 0.0
        expected = None
        for seed in range(5):
            cfg = SynthConfig(n=n, d_sparse=10_000, d_dense=0, zipf_alpha=2.0,
                              n_queries=400, seed=seed)
            ds, qs = generate_synthetic(cfg)
            queries = [qs.point(i).sparse for i in range(qs.n)]
            base = build_inverted(ds.sparse, np.arange(n))
            sorted_idx = build_inverted(ds.sparse, cache_sort(ds.sparse))
            total_unsorted += measure_cachelines(base, queries, B)
            total_sorted += measure_cachelines(sorted_idx, queries, B)
            if expected is None:
                params = CostModelParams(P=cfg.activity(), Q=cfg.query_activity(),
                                         n=n, line_capacity=B)
                expected = expected_cachelines_unsorted(params)
        mean_unsorted = total_unsorted / 5
        mean_sorted = total_sorted / 5
        ratio = mean_sorted / mean_unsorted
        rel_err = abs(mean_unsorted - expected) / expected
        _report("criterion 3 (cache-sort efficacy)",
                ratio <= 0.5 and rel_err <= 0.10,
                f"sorted/unsorted = {mean_sorted:.0f}/{mean_unsorted:.0f} "
                f"= {ratio:.3f} (<= 0.5); unsorted vs model "
                f"{expected:.0f}: {rel_err:.1%} (<= 10%)")


class TestCriterion4Lut16Correctness:
    def test_bit_identity_and_quantization_error(self):
        rng = np.random.default_rng(4)
        instances = 0
        worst_excess = -np.inf
        identical = True
        while instances < 100_000:
            K = int(rng.integers(1, 41))
            n = 1_000
            codes = rng.integers(0, 16, size=(n, K), dtype=np.uint8)
            table = rng.normal(size=(K, 16)) * float(rng.uniform(0.1, 5.0))
            qlut = quantize_lut(table)
            packed = PQCodes.from_codes(codes, 16)
            vec = lut16_scan(packed, qlut)
            ref = lut16_scan_reference(codes, qlut)
            identical &= bool(np.array_equal(vec, ref))
            err = np.abs(vec - adc_scan_float(codes, table))
            worst_excess = max(worst_excess,
                               float((err - (K * qlut.scale / 2 + 1e-4)).max()))
            instances += n
        _report("criterion 4 (LUT16 correctness)",
                identical and worst_excess <= 0.0,
                f"bit-identical on {instances} instances; worst error excess "
                f"over K*s/2+1e-4 = {worst_excess:.2e} (<= 0)")


class TestCriterion5RateDistortionFloor:
    def test_kmeans_mse_within_floor_window(self):
        rng = np.random.default_rng(5)
        d, K, n = 32, 16, 50_000
        X = rng.standard_normal((n, d))
        cb = train_codebooks(X, K, n_centers=16, n_iters=25, seed=5)
        recon = cb.reconstruct(pq_encode(X, cb)).astype(np.float64)
        mse = float(np.mean(np.sum((X - recon) ** 2, axis=1)))
        floor = rate_distortion_bound(float(d), K * 4, d)
        ratio = mse / floor
        _report("criterion 5 (rate-distortion floor)",
                floor <= mse <= 2.0 * floor,
                f"MSE {mse:.4f} vs floor {floor:.4f}; ratio {ratio:.3f} "
                f"(in [1, 2])")


class TestCriterion6MonteCarloBounds:
    def test_prop2_dense_error(self):
        rep, = verify_bounds("prop2", trials=10_000, seed=6)
        _report("criterion 6a (dense error bound)", rep.passed, rep.line())

    def test_prop3_prune_error(self):
        rep, = verify_bounds("prop3", trials=10_000, seed=6)
        _report("criterion 6b (prune error bound)", rep.passed, rep.line())

    def test_prop4_gap_recall(self):
        rep, = verify_bounds("prop4", trials=100, seed=6, d_dense=32)
        _report("criterion 6c (gap/recall link)", rep.passed, rep.line())


class TestCriterion7SpeedProperty:
    def test_hybrid_speedup_at_high_recall(self):
        h = 20
        ds, qs = generate_synthetic(SynthConfig(
            n=1_000_000, d_sparse=10_000, d_dense=64, n_queries=8, seed=7))
        truths = _batched_truth(ds, qs, h)

        idx = build_index(ds, HybridIndexConfig(seed=7, overfetch=30.0))
        hybrid_times, recalls = [], []
        for i in range(qs.n):
            q = qs.point(i)
            reps = []
            for _ in range(3):
                t0 = time.perf_counter()
                res = search_topk(idx, q, h)
                reps.append(time.perf_counter() - t0)
            hybrid_times.append(float(np.median(reps)))
            recalls.append(recall_at_h(res.ids, truths[i], h))
        recall = float(np.mean(recalls))

        baseline = METHODS["sparse-inverted-index"]()
        baseline.build(ds, h, 7)
        base_times = []
        exact_ok = True
        for i in range(qs.n):
            q = qs.point(i)
            reps = []
            for _ in range(3):
                t0 = time.perf_counter()
                ids = baseline.query(q)
                reps.append(time.perf_counter() - t0)
            base_times.append(float(np.median(reps)))
            exact_ok &= recall_at_h(ids, truths[i], h) == 1.0
        speedup = float(np.median(base_times) / np.median(hybrid_times))
        _report("criterion 7 (speed property)",
                recall >= 0.90 and speedup >= 3.0 and exact_ok,
                f"hybrid recall@20 = {recall:.4f} (>= 0.90), median "
                f"{np.median(hybrid_times) * 1e3:.1f} ms vs exact inverted "
                f"{np.median(base_times) * 1e3:.1f} ms: {speedup:.1f}x (>= 3x)")


class TestCriterion8ScalarQuantResidual:
    def test_reconstruction_error_exhaustive(self):
        ds, _ = generate_synthetic(SynthConfig(
            n=12_500, d_sparse=500, d_dense=8, n_queries=1, seed=8))
        idx = build_index(ds, HybridIndexConfig(seed=8, train_sample=12_500))
        di = idx.dense_index
        # recompute the residual the store was built from
        white = whiten_apply(di.whitening, ds.dense.astype(np.float64), "data")
        codes = di.codes.unpacked()
        residual = white[idx.order] - di.codebooks.reconstruct(codes)
        values = residual.size
        err = np.abs(di.residual.decode() - residual)
        ranges = residual.max(axis=0) - residual.min(axis=0)
        bound = ranges / 256 + 1e-9
        ok = bool(np.all(err <= bound))
        _report("criterion 8 (scalar-quant residual)",
                ok and values >= 100_000,
                f"max err/bound = {float((err / bound).max()):.3f} over "
                f"{values} stored values (<= 1)")


class TestCriterion9Determinism:
    def test_end_to_end_reproducibility(self, tmp_path):
        blobs = {}
        for run in ("a", "b"):
            cfg = SynthConfig(n=20_000, d_sparse=5_000, d_dense=16,
                              n_queries=50, seed=9)
            ds, qs = generate_synthetic(cfg)
            save_dataset(ds, tmp_path / f"{run}.hybx")
            idx = build_index(ds, HybridIndexConfig(seed=9, train_sample=20_000))
            save_index(idx, tmp_path / f"{run}.hidx")
            ids = np.concatenate([search_topk(idx, qs.point(i), 10).ids
                                  for i in range(5)])
            report = run_benchmark(ds, qs, methods=["hybrid"], h=5, reps=1,
                                   seed=9)
            csv_masked = []
            for line in report.to_csv().splitlines():
                cells = line.split(",")
                if len(cells) >= 11 and cells[0] != "method":
                    cells[7] = cells[8] = cells[10] = "T"
                csv_masked.append(",".join(cells))
            bounds = [rep.line() for rep in
                      verify_bounds("prop3", trials=2_000, seed=9)]
            blobs[run] = (
                (tmp_path / f"{run}.hybx").read_bytes(),
                (tmp_path / f"{run}.hidx").read_bytes(),
                ids.tolist(), csv_masked, bounds,
            )
        same = all(a == b for a, b in zip(blobs["a"], blobs["b"]))
        _report("criterion 9 (determinism)", same,
                "dataset bytes, index bytes, search ids, benchmark CSV "
                "(timing masked) and bound reports identical across runs")
