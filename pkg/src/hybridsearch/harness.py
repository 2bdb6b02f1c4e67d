"""Oracles, recall/latency benchmarks, Monte-Carlo bound verification, and
ratings-triplet ingestion.

Every benchmark method's recall is computed against :func:`brute_force_topk`,
never against another approximation.  Reports are reproducible from a fixed
seed; wall-clock timings are confined to the timing columns of the CSV.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from sklearn.utils.extmath import randomized_svd

from .data import HybridDataset, HybridVector, SparseVector
from . import dense as dn
from . import sparse as spi
from . import pipeline as pl


def brute_force_topk(dataset: HybridDataset, query: HybridVector, h: int,
                     sparse_weight: float = 1.0, dense_weight: float = 1.0):
    """Exact top-h by hybrid inner product; ties break to the lower id.

    Ground-truth oracle for every recall figure in this module.
    Returns ``(ids, scores)``.
    """
    scores = pl._exact_scores(dataset, query, np.arange(dataset.n),
                              sparse_weight, dense_weight)
    top = pl.select_topk(scores, min(h, dataset.n))
    return top, scores[top]


def recall_at_h(returned_ids, truth_ids, h: int) -> float:
    """|returned ∩ truth| / h."""
    return len(np.intersect1d(np.asarray(returned_ids), np.asarray(truth_ids))) / h


@dataclass
class RatingsMatrix:
    """Dense-packed (user, item, rating) triplets."""

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    n_users: int
    n_items: int
    rating_range: tuple[float, float] = (1.0, 5.0)

    def to_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.ratings, (self.users, self.items)),
            shape=(self.n_users, self.n_items), dtype=np.float32)


def read_triplets(path_or_lines, rating_range=(1.0, 5.0)) -> RatingsMatrix:
    """Parse "user item rating" lines; ids are remapped to dense ranges."""
    if isinstance(path_or_lines, (str, bytes)) or hasattr(path_or_lines, "__fspath__"):
        with open(path_or_lines) as f:
            lines = f.readlines()
    else:
        lines = list(path_or_lines)
    users, items, ratings = [], [], []
    for lineno, line in enumerate(lines, 1):
        parts = line.split()
        if not parts or line.lstrip().startswith("#"):
            continue
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 'user item rating'")
        users.append(int(parts[0]))
        items.append(int(parts[1]))
        ratings.append(float(parts[2]))
    ratings = np.asarray(ratings, dtype=np.float32)
    lo, hi = rating_range
    if len(ratings) and (ratings.min() < lo or ratings.max() > hi):
        raise ValueError(f"rating outside declared range [{lo}, {hi}]")
    u_ids, users = np.unique(np.asarray(users, dtype=np.int64), return_inverse=True)
    i_ids, items = np.unique(np.asarray(items, dtype=np.int64), return_inverse=True)
    return RatingsMatrix(users=users, items=items, ratings=ratings,
                         n_users=len(u_ids), n_items=len(i_ids),
                         rating_range=rating_range)


def svd_embed(ratings: RatingsMatrix, rank: int = 300,
              dense_scale: float | None = None, seed: int = 0,
              n_iter: int = 7) -> HybridDataset:
    """Hybrid embedding of a ratings matrix: raw rows sparse, scaled left
    singular vectors dense.

    Truncated SVD runs by randomized subspace iteration.  ``dense_scale``
    defaults to the value equalizing the mean sparse and dense row norms.
    """
    mat = ratings.to_csr()
    if rank > min(mat.shape):
        raise ValueError(f"rank {rank} exceeds matrix dimensions {mat.shape}")
    if rank == 0:
        return HybridDataset(mat, np.zeros((mat.shape[0], 0), dtype=np.float32))
    U, _, _ = randomized_svd(mat, n_components=rank, n_iter=n_iter,
                             random_state=seed)
    if dense_scale is None:
        sparse_norms = np.sqrt(np.asarray(mat.multiply(mat).sum(axis=1)).ravel())
        u_norms = np.linalg.norm(U, axis=1)
        mean_u = float(u_norms.mean())
        dense_scale = float(sparse_norms.mean()) / mean_u if mean_u > 0 else 1.0
    return HybridDataset(mat, (dense_scale * U).astype(np.float32))


@dataclass
class BoundReport:
    """One Monte-Carlo verification of an analytic guarantee."""

    suite: str
    trials: int
    empirical: float
    bound: float
    slack: float
    passed: bool
    notes: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.suite}: empirical={self.empirical:.4f} "
                f"bound={self.bound:.4f} slack={self.slack:.4f} "
                f"margin={self.empirical - self.bound + self.slack:+.4f} {self.notes}")


def _binomial_slack(frac: float, trials: int) -> float:
    return 2.0 * math.sqrt(max(frac * (1.0 - frac), 1e-12) / trials)


def verify_rate_distortion(trials: int = 1, seed: int = 0, d: int = 32,
                           n_subspaces: int = 16, n_centers: int = 16,
                           n: int = 50_000) -> BoundReport:
    """Measured k-means quantization MSE vs. the Gaussian rate floor.

    Passes when floor <= MSE <= 2x floor; the measured ratio is reported.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    cb = dn.train_codebooks(X, n_subspaces, n_centers=n_centers, seed=seed)
    codes = dn.pq_encode(X, cb)
    recon = cb.reconstruct(codes).astype(np.float64)
    mse = float(np.mean(np.sum((X - recon) ** 2, axis=1)))
    bits = n_subspaces * math.log2(n_centers)
    floor = dn.rate_distortion_bound(float(d), bits, d)
    ratio = mse / floor
    return BoundReport(
        suite="prop1", trials=n, empirical=mse, bound=floor, slack=0.0,
        passed=bool(floor <= mse <= 2.0 * floor),
        notes=f"ratio={ratio:.3f} (ceiling 2.0)")


def verify_dense_error_bound(trials: int = 10_000, seed: int = 0, d: int = 32,
                             n_subspaces: int = 16, n_points: int = 2_000,
                             eps: float | None = None) -> BoundReport:
    """Empirical P(|dense score error| < eps) vs. the concentration bound."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((max(n_points, 16), d))
    cb = dn.train_codebooks(X, n_subspaces, seed=seed)
    codes = dn.pq_encode(X, cb)
    recon = cb.reconstruct(codes).astype(np.float64)
    residual = X - recon
    queries = rng.standard_normal((trials, d))
    rows = rng.integers(0, X.shape[0], size=trials)
    errors = np.einsum("ij,ij->i", queries, residual[rows])
    max_q = dn.max_subspace_norm_sq(queries, cb)
    max_r = dn.max_subspace_norm_sq(residual, cb)
    if eps is None:
        eps = math.sqrt(2.0 * n_subspaces * max_q * max_r * math.log(20.0))
    bound = dn.azuma_error_bound(eps, n_subspaces, max_q, max_r)
    frac = float(np.mean(np.abs(errors) < eps))
    slack = _binomial_slack(frac, trials)
    return BoundReport(suite="prop2", trials=trials, empirical=frac, bound=bound,
                       slack=slack, passed=bool(frac >= bound - slack),
                       notes=f"eps={eps:.4g}")


def _prune_error_chunk(size: int, ss: np.random.SeedSequence, d: int, p: float,
                       value_bound: float, data_min: float, eps: float) -> int:
    rng = np.random.default_rng(ss)
    hits = 0
    for _ in range(size):
        nx = rng.binomial(d, p)
        nq = rng.binomial(d, p)
        dims_x = rng.choice(d, size=nx, replace=False)
        dims_q = rng.choice(d, size=nq, replace=False)
        common = np.intersect1d(dims_x, dims_q, assume_unique=True)
        err = 0.0
        if len(common):
            vx = rng.uniform(-value_bound, value_bound, size=len(common))
            vq = rng.uniform(-value_bound, value_bound, size=len(common))
            pruned = np.abs(vx) < data_min
            err = float(np.sum(vq[pruned] * vx[pruned]))
        hits += abs(err) < eps
    return hits


def verify_prune_error_bound(trials: int = 10_000, seed: int = 0, d: int = 10_000,
                             p: float = 0.01, value_bound: float = 1.0,
                             data_min: float = 0.05, eps: float | None = None,
                             threads: int = 1) -> BoundReport:
    """Empirical P(|pruning error| < eps) under the two-sided generative model.

    Trials are split into a fixed set of seeded chunks, so the result does not
    depend on the worker-pool size.
    """
    if eps is None:
        eps = 5.4 * value_bound * data_min
    bound = spi.chernoff_prune_bound(eps, value_bound, data_min, d, p)
    n_chunks = min(16, max(1, trials))
    sizes = [trials // n_chunks + (1 if i < trials % n_chunks else 0)
             for i in range(n_chunks)]
    streams = np.random.SeedSequence(seed).spawn(n_chunks)
    args = [(sz, ss, d, p, value_bound, data_min, eps)
            for sz, ss in zip(sizes, streams)]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            hits = sum(pool.map(lambda a: _prune_error_chunk(*a), args))
    else:
        hits = sum(_prune_error_chunk(*a) for a in args)
    frac = hits / trials
    slack = _binomial_slack(frac, trials)
    return BoundReport(suite="prop3", trials=trials, empirical=frac, bound=bound,
                       slack=slack, passed=bool(frac >= bound - slack),
                       notes=f"eps={eps:.4g}")


def verify_gap_recall(n_queries: int = 100, seed: int = 0, n: int = 10_000,
                      d_sparse: int = 10_000, d_dense: int = 32,
                      h: int = 20, overfetch: float = 10.0,
                      per_query_slack: float = 0.02) -> BoundReport:
    """Per-query check that recall@h >= P(stage-1 error < gap/2) - slack."""
    from .data import SynthConfig, generate_synthetic

    cfg = SynthConfig(n=n, d_sparse=d_sparse, d_dense=d_dense, seed=seed,
                      n_queries=n_queries)
    dataset, queries = generate_synthetic(cfg)
    index = pl.build_index(dataset, pl.HybridIndexConfig(seed=seed))
    worst = math.inf
    failures = 0
    checked = 0
    for i in range(queries.n):
        rep = pl.gap_recall_check(index, queries.point(i), h, overfetch)
        if rep.degenerate:
            continue
        checked += 1
        margin = rep.recall - (1.0 - rep.error_prob)
        worst = min(worst, margin)
        failures += margin < -per_query_slack
    return BoundReport(
        suite="prop4", trials=checked,
        empirical=float(worst if checked else 0.0), bound=0.0,
        slack=per_query_slack, passed=failures == 0,
        notes=f"{failures} failures over {checked} non-degenerate queries; "
              f"worst margin={worst:+.4f}")


_BOUND_SUITES = {
    "prop1": verify_rate_distortion,
    "prop2": verify_dense_error_bound,
    "prop3": verify_prune_error_bound,
    "prop4": verify_gap_recall,
}


def verify_bounds(suite: str, trials: int | None = None, seed: int = 0,
                  threads: int = 1, **params) -> list[BoundReport]:
    """Run one named bound suite or ``all``; returns one report per suite.

    ``threads`` sizes the worker pool for suites that parallelize across
    trials; results are identical for any pool size.
    """
    import inspect

    names = list(_BOUND_SUITES) if suite == "all" else [suite]
    reports = []
    for name in names:
        if name not in _BOUND_SUITES:
            raise ValueError(f"unknown suite {name!r}; choose from "
                             f"{sorted(_BOUND_SUITES)} or 'all'")
        fn = _BOUND_SUITES[name]
        kwargs = dict(params)
        if trials is not None:
            key = "n_queries" if name == "prop4" else "trials"
            kwargs[key] = trials
        if "threads" in inspect.signature(fn).parameters:
            kwargs["threads"] = threads
        reports.append(fn(seed=seed, **kwargs))
    return reports


@dataclass
class BenchRow:
    method: str
    dataset: str
    n: int
    d_sparse: int
    d_dense: int
    h: int
    recall: float
    mean_ms: float
    median_ms: float
    index_bytes: int
    build_s: float
    skipped: str = ""


@dataclass
class BenchReport:
    """Per-method recall and latency, plus environment notes."""

    rows: list[BenchRow] = field(default_factory=list)
    notes: str = ""

    CSV_HEADER = "method,dataset,N,dS,dD,h,recall,mean_ms,median_ms,index_bytes,build_s"

    def to_csv(self) -> str:
        out = [self.CSV_HEADER]
        for r in self.rows:
            if r.skipped:
                out.append(f"{r.method},{r.dataset},{r.n},{r.d_sparse},{r.d_dense},"
                           f"{r.h},{r.skipped},,,,")
            else:
                out.append(f"{r.method},{r.dataset},{r.n},{r.d_sparse},{r.d_dense},"
                           f"{r.h},{r.recall:.4f},{r.mean_ms:.3f},{r.median_ms:.3f},"
                           f"{r.index_bytes},{r.build_s:.3f}")
        return "\n".join(out) + "\n"

    def to_table(self) -> str:
        header = ["method", "recall", "mean_ms", "median_ms", "index_MB", "build_s"]
        lines = ["  ".join(f"{hcol:>12s}" for hcol in header)]
        for r in self.rows:
            if r.skipped:
                vals = [r.method, r.skipped, "-", "-", "-", "-"]
            else:
                vals = [r.method, f"{r.recall:.3f}", f"{r.mean_ms:.2f}",
                        f"{r.median_ms:.2f}", f"{r.index_bytes / 1e6:.1f}",
                        f"{r.build_s:.2f}"]
            lines.append("  ".join(f"{v:>12s}" for v in vals))
        return "\n".join(lines) + "\n"


def _to_full_sparse(dataset: HybridDataset) -> sp.csr_matrix:
    """Append the dense block as extra sparse columns (exact-baseline view)."""
    if dataset.d_dense == 0:
        return dataset.sparse.tocsr()
    dense_csr = sp.csr_matrix(dataset.dense)
    return sp.hstack([dataset.sparse, dense_csr], format="csr")


def _query_full(query: HybridVector, d_sparse: int, d_total: int) -> np.ndarray:
    q = np.zeros(d_total, dtype=np.float64)
    if query.sparse.nnz:
        q[query.sparse.dims] = query.sparse.values.astype(np.float64)
    q[d_sparse:] = query.dense.astype(np.float64)
    return q


class _Method:
    """One benchmark contestant: build once, answer queries one at a time."""

    name = "base"

    def build(self, dataset: HybridDataset, h: int, seed: int):
        raise NotImplementedError

    def query(self, q: HybridVector) -> np.ndarray:
        raise NotImplementedError

    def index_bytes(self) -> int:
        return 0


class _HybridMethod(_Method):
    name = "hybrid"

    def __init__(self, config: pl.HybridIndexConfig | None = None):
        self.config = config

    def build(self, dataset, h, seed):
        cfg = self.config or pl.HybridIndexConfig(seed=seed)
        self.index = pl.build_index(dataset, cfg)
        self.h = h

    def query(self, q):
        return pl.search_topk(self.index, q, self.h).ids

    def index_bytes(self):
        return self.index.memory_bytes()


class _SparseBruteForce(_Method):
    name = "sparse-brute-force"

    def build(self, dataset, h, seed):
        self.mat = _to_full_sparse(dataset)
        self.d_sparse = dataset.d_sparse
        self.h = h

    def query(self, q):
        qfull = _query_full(q, self.d_sparse, self.mat.shape[1])
        scores = self.mat @ qfull
        return pl.select_topk(scores, self.h)

    def index_bytes(self):
        return self.mat.data.nbytes + self.mat.indices.nbytes + self.mat.indptr.nbytes


class _DenseBruteForce(_Method):
    name = "dense-brute-force"
    memory_limit = 2 << 30  # refuse to pad beyond 2 GiB, mirroring an OOM

    def build(self, dataset, h, seed):
        need = dataset.n * (dataset.d_sparse + dataset.d_dense) * 4
        if need > self.memory_limit:
            raise MemoryError(f"padded dense matrix would need {need} bytes")
        self.mat = np.hstack([dataset.sparse.toarray(), dataset.dense]).astype(np.float32)
        self.d_sparse = dataset.d_sparse
        self.h = h

    def query(self, q):
        scores = self.mat @ _query_full(q, self.d_sparse, self.mat.shape[1])
        return pl.select_topk(scores, self.h)

    def index_bytes(self):
        return self.mat.nbytes


class _SparseInvertedExact(_Method):
    """Exact inverted index over all dimensions (dense appended as sparse)."""

    name = "sparse-inverted-index"

    def build(self, dataset, h, seed):
        mat = _to_full_sparse(dataset)
        self.index = spi.build_inverted(mat, np.arange(dataset.n))
        self.d_sparse = dataset.d_sparse
        self.h = h

    def query(self, q):
        acc = spi.Accumulator.zeros(self.index.n)
        qfull_dims = list(q.sparse.dims) + [self.d_sparse + j for j in range(len(q.dense))]
        qfull_vals = list(q.sparse.values.astype(np.float64)) + list(q.dense.astype(np.float64))
        sv = SparseVector(np.asarray(qfull_dims, np.int64), np.asarray(qfull_vals))
        spi.sparse_scan(self.index, sv, acc)
        return pl.select_topk(acc.scores, self.h)

    def index_bytes(self):
        return self.index.memory_bytes()


class _SparseOnlyNoReorder(_Method):
    name = "sparse-only-no-reorder"

    def build(self, dataset, h, seed):
        self.index = spi.build_inverted(dataset.sparse, np.arange(dataset.n))
        self.h = h

    def query(self, q):
        acc = spi.Accumulator.zeros(self.index.n)
        spi.sparse_scan(self.index, q.sparse, acc)
        return pl.select_topk(acc.scores, self.h)

    def index_bytes(self):
        return self.index.memory_bytes()


class _SparseOnlyReorder(_Method):
    name = "sparse-only-reorder-20k"
    fetch = 20_000

    def build(self, dataset, h, seed):
        self.index = spi.build_inverted(dataset.sparse, np.arange(dataset.n))
        self.dataset = dataset
        self.h = h

    def query(self, q):
        acc = spi.Accumulator.zeros(self.index.n)
        spi.sparse_scan(self.index, q.sparse, acc)
        cand = pl.select_topk(acc.scores, min(self.fetch, self.index.n))
        exact = pl._exact_scores(self.dataset, q, cand)
        return cand[pl.select_topk(exact, self.h, tie_ids=cand)]

    def index_bytes(self):
        return self.index.memory_bytes()


class _DensePQReorder(_Method):
    name = "dense-pq-reorder-10k"
    fetch = 10_000

    def build(self, dataset, h, seed):
        vectors = dataset.dense.astype(np.float64)
        self.whitening = dn.whiten_fit(vectors)
        white = dn.whiten_apply(self.whitening, vectors, "data")
        n_sub = max(1, math.ceil(dataset.d_dense / 2))
        self.codebooks = dn.train_codebooks(white, n_sub, seed=seed,
                                            sample=50_000)
        self.codes = dn.PQCodes.from_codes(dn.pq_encode(white, self.codebooks), 16)
        self.dataset = dataset
        self.h = h

    def query(self, q):
        qw = dn.whiten_apply(self.whitening, q.dense.astype(np.float64), "query")
        qlut = dn.quantize_lut(dn.adc_table(qw, self.codebooks))
        scores = dn.lut16_scan(self.codes, qlut)
        cand = pl.select_topk(scores, min(self.fetch, self.dataset.n))
        exact = pl._exact_scores(self.dataset, q, cand)
        return cand[pl.select_topk(exact, self.h, tie_ids=cand)]

    def index_bytes(self):
        total = self.codes.memory_bytes()
        for c in self.codebooks.centers:
            total += c.nbytes
        return total


class _Hamming512(_Method):
    """Sign-random-projection baseline: 512 Rademacher bits, median thresholds,
    Hamming shortlist of 5k, exact rerank."""

    name = "hamming-512"
    bits = 512
    fetch = 5_000
    memory_limit = 2 << 30

    def build(self, dataset, h, seed):
        d_total = dataset.d_sparse + dataset.d_dense
        if d_total * self.bits * 8 > self.memory_limit:
            raise MemoryError("projection matrix too large")
        rng = np.random.default_rng(seed)
        self.proj = rng.integers(0, 2, size=(d_total, self.bits)).astype(np.float64) * 2 - 1
        proj_sparse = self.proj[:dataset.d_sparse]
        proj_dense = self.proj[dataset.d_sparse:]
        raw = dataset.sparse @ proj_sparse + dataset.dense @ proj_dense
        self.thresholds = np.median(raw, axis=0)
        self.codes = np.packbits(raw > self.thresholds, axis=1)
        self.d_sparse = dataset.d_sparse
        self.dataset = dataset
        self.h = h

    def query(self, q):
        raw = _query_full(q, self.d_sparse, self.proj.shape[0]) @ self.proj
        qcode = np.packbits(raw > self.thresholds)
        dist = np.bitwise_count(self.codes ^ qcode).sum(axis=1)
        cand = pl.select_topk(-dist.astype(np.float64), min(self.fetch, self.dataset.n))
        exact = pl._exact_scores(self.dataset, q, cand)
        return cand[pl.select_topk(exact, self.h, tie_ids=cand)]

    def index_bytes(self):
        return self.codes.nbytes + self.proj.nbytes + self.thresholds.nbytes


METHODS = {
    m.name: m for m in (
        _HybridMethod, _SparseBruteForce, _DenseBruteForce, _SparseInvertedExact,
        _SparseOnlyNoReorder, _SparseOnlyReorder, _DensePQReorder, _Hamming512)
}


def run_benchmark(dataset: HybridDataset, queries: HybridDataset,
                  methods: list[str] | None = None, h: int = 20,
                  reps: int = 3, seed: int = 0,
                  dataset_name: str = "synthetic",
                  hybrid_config: pl.HybridIndexConfig | None = None) -> BenchReport:
    """Time and score each method sequentially on the same query set.

    Per query, the best (median over ``reps`` repetitions) wall time is
    recorded; recall is measured against the exact oracle.  Methods that
    refuse to build (memory guard) are reported as skipped.
    """
    methods = methods or list(METHODS)
    truth = [brute_force_topk(dataset, queries.point(i), h)[0]
             for i in range(queries.n)]
    report = BenchReport()
    for name in methods:
        if name not in METHODS:
            raise ValueError(f"unknown method {name!r}; choose from {sorted(METHODS)}")
        method = METHODS[name]() if name != "hybrid" else _HybridMethod(hybrid_config)
        row = BenchRow(method=name, dataset=dataset_name, n=dataset.n,
                       d_sparse=dataset.d_sparse, d_dense=dataset.d_dense, h=h,
                       recall=0.0, mean_ms=0.0, median_ms=0.0, index_bytes=0,
                       build_s=0.0)
        t0 = time.perf_counter()
        try:
            method.build(dataset, h, seed)
        except MemoryError:
            row.skipped = "OOM"
            report.rows.append(row)
            continue
        row.build_s = time.perf_counter() - t0
        times = []
        recalls = []
        for i in range(queries.n):
            q = queries.point(i)
            rep_times = []
            for _ in range(reps):
                t0 = time.perf_counter()
                ids = method.query(q)
                rep_times.append(time.perf_counter() - t0)
            times.append(float(np.median(rep_times)) * 1000.0)
            recalls.append(recall_at_h(ids, truth[i], h))
        row.recall = float(np.mean(recalls))
        row.mean_ms = float(np.mean(times))
        row.median_ms = float(np.median(times))
        row.index_bytes = method.index_bytes()
        report.rows.append(row)
    return report
