"""End-to-end hybrid index: build, three-stage search, and the composite
index file.

Search runs in three stages: (1) scan the pruned sparse index and the
quantized dense codes over all points and keep the top ``overfetch * h``,
(2) refine those with the scalar-quantized dense residual and keep
``retain * h``, (3) refine the survivors with the forward-format sparse
residual rows (or the raw vectors when ``exact_final_rerank``) and return
the top h.  All sub-structures share one layout permutation; results are
reported with original ids.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass, field, asdict

import numpy as np
import scipy.sparse as sp

from .data import (
    BadMagicError,
    BadVersionError,
    HybridDataset,
    HybridVector,
    SparseVector,
    _read_exact,
)
from . import dense as dn
from . import sparse as spi


@dataclass
class HybridIndexConfig:
    """Build- and query-time knobs.

    ``overfetch`` and ``retain`` are the stage-1/stage-2 candidate multipliers
    (overfetch >= retain >= 1).  ``sparse_weight``/``dense_weight`` rescale the
    two score components at query time.
    """

    overfetch: float = 10.0
    retain: float = 3.0
    h: int = 20
    top_t: int | None = 128
    data_threshold: float | list | None = None
    residual_threshold: float | list = 0.0
    pq_subspaces: int | None = None        # default: ceil(d_dense / 2)
    pq_centers: int = 16
    use_whitening: bool = True
    exact_final_rerank: bool = False
    sparse_weight: float = 1.0
    dense_weight: float = 1.0
    kmeans_iters: int = 25
    train_sample: int = 50_000
    line_capacity: int = spi.DEFAULT_LINE_CAPACITY
    seed: int = 0

    def __post_init__(self):
        if not (self.overfetch >= self.retain >= 1.0):
            raise ValueError("need overfetch >= retain >= 1")
        if self.h < 1:
            raise ValueError("h must be >= 1")

    def prune_thresholds(self) -> spi.PruneThresholds:
        if self.data_threshold is not None:
            data_min = np.asarray(self.data_threshold, dtype=np.float64)
            return spi.PruneThresholds(data_min=data_min,
                                       residual_min=np.asarray(self.residual_threshold))
        return spi.PruneThresholds(top_t=self.top_t,
                                   residual_min=np.asarray(self.residual_threshold))


@dataclass
class StageStats:
    candidates: list[int] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)


@dataclass
class SearchResult:
    """Top-h hits: original ids, descending scores, per-stage instrumentation."""

    ids: np.ndarray
    scores: np.ndarray
    stages: StageStats


@dataclass
class HybridIndex:
    """All per-dataset search structures, sharing one layout permutation."""

    config: HybridIndexConfig
    n: int
    d_sparse: int
    d_dense: int
    order: np.ndarray                       # layout slot -> original id
    sparse_index: spi.InvertedIndex
    sparse_residual: sp.csr_matrix          # rows in layout order
    dense_index: dn.DenseIndex | None
    dataset: HybridDataset | None = None    # retained for exact rerank / oracles

    @property
    def pos(self) -> np.ndarray:
        return self.sparse_index.pos

    def memory_bytes(self) -> int:
        total = self.sparse_index.memory_bytes()
        total += self.sparse_residual.data.nbytes + self.sparse_residual.indices.nbytes
        total += self.sparse_residual.indptr.nbytes
        if self.dense_index is not None:
            total += self.dense_index.memory_bytes()
        return total


def build_index(dataset: HybridDataset, config: HybridIndexConfig | None = None,
                keep_dataset: bool = True, order_fn=None) -> HybridIndex:
    """Construct the full hybrid index; deterministic for a fixed config seed.

    The sparse part is pruned first and the layout permutation is computed on
    the pruned scan matrix; dense codes and both residual stores are written
    in that layout order.  ``order_fn`` swaps in an alternate layout policy
    (a callable from the pruned CSR matrix to a permutation); the default is
    :func:`hybridsearch.sparse.cache_sort`.
    """
    config = config or HybridIndexConfig()
    thresholds = config.prune_thresholds()
    data_part, residual_part, _ = spi.prune_split(dataset.sparse, thresholds)
    order = (order_fn or spi.cache_sort)(data_part)
    order = np.asarray(order, dtype=np.int64)
    if not np.array_equal(np.sort(order), np.arange(dataset.n)):
        raise ValueError("layout ordering is not a permutation of [0, n)")
    sparse_index = spi.build_inverted(data_part, order)
    sparse_residual = residual_part[order].tocsr()
    sparse_residual.sort_indices()

    dense_index = None
    if dataset.d_dense > 0:
        vectors = dataset.dense.astype(np.float64)
        whitening = None
        if config.use_whitening:
            whitening = dn.whiten_fit(vectors)
            vectors = dn.whiten_apply(whitening, vectors, "data")
        n_sub = config.pq_subspaces or max(1, math.ceil(dataset.d_dense / 2))
        codebooks = dn.train_codebooks(
            vectors, n_sub, n_centers=config.pq_centers,
            n_iters=config.kmeans_iters, seed=config.seed,
            sample=config.train_sample)
        codes = dn.pq_encode(vectors, codebooks)[order]
        pq = dn.PQCodes.from_codes(codes, config.pq_centers)
        residual = vectors[order] - codebooks.reconstruct(codes)
        dense_index = dn.DenseIndex(codebooks=codebooks, codes=pq,
                                    residual=dn.sq_encode(residual),
                                    whitening=whitening)
    return HybridIndex(
        config=config, n=dataset.n, d_sparse=dataset.d_sparse,
        d_dense=dataset.d_dense, order=order, sparse_index=sparse_index,
        sparse_residual=sparse_residual, dense_index=dense_index,
        dataset=dataset if keep_dataset else None)


def select_topk(scores: np.ndarray, k: int, tie_ids: np.ndarray | None = None) -> np.ndarray:
    """Exact top-k positions by score descending, ties to the smaller tie id.

    ``tie_ids`` defaults to the positions themselves.  Equivalent to a full
    sort by ``(-score, tie_id)`` truncated to k, but runs in O(n + k log k).
    """
    n = len(scores)
    k = min(k, n)
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    if tie_ids is None:
        tie_ids = np.arange(n, dtype=np.int64)
    if k < n:
        part = np.argpartition(-scores, k - 1)[:k]
        boundary = scores[part].min()
        sel = np.flatnonzero(scores > boundary)
        need = k - len(sel)
        if need > 0:
            eq = np.flatnonzero(scores == boundary)
            eq = eq[np.argsort(tie_ids[eq], kind="stable")[:need]]
            sel = np.concatenate((sel, eq))
    else:
        sel = np.arange(n, dtype=np.int64)
    order = np.lexsort((tie_ids[sel], -scores[sel]))
    return sel[order]


def _stage1_scores(index: HybridIndex, query: HybridVector) -> np.ndarray:
    """Approximate scores for every point, in layout order, query weights applied."""
    cfg = index.config
    acc = spi.Accumulator.zeros(index.n, cfg.line_capacity)
    qs = query.sparse
    if cfg.sparse_weight != 1.0 and qs.nnz:
        qs = SparseVector(qs.dims, qs.values * cfg.sparse_weight)
    spi.sparse_scan(index.sparse_index, qs, acc)
    scores = acc.scores
    if index.dense_index is not None:
        scores = scores + _dense_scores(index, query.dense)
    return scores


def _dense_scores(index: HybridIndex, query_dense: np.ndarray) -> np.ndarray:
    di = index.dense_index
    cfg = index.config
    qd = np.asarray(query_dense, dtype=np.float64) * cfg.dense_weight
    qw, offset = _dense_query(index, qd)
    table = dn.adc_table(qw, di.codebooks)
    qlut = dn.quantize_lut(table)
    return dn.lut16_scan(di.codes, qlut) + offset


def _dense_query(index: HybridIndex, qd: np.ndarray) -> tuple[np.ndarray, float]:
    """Whiten the (weighted) dense query; the mean-shift constant keeps scores
    aligned with raw inner products."""
    di = index.dense_index
    if di.whitening is None:
        return qd, 0.0
    qw = dn.whiten_apply(di.whitening, qd, "query")
    return qw, float(qd @ di.whitening.mean)


def search_topk(index: HybridIndex, query: HybridVector, h: int | None = None, *,
                overfetch: float | None = None, retain: float | None = None,
                exact_final_rerank: bool | None = None) -> SearchResult:
    """Three-stage approximate top-h search; ties break to the lower original id.

    Keyword overrides replace the corresponding config values for this call.
    """
    cfg = index.config
    h = cfg.h if h is None else h
    if h < 1:
        raise ValueError("h must be >= 1")
    if len(query.dense) != index.d_dense:
        raise ValueError("query dense dimension mismatch")
    if query.sparse.nnz and int(query.sparse.dims.max()) >= index.d_sparse:
        raise ValueError("query sparse dimension out of range")
    alpha = cfg.overfetch if overfetch is None else overfetch
    beta = cfg.retain if retain is None else retain
    exact = cfg.exact_final_rerank if exact_final_rerank is None else exact_final_rerank
    if not (alpha >= beta >= 1.0):
        raise ValueError("need overfetch >= retain >= 1")
    stages = StageStats()
    original_ids = index.order

    t0 = time.perf_counter()
    scores1 = _stage1_scores(index, query)
    k1 = min(index.n, math.ceil(alpha * h))
    cand1 = select_topk(scores1, k1, tie_ids=original_ids)
    stages.candidates.append(len(cand1))
    stages.seconds.append(time.perf_counter() - t0)

    t0 = time.perf_counter()
    scores2 = scores1[cand1]
    if index.dense_index is not None and index.dense_index.residual is not None:
        qw, _ = _dense_query(index, query.dense.astype(np.float64) * cfg.dense_weight)
        scores2 = scores2 + index.dense_index.residual.dot(cand1, qw)
    k2 = min(len(cand1), math.ceil(beta * h))
    keep = select_topk(scores2, k2, tie_ids=original_ids[cand1])
    cand2 = cand1[keep]
    scores2 = scores2[keep]
    stages.candidates.append(len(cand2))
    stages.seconds.append(time.perf_counter() - t0)

    t0 = time.perf_counter()
    if exact:
        if index.dataset is None:
            raise ValueError("exact_final_rerank requires the original dataset")
        final = _exact_scores(index.dataset, query, original_ids[cand2],
                              cfg.sparse_weight, cfg.dense_weight)
    else:
        final = scores2 + _sparse_residual_dot(index, cand2, query.sparse) * cfg.sparse_weight
    top = select_topk(final, min(h, len(cand2)), tie_ids=original_ids[cand2])
    stages.candidates.append(min(h, len(cand2)))
    stages.seconds.append(time.perf_counter() - t0)
    return SearchResult(ids=original_ids[cand2[top]], scores=final[top], stages=stages)


def search_batch(index: HybridIndex, queries, h: int | None = None,
                 threads: int = 1, **overrides) -> list[SearchResult]:
    """Run many queries, optionally across a thread pool.

    ``queries`` is a HybridDataset or an iterable of HybridVectors.  Results
    come back in query order regardless of scheduling; each worker uses
    private accumulators and tables, so any pool size is safe.
    """
    if hasattr(queries, "points"):
        queries = list(queries.points())
    else:
        queries = list(queries)
    run = lambda q: search_topk(index, q, h, **overrides)
    if threads > 1 and len(queries) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, queries))
    return [run(q) for q in queries]


def _sparse_residual_dot(index: HybridIndex, layout_rows: np.ndarray,
                         qs) -> np.ndarray:
    if qs.nnz == 0 or index.sparse_residual.nnz == 0:
        return np.zeros(len(layout_rows), dtype=np.float64)
    qvec = np.zeros(index.d_sparse, dtype=np.float64)
    qvec[qs.dims] = qs.values.astype(np.float64)
    rows = index.sparse_residual[layout_rows]
    return rows @ qvec


def _exact_scores(dataset: HybridDataset, query: HybridVector, ids: np.ndarray,
                  sparse_weight: float = 1.0, dense_weight: float = 1.0) -> np.ndarray:
    """Exact weighted hybrid scores for the selected original ids (f64)."""
    qd = query.dense.astype(np.float64) * dense_weight
    out = dataset.dense[ids].astype(np.float64) @ qd
    if query.sparse.nnz:
        qvec = np.zeros(dataset.d_sparse, dtype=np.float64)
        qvec[query.sparse.dims] = query.sparse.values.astype(np.float64) * sparse_weight
        out += dataset.sparse[ids] @ qvec
    return out


@dataclass
class GapRecallReport:
    """Per-query link between the score gap, stage-1 error mass, and recall."""

    gap: float
    error_prob: float      # fraction of points whose stage-1 error >= gap/2
    recall: float
    degenerate: bool = False


def gap_recall_check(index: HybridIndex, query: HybridVector, h: int,
                     overfetch: float) -> GapRecallReport:
    """Compare achieved recall@h against the stage-1 error-vs-gap criterion.

    Needs the original dataset on the index.  The search runs with
    ``retain = overfetch`` and exact final rerank so recall isolates the
    stage-1 fetch.
    """
    if index.dataset is None:
        raise ValueError("gap_recall_check requires the original dataset")
    exact = _exact_scores(index.dataset, query, np.arange(index.n),
                          index.config.sparse_weight, index.config.dense_weight)
    k_fetch = min(index.n, math.ceil(overfetch * h))
    ranked = np.sort(exact)[::-1]
    gap = float(ranked[h - 1] - ranked[k_fetch - 1])
    if gap <= 0:
        return GapRecallReport(gap=gap, error_prob=1.0, recall=float("nan"),
                               degenerate=True)
    approx = _stage1_scores(index, query)[index.pos]  # back to original order
    error_prob = float(np.mean(np.abs(exact - approx) >= gap / 2.0))
    truth = select_topk(exact, h)
    got = search_topk(index, query, h, overfetch=overfetch, retain=overfetch,
                      exact_final_rerank=True)
    recall = len(np.intersect1d(truth, got.ids)) / h
    return GapRecallReport(gap=gap, error_prob=error_prob, recall=recall)


# Composite index file: magic "HIDX", version u32, section count u32, then a
# table of (tag 4s, offset u64, length u64) entries.  Sections: META (JSON
# config + shape), SPIX (sparse index blob), SRES (sparse residual CSR),
# DPQX (dense index blob, optional).
COMPOSITE_MAGIC = b"HIDX"
COMPOSITE_VERSION = 1


def _config_to_json(cfg: HybridIndexConfig) -> dict:
    raw = asdict(cfg)
    for key, val in raw.items():
        if isinstance(val, np.ndarray):
            raw[key] = val.tolist()
    return raw


def save_index(index: HybridIndex, path) -> None:
    """Write the composite index (the raw dataset is not included)."""
    import io

    sections: list[tuple[bytes, bytes]] = []
    meta = {
        "n": index.n, "d_sparse": index.d_sparse, "d_dense": index.d_dense,
        "config": _config_to_json(index.config),
    }
    sections.append((b"META", json.dumps(meta, sort_keys=True).encode()))
    buf = io.BytesIO()
    spi.save_inverted_index(index.sparse_index, buf)
    sections.append((b"SPIX", buf.getvalue()))
    res = index.sparse_residual
    buf = io.BytesIO()
    buf.write(struct.pack("<QQ", res.shape[0], res.nnz))
    buf.write(res.indptr.astype("<u8").tobytes())
    buf.write(res.indices.astype("<u4").tobytes())
    buf.write(res.data.astype("<f4").tobytes())
    sections.append((b"SRES", buf.getvalue()))
    if index.dense_index is not None:
        buf = io.BytesIO()
        dn.save_dense_index(index.dense_index, buf)
        sections.append((b"DPQX", buf.getvalue()))

    with open(path, "wb") as f:
        f.write(COMPOSITE_MAGIC)
        f.write(struct.pack("<II", COMPOSITE_VERSION, len(sections)))
        offset = 12 + 20 * len(sections)
        for tag, blob in sections:
            f.write(tag)
            f.write(struct.pack("<QQ", offset, len(blob)))
            offset += len(blob)
        for _, blob in sections:
            f.write(blob)


def load_index(path, dataset: HybridDataset | None = None) -> HybridIndex:
    """Read a composite index; attach ``dataset`` to re-enable exact rerank."""
    import io

    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != COMPOSITE_MAGIC:
            raise BadMagicError("not a hybrid index file")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != COMPOSITE_VERSION:
            raise BadVersionError(f"unsupported index version {version}")
        table = []
        for _ in range(count):
            tag = _read_exact(f, 4, "section tag")
            offset, length = struct.unpack("<QQ", _read_exact(f, 16, "section entry"))
            table.append((tag, offset, length))
        blobs = {}
        for tag, offset, length in table:
            f.seek(offset)
            blobs[tag] = _read_exact(f, length, f"section {tag!r}")

    meta = json.loads(blobs[b"META"].decode())
    cfg_raw = meta["config"]
    config = HybridIndexConfig(**cfg_raw)
    sparse_index = spi.load_inverted_index(io.BytesIO(blobs[b"SPIX"]))
    res_buf = io.BytesIO(blobs[b"SRES"])
    n_rows, nnz = struct.unpack("<QQ", _read_exact(res_buf, 16, "residual header"))
    indptr = np.frombuffer(res_buf.read(8 * (n_rows + 1)), dtype="<u8").astype(np.int64)
    indices = np.frombuffer(res_buf.read(4 * nnz), dtype="<u4").astype(np.int32)
    data = np.frombuffer(res_buf.read(4 * nnz), dtype="<f4").copy()
    sparse_residual = sp.csr_matrix((data, indices, indptr),
                                    shape=(n_rows, meta["d_sparse"]))
    dense_index = None
    if b"DPQX" in blobs:
        dense_index = dn.load_dense_index(io.BytesIO(blobs[b"DPQX"]))
    return HybridIndex(
        config=config, n=meta["n"], d_sparse=meta["d_sparse"],
        d_dense=meta["d_dense"], order=sparse_index.order,
        sparse_index=sparse_index, sparse_residual=sparse_residual,
        dense_index=dense_index, dataset=dataset)
