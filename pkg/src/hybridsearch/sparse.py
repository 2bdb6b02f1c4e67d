"""Pruned, cache-sorted inverted index for the sparse component.

The index stores one posting list per active dimension, with datapoint ids
remapped through a layout permutation chosen to pack each list's ids into as
few accumulator cache-lines as possible.  A cache-line holds ``line_capacity``
consecutive accumulator slots, so the figure of merit for a query is the
number of distinct ``id // line_capacity`` values across the posting lists of
its active dimensions.  This module also provides the analytic expectations
for that cost under an independent per-dimension activity model, and the
Chernoff-style guarantee for the error introduced by pruning.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .data import (
    BadMagicError,
    BadVersionError,
    SparseVector,
    _read_array,
    _read_exact,
)

DEFAULT_LINE_CAPACITY = 16  # 32-bit accumulators on 64-byte cache-lines


@dataclass
class PruneThresholds:
    """Per-dimension magnitude cutoffs splitting a sparse matrix three ways.

    Entries with ``|v| >= data_min[j]`` go to the scan index, entries with
    ``residual_min[j] <= |v| < data_min[j]`` to the residual store, the rest
    are discarded.  ``top_t`` derives ``data_min[j]`` as the t-th largest
    magnitude in dimension j (dimensions with at most t entries keep all).
    """

    data_min: float | np.ndarray | None = None
    residual_min: float | np.ndarray = 0.0
    top_t: int | None = None

    def __post_init__(self):
        if self.top_t is not None and self.top_t < 0:
            raise ValueError("top_t must be >= 0")
        if self.data_min is None and self.top_t is None:
            self.data_min = 0.0

    def resolve(self, matrix: sp.csr_matrix) -> tuple[np.ndarray, np.ndarray]:
        """Return concrete (data_min, residual_min) arrays for ``matrix``."""
        d = matrix.shape[1]
        if self.data_min is not None:
            eta = np.broadcast_to(np.asarray(self.data_min, dtype=np.float64), (d,)).copy()
        else:
            eta = _top_t_thresholds(matrix, self.top_t)
        eps = np.broadcast_to(np.asarray(self.residual_min, dtype=np.float64), (d,)).copy()
        if np.any(eps > eta):
            raise ValueError("residual_min must be <= data_min in every dimension")
        return eta, eps


def _top_t_thresholds(matrix: sp.csr_matrix, t: int) -> np.ndarray:
    """data_min[j] = t-th largest |value| in column j (0 keeps all if nnz_j <= t)."""
    d = matrix.shape[1]
    eta = np.zeros(d, dtype=np.float64)
    if t == 0:
        return np.full(d, np.inf)
    csc = matrix.tocsc()
    absdata = np.abs(csc.data.astype(np.float64))
    for j in range(d):
        lo, hi = csc.indptr[j], csc.indptr[j + 1]
        nnz_j = hi - lo
        if nnz_j > t:
            col = absdata[lo:hi]
            eta[j] = np.partition(col, nnz_j - t)[nnz_j - t]
    return eta


def prune_split(matrix: sp.csr_matrix, thresholds: PruneThresholds):
    """Split a sparse matrix into (data, residual, discarded) CSR parts.

    The three parts are entry-disjoint and sum to the input.
    """
    eta, eps = thresholds.resolve(matrix)
    matrix = matrix.tocsr()
    absval = np.abs(matrix.data.astype(np.float64))
    col_eta = eta[matrix.indices]
    col_eps = eps[matrix.indices]
    in_data = absval >= col_eta
    in_residual = ~in_data & (absval >= col_eps)
    in_discard = ~in_data & ~in_residual

    def _select(mask):
        out = matrix.copy()
        out.data = np.where(mask, matrix.data, 0)
        out.eliminate_zeros()
        return out

    return _select(in_data), _select(in_residual), _select(in_discard)


def cache_sort(matrix: sp.csr_matrix) -> np.ndarray:
    """Layout permutation: ``order[slot] = original id``.

    Dimensions are ranked by nonzero count (descending, ties to the lower dim
    index) and datapoints are sorted by their binary activity patterns over
    that ranking, descending lexicographically, stably.  Points sharing a
    pattern keep their original relative order, so an all-zero matrix yields
    the identity.  The first 64 ranked dimensions are folded into one integer
    sort key; deeper dimensions are handled by partitioning the (rare) runs
    of equal keys.
    """
    n, d = matrix.shape
    csc = matrix.tocsc()
    nnz = np.diff(csc.indptr)
    ranked = np.lexsort((np.arange(d), -nnz))
    ranked = ranked[nnz[ranked] > 0]
    if n == 0 or len(ranked) == 0:
        return np.arange(n, dtype=np.int64)

    width = min(64, len(ranked))
    keys = np.zeros(n, dtype=np.uint64)
    for r in range(width):
        j = ranked[r]
        rows = csc.indices[csc.indptr[j]:csc.indptr[j + 1]]
        keys[rows] |= np.uint64(1) << np.uint64(63 - r)
    order = np.argsort(~keys, kind="stable")  # descending, stable

    if len(ranked) > width:
        order = _refine_equal_runs(order, keys, csc, ranked, width)
    return order.astype(np.int64)


def _refine_equal_runs(order, keys, csc, ranked, depth):
    """Continue the indicator partition past the packed key width."""
    sorted_keys = keys[order]
    boundaries = np.flatnonzero(sorted_keys[1:] != sorted_keys[:-1]) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(order)]))
    stack = [(s, e, depth) for s, e in zip(starts, ends) if e - s > 1]
    while stack:
        s, e, r = stack.pop()
        if r >= len(ranked):
            continue
        j = ranked[r]
        rows = csc.indices[csc.indptr[j]:csc.indptr[j + 1]]
        ids = order[s:e]
        loc = np.minimum(np.searchsorted(rows, ids), len(rows) - 1)
        member = rows[loc] == ids
        if member.any() and not member.all():
            order[s:e] = np.concatenate((ids[member], ids[~member]))
            pivot = s + int(member.sum())
            if pivot - s > 1:
                stack.append((s, pivot, r + 1))
            if e - pivot > 1:
                stack.append((pivot, e, r + 1))
        else:
            stack.append((s, e, r + 1))
    return order


def invert_permutation(order: np.ndarray) -> np.ndarray:
    pos = np.empty(len(order), dtype=np.int64)
    pos[order] = np.arange(len(order))
    return pos


@dataclass
class InvertedIndex:
    """Posting lists keyed by dimension, ids in permuted layout order.

    ``lists[j] = (ids, weights)`` with ids strictly increasing.  ``order``
    maps layout slot -> original id; ``pos`` is its inverse.
    """

    n: int
    d_sparse: int
    order: np.ndarray
    lists: dict[int, tuple[np.ndarray, np.ndarray]]
    pos: np.ndarray = field(init=False)

    def __post_init__(self):
        self.pos = invert_permutation(self.order)

    @property
    def nnz_per_dim(self) -> np.ndarray:
        out = np.zeros(self.d_sparse, dtype=np.int64)
        for j, (ids, _) in self.lists.items():
            out[j] = len(ids)
        return out

    def memory_bytes(self) -> int:
        total = self.order.nbytes
        for ids, w in self.lists.values():
            total += ids.nbytes + w.nbytes
        return total

    def to_csr(self) -> sp.csr_matrix:
        """Reconstruct the indexed matrix in original row order (round-trip check)."""
        rows, cols, vals = [], [], []
        for j, (ids, w) in self.lists.items():
            rows.append(self.order[ids])
            cols.append(np.full(len(ids), j, dtype=np.int64))
            vals.append(w)
        if not rows:
            return sp.csr_matrix((self.n, self.d_sparse), dtype=np.float32)
        coo = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n, self.d_sparse), dtype=np.float32)
        out = coo.tocsr()
        out.sort_indices()
        return out


def build_inverted(matrix: sp.csr_matrix, order: np.ndarray) -> InvertedIndex:
    """Index ``matrix`` (typically the pruned data part) under ``order``."""
    n, d = matrix.shape
    pos = invert_permutation(order)
    csc = matrix.tocsc()
    lists: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for j in range(d):
        lo, hi = csc.indptr[j], csc.indptr[j + 1]
        if lo == hi:
            continue
        pids = pos[csc.indices[lo:hi]]
        w = csc.data[lo:hi]
        o = np.argsort(pids)
        lists[int(j)] = (np.ascontiguousarray(pids[o], dtype=np.uint32),
                         np.ascontiguousarray(w[o], dtype=np.float32))
    return InvertedIndex(n=n, d_sparse=d, order=np.asarray(order, dtype=np.int64),
                         lists=lists)


@dataclass
class Accumulator:
    """Per-query score buffer in layout order plus cache-line instrumentation.

    ``lines_touched`` counts, per scanned posting list, the distinct
    ``id // line_capacity`` values it visits — the unit the cost model predicts.
    """

    scores: np.ndarray
    line_capacity: int = DEFAULT_LINE_CAPACITY
    lines_touched: int = 0

    @staticmethod
    def zeros(n: int, line_capacity: int = DEFAULT_LINE_CAPACITY) -> "Accumulator":
        if line_capacity <= 0:
            raise ValueError("line_capacity must be positive")
        return Accumulator(np.zeros(n, dtype=np.float64), line_capacity)

    def reset(self):
        self.scores[:] = 0.0
        self.lines_touched = 0


def distinct_lines(ids: np.ndarray, line_capacity: int) -> int:
    if len(ids) == 0:
        return 0
    lines = ids // line_capacity
    return 1 + int(np.count_nonzero(lines[1:] != lines[:-1]))


def sparse_scan(index: InvertedIndex, query: SparseVector,
                acc: Accumulator) -> Accumulator:
    """Accumulate ``q_j * w`` over the posting lists of the query's dims.

    Scores land at permuted positions: ``acc.scores[index.pos[i]]`` is the
    partial inner product for original point i.
    """
    if query.nnz and int(query.dims.max()) >= index.d_sparse:
        raise ValueError("query dimension out of range for this index")
    for j, qv in zip(query.dims, query.values):
        entry = index.lists.get(int(j))
        if entry is None:
            continue
        ids, w = entry
        acc.scores[ids] += float(qv) * w.astype(np.float64)
        acc.lines_touched += distinct_lines(ids, acc.line_capacity)
    return acc


def measure_cachelines(index: InvertedIndex, queries, line_capacity: int) -> float:
    """Mean per-query count of distinct cache-lines across active posting lists."""
    if line_capacity <= 0:
        raise ValueError("line_capacity must be positive")
    per_dim = {j: distinct_lines(ids, line_capacity)
               for j, (ids, _) in index.lists.items()}
    total = 0.0
    count = 0
    for q in queries:
        count += 1
        for j in q.dims:
            total += per_dim.get(int(j), 0)
    return total / count if count else 0.0


@dataclass
class CostModelParams:
    """Independent-activity model: P[j] (descending) for data, Q[j] for queries."""

    P: np.ndarray
    Q: np.ndarray
    n: int
    line_capacity: int = DEFAULT_LINE_CAPACITY

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.Q = np.asarray(self.Q, dtype=np.float64)
        if np.any((self.P < 0) | (self.P > 1)) or np.any((self.Q < 0) | (self.Q > 1)):
            raise ValueError("probabilities must lie in [0, 1]")
        if np.any(self.P[1:] > self.P[:-1]):
            raise ValueError("P must be sorted descending")
        if len(self.P) != len(self.Q):
            raise ValueError("P and Q must have equal length")


def expected_cachelines_unsorted(p: CostModelParams) -> float:
    """Expected lines per query with an arbitrary (unsorted) layout."""
    blocks = p.n / p.line_capacity
    return float(np.sum(p.Q * (1.0 - (1.0 - p.P) ** p.line_capacity) * blocks))


def expected_cachelines_sorted_bound(p: CostModelParams) -> float:
    """Upper bound on expected lines per query after the layout sort.

    Dimension at rank j (1-based) is split into at most 2^j contiguous runs,
    each occupying ceil(P_j N / (2^j B)) lines in the worst case of no line
    sharing between runs; dims too sparse for that regime keep the unsorted
    estimate.
    """
    B = p.line_capacity
    total = 0.0
    for rank, (pj, qj) in enumerate(zip(p.P, p.Q), start=1):
        lines = pj * p.n / B
        if lines > 0 and math.log2(lines) >= rank:
            runs = 2.0 ** rank
            term = runs * math.ceil(lines / runs)
        else:
            term = (1.0 - (1.0 - pj) ** B) * p.n / B
        total += qj * term
    return total


def chernoff_prune_bound(eps: float, value_bound: float, data_min_max: float,
                         d: int, p: float) -> float:
    """Lower bound on P(|pruning error| < eps) under the bounded two-sided model.

    Each of d dims is active with probability p in both vectors, magnitudes
    bounded by ``value_bound``, pruned entries bounded by ``data_min_max``.
    Returns 1.0 when nothing can be pruned (zero thresholds or zero values).
    """
    if data_min_max == 0 or value_bound == 0:
        return 1.0
    n_eps = eps / (value_bound * data_min_max)
    dp2 = d * p * p
    expo = -((n_eps - dp2) ** 2) / (n_eps + dp2)
    return max(0.0, 1.0 - 2.0 * math.exp(expo))


# Index file format (little-endian): magic "HSIX", version u32, N u64,
# d_sparse u64, order N*u32, per-dim posting counts d_sparse*u32,
# then per dim with count > 0 the postings as (u32 id, f32 weight) pairs.
INDEX_MAGIC = b"HSIX"
INDEX_VERSION = 1
_POSTING_DTYPE = np.dtype([("id", "<u4"), ("w", "<f4")])


def save_inverted_index(index: InvertedIndex, path_or_file) -> None:
    f = path_or_file if hasattr(path_or_file, "write") else open(path_or_file, "wb")
    close = f is not path_or_file
    try:
        f.write(INDEX_MAGIC)
        f.write(struct.pack("<IQQ", INDEX_VERSION, index.n, index.d_sparse))
        f.write(index.order.astype("<u4").tobytes())
        f.write(index.nnz_per_dim.astype("<u4").tobytes())
        for j in sorted(index.lists):
            ids, w = index.lists[j]
            rec = np.empty(len(ids), dtype=_POSTING_DTYPE)
            rec["id"] = ids
            rec["w"] = w
            f.write(rec.tobytes())
    finally:
        if close:
            f.close()


def load_inverted_index(path_or_file) -> InvertedIndex:
    f = path_or_file if hasattr(path_or_file, "read") else open(path_or_file, "rb")
    close = f is not path_or_file
    try:
        if _read_exact(f, 4, "magic") != INDEX_MAGIC:
            raise BadMagicError("not a sparse index file")
        version, n, d = struct.unpack("<IQQ", _read_exact(f, 20, "header"))
        if version != INDEX_VERSION:
            raise BadVersionError(f"unsupported sparse index version {version}")
        order = _read_array(f, "<u4", n, "permutation").astype(np.int64)
        counts = _read_array(f, "<u4", d, "posting counts")
        lists = {}
        for j in np.flatnonzero(counts):
            rec = _read_array(f, _POSTING_DTYPE, int(counts[j]), f"postings dim {j}")
            lists[int(j)] = (rec["id"].astype(np.uint32), rec["w"].astype(np.float32))
        return InvertedIndex(n=int(n), d_sparse=int(d), order=order, lists=lists)
    finally:
        if close:
            f.close()
