"""Core vector and dataset types, exact scoring, synthetic generation, file I/O.

A hybrid vector is the concatenation of a high-dimensional sparse part and a
low-dimensional dense part, addressed as two separate dimension spaces
(sparse dims in ``[0, d_sparse)``, dense dims in ``[0, d_dense)``).  Datasets
are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


class FormatError(ValueError):
    """Base class for malformed dataset/index files."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class BadVersionError(FormatError):
    """File has an unsupported format version."""


class TruncatedFileError(FormatError):
    """File ended before the declared payload was read."""


@dataclass
class SparseVector:
    """Sorted coordinate-list sparse vector.

    ``dims`` is strictly increasing, values are nonzero, and every dim is
    below the owning dataset's sparse dimensionality.
    """

    dims: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.dims = np.asarray(self.dims, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float32)

    @property
    def nnz(self) -> int:
        return len(self.dims)

    def dot(self, other: "SparseVector") -> float:
        """Exact inner product with another sparse vector, accumulated in f64."""
        return _sparse_dot(self.dims, self.values, other.dims, other.values)

    def to_dense(self, d: int) -> np.ndarray:
        out = np.zeros(d, dtype=np.float64)
        out[self.dims] = self.values
        return out


@dataclass
class HybridVector:
    """A sparse part plus a fixed-length dense part."""

    sparse: SparseVector
    dense: np.ndarray

    def __post_init__(self):
        self.dense = np.asarray(self.dense, dtype=np.float32)


EMPTY_SPARSE = SparseVector(np.empty(0, np.int64), np.empty(0, np.float32))


def normalize_sparse(raw, d_sparse: int) -> SparseVector:
    """Canonicalize a list of ``(dim, value)`` pairs into a SparseVector.

    Duplicate dims are summed, exact zeros dropped, output sorted by dim.
    Raises ValueError for dims outside ``[0, d_sparse)``.
    """
    if len(raw) == 0:
        return SparseVector(np.empty(0, np.int64), np.empty(0, np.float32))
    dims = np.asarray([d for d, _ in raw], dtype=np.int64)
    vals = np.asarray([v for _, v in raw], dtype=np.float64)
    if dims.min() < 0 or dims.max() >= d_sparse:
        raise ValueError(f"sparse dim out of range [0, {d_sparse})")
    order = np.argsort(dims, kind="stable")
    dims, vals = dims[order], vals[order]
    uniq, start = np.unique(dims, return_index=True)
    summed = np.add.reduceat(vals, start).astype(np.float32)
    keep = summed != 0.0  # after the storage cast, so subnormal underflows drop too
    return SparseVector(uniq[keep], summed[keep])


def _sparse_dot(d1, v1, d2, v2) -> float:
    if len(d1) == 0 or len(d2) == 0:
        return 0.0
    common, i1, i2 = np.intersect1d(d1, d2, assume_unique=True, return_indices=True)
    if len(common) == 0:
        return 0.0
    return float(np.sum(v1[i1].astype(np.float64) * v2[i2].astype(np.float64)))


def hybrid_dot(q: HybridVector, x: HybridVector) -> float:
    """Exact hybrid inner product ``q_sparse . x_sparse + q_dense . x_dense``.

    Accumulates in double precision regardless of storage dtype.
    """
    if len(q.dense) != len(x.dense):
        raise ValueError(f"dense dimension mismatch: {len(q.dense)} vs {len(x.dense)}")
    s = _sparse_dot(q.sparse.dims, q.sparse.values, x.sparse.dims, x.sparse.values)
    d = float(np.dot(q.dense.astype(np.float64), x.dense.astype(np.float64)))
    return s + d


@dataclass
class HybridDataset:
    """N hybrid vectors: a CSR sparse matrix beside a dense matrix.

    ``sparse`` is ``(n, d_sparse)`` float32 CSR with sorted indices;
    ``dense`` is ``(n, d_dense)`` float32, row i belonging to point i.
    """

    sparse: sp.csr_matrix
    dense: np.ndarray

    def __post_init__(self):
        self.dense = np.ascontiguousarray(self.dense, dtype=np.float32)
        if self.sparse.shape[0] != self.dense.shape[0]:
            raise ValueError("sparse/dense row counts differ")
        self.sparse.sort_indices()

    @property
    def n(self) -> int:
        return self.sparse.shape[0]

    @property
    def d_sparse(self) -> int:
        return self.sparse.shape[1]

    @property
    def d_dense(self) -> int:
        return self.dense.shape[1]

    def point(self, i: int) -> HybridVector:
        lo, hi = self.sparse.indptr[i], self.sparse.indptr[i + 1]
        sv = SparseVector(self.sparse.indices[lo:hi].astype(np.int64),
                          self.sparse.data[lo:hi])
        return HybridVector(sv, self.dense[i])

    def points(self):
        for i in range(self.n):
            yield self.point(i)

    @staticmethod
    def empty(d_sparse: int, d_dense: int) -> "HybridDataset":
        return HybridDataset(
            sp.csr_matrix((0, d_sparse), dtype=np.float32),
            np.zeros((0, d_dense), dtype=np.float32),
        )


@dataclass
class SynthConfig:
    """Power-law synthetic generator settings.

    Per-dim activity follows ``P_j = clip(nnz_scale * j^-zipf_alpha, 0, 1)``
    for 1-based dim rank j; nonzero magnitudes are uniform on
    ``[-value_bound, value_bound]``; dense entries are i.i.d. standard normal.
    Queries follow the same law when ``query_same_law`` is set, otherwise
    the ``query_*`` overrides.
    """

    n: int
    d_sparse: int
    d_dense: int
    zipf_alpha: float = 2.0
    nnz_scale: float = 0.5
    value_bound: float = 1.0
    query_same_law: bool = True
    query_nnz_scale: float | None = None
    query_zipf_alpha: float | None = None
    n_queries: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.zipf_alpha <= 0:
            raise ValueError("zipf_alpha must be > 0")
        if not (0 <= self.nnz_scale):
            raise ValueError("nnz_scale must be >= 0")

    def activity(self, d: int | None = None) -> np.ndarray:
        """Per-dim nonzero probabilities for datapoints (descending)."""
        d = self.d_sparse if d is None else d
        ranks = np.arange(1, d + 1, dtype=np.float64)
        return np.clip(self.nnz_scale * ranks ** -self.zipf_alpha, 0.0, 1.0)

    def query_activity(self) -> np.ndarray:
        if self.query_same_law:
            return self.activity()
        scale = self.query_nnz_scale if self.query_nnz_scale is not None else self.nnz_scale
        alpha = self.query_zipf_alpha if self.query_zipf_alpha is not None else self.zipf_alpha
        ranks = np.arange(1, self.d_sparse + 1, dtype=np.float64)
        return np.clip(scale * ranks ** -alpha, 0.0, 1.0)


def _random_sparse(rng: np.random.Generator, n: int, probs: np.ndarray,
                   bound: float) -> sp.csr_matrix:
    """Column-by-column Bernoulli sampling: exact per-entry law, cheap for power laws."""
    d = len(probs)
    rows, cols, vals = [], [], []
    for j in range(d):
        expect = n * probs[j]
        if expect < 1e-9:
            break
        cnt = rng.binomial(n, probs[j])
        if cnt == 0:
            continue
        r = rng.choice(n, size=cnt, replace=False)
        v = rng.uniform(-bound, bound, size=cnt).astype(np.float32)
        v[v == 0.0] = bound  # measure-zero guard: stored values must be nonzero
        rows.append(r)
        cols.append(np.full(cnt, j, dtype=np.int64))
        vals.append(v)
    if not rows:
        return sp.csr_matrix((n, d), dtype=np.float32)
    coo = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, d), dtype=np.float32)
    out = coo.tocsr()
    out.sort_indices()
    return out


def generate_synthetic(cfg: SynthConfig) -> tuple[HybridDataset, HybridDataset]:
    """Deterministically generate a dataset and a query set from ``cfg.seed``.

    Returns ``(dataset, queries)``; queries share the dataset schema.
    """
    rng = np.random.default_rng(cfg.seed)
    xs = _random_sparse(rng, cfg.n, cfg.activity(), cfg.value_bound)
    xd = rng.standard_normal((cfg.n, cfg.d_dense)).astype(np.float32)
    qs = _random_sparse(rng, cfg.n_queries, cfg.query_activity(), cfg.value_bound)
    qd = rng.standard_normal((cfg.n_queries, cfg.d_dense)).astype(np.float32)
    return HybridDataset(xs, xd), HybridDataset(qs, qd)


# On-disk dataset format (little-endian):
#   magic "HYBX", version u32, N u64, d_sparse u64, d_dense u32,
#   dense block N*d_dense f32 row-major,
#   CSR offsets (N+1) u64, nnz u32 dim indices, nnz f32 values.
DATASET_MAGIC = b"HYBX"
DATASET_VERSION = 1


def _read_exact(f, nbytes: int, what: str) -> bytes:
    buf = f.read(nbytes)
    if len(buf) != nbytes:
        raise TruncatedFileError(f"truncated file while reading {what}")
    return buf


def _read_array(f, dtype, count: int, what: str) -> np.ndarray:
    dtype = np.dtype(dtype)
    return np.frombuffer(_read_exact(f, dtype.itemsize * count, what), dtype=dtype)


def save_dataset(ds: HybridDataset, path) -> None:
    """Write a dataset in the HYBX binary format (bit-exact round trip)."""
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<IQQI", DATASET_VERSION, ds.n, ds.d_sparse, ds.d_dense))
        f.write(np.ascontiguousarray(ds.dense, dtype="<f4").tobytes())
        f.write(ds.sparse.indptr.astype("<u8").tobytes())
        f.write(ds.sparse.indices.astype("<u4").tobytes())
        f.write(ds.sparse.data.astype("<f4").tobytes())


def load_dataset(path) -> HybridDataset:
    """Read a HYBX dataset; raises a distinct FormatError per failure mode."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != DATASET_MAGIC:
            raise BadMagicError(f"not a dataset file (magic {magic!r})")
        version, n, d_sparse, d_dense = struct.unpack("<IQQI", _read_exact(f, 24, "header"))
        if version != DATASET_VERSION:
            raise BadVersionError(f"unsupported dataset version {version}")
        dense = _read_array(f, "<f4", n * d_dense, "dense block").reshape(n, d_dense).copy()
        indptr = _read_array(f, "<u8", n + 1, "csr offsets").astype(np.int64)
        nnz = int(indptr[-1])
        indices = _read_array(f, "<u4", nnz, "csr indices").astype(np.int32)
        values = _read_array(f, "<f4", nnz, "csr values").copy()
    mat = sp.csr_matrix((values, indices, indptr), shape=(n, d_sparse))
    return HybridDataset(mat, dense)
