"""Product-quantized dense scoring: codebook training, code packing, lookup
tables, the quantized 16-entry table scan, whitening, and the scalar-quantized
residual store.

The scan semantics are defined by a scalar reference kernel that accumulates
8-bit table entries in a 16-bit lane (wrapping), spilling to a wide counter
every 256 subspaces; ``lut16_scan`` is the production kernel and is required
to be bit-identical to the reference on every input.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .data import BadMagicError, BadVersionError, _read_array, _read_exact

LUT16_CENTERS = 16
_CHUNK = 256  # subspaces per 16-bit accumulation chunk


@dataclass
class Codebooks:
    """Per-subspace center matrices over contiguous spans of the dense dims."""

    subdims: np.ndarray                 # width of each subspace
    centers: list[np.ndarray]           # centers[k]: (n_centers, subdims[k]) f32
    objective_history: list[np.ndarray] | None = None

    @property
    def n_subspaces(self) -> int:
        return len(self.centers)

    @property
    def n_centers(self) -> int:
        return self.centers[0].shape[0] if self.centers else 0

    @property
    def d_dense(self) -> int:
        return int(np.sum(self.subdims))

    def slices(self) -> list[slice]:
        edges = np.concatenate(([0], np.cumsum(self.subdims)))
        return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]

    def reconstruct(self, codes: np.ndarray) -> np.ndarray:
        """Decode (n, K) code rows back to (n, d_dense) float32."""
        out = np.empty((codes.shape[0], self.d_dense), dtype=np.float32)
        for k, sl in enumerate(self.slices()):
            out[:, sl] = self.centers[k][codes[:, k]]
        return out


def subspace_widths(d_dense: int, n_subspaces: int) -> np.ndarray:
    """Near-even contiguous split; larger subspaces first (array_split order)."""
    if n_subspaces <= 0 or n_subspaces > d_dense:
        raise ValueError("need 1 <= n_subspaces <= d_dense")
    base, rem = divmod(d_dense, n_subspaces)
    return np.array([base + 1] * rem + [base] * (n_subspaces - rem), dtype=np.int64)


def _kmeans_pp_seed(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    centers = np.empty((k, data.shape[1]), dtype=np.float64)
    centers[0] = data[rng.integers(n)]
    d2 = np.sum((data - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = data[rng.integers(n)]
            continue
        centers[i] = data[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((data - centers[i]) ** 2, axis=1))
    return centers


def _distances_sq(data: np.ndarray, sq: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return sq[:, None] - 2.0 * (data @ centers.T) + np.sum(centers ** 2, axis=1)[None, :]


def _lloyd(data: np.ndarray, k: int, n_iters: int, rng: np.random.Generator):
    """Lloyd iterations with farthest-point repair for empty clusters."""
    centers = _kmeans_pp_seed(data, k, rng)
    sq = np.sum(data ** 2, axis=1)
    history = []
    d2 = _distances_sq(data, sq, centers)
    for _ in range(n_iters):
        assign = np.argmin(d2, axis=1)
        counts = np.bincount(assign, minlength=k)
        for c in np.flatnonzero(counts == 0):
            big = int(np.argmax(counts))
            members = np.flatnonzero(assign == big)
            far = members[int(np.argmax(d2[members, big]))]
            assign[far] = c
            counts[big] -= 1
            counts[c] = 1
        for c in range(k):
            if counts[c]:
                centers[c] = data[assign == c].mean(axis=0)
        d2 = _distances_sq(data, sq, centers)
        history.append(float(np.maximum(d2.min(axis=1), 0.0).mean()))
    return centers, np.asarray(history)


def train_codebooks(dense: np.ndarray, n_subspaces: int,
                    n_centers: int = LUT16_CENTERS, n_iters: int = 25,
                    seed: int = 0, sample: int | None = None) -> Codebooks:
    """Independent k-means per contiguous subspace (k-means++ seeding, Lloyd).

    Deterministic for a fixed seed.  ``sample`` caps the training set size
    (rows drawn without replacement).  Raises if fewer rows than centers.
    """
    dense = np.asarray(dense, dtype=np.float64)
    n, d = dense.shape
    widths = subspace_widths(d, n_subspaces)
    if np.any(widths == 0):
        raise ValueError("empty subspace")
    if n < n_centers:
        raise ValueError(f"need at least {n_centers} training rows, got {n}")
    children = np.random.SeedSequence(seed).spawn(1 + n_subspaces)
    if sample is not None and n_centers <= sample < n:
        sample_rng = np.random.default_rng(children[0])
        dense = dense[np.sort(sample_rng.choice(n, size=sample, replace=False))]
    streams = children[1:]
    centers, history = [], []
    edges = np.concatenate(([0], np.cumsum(widths)))
    for k in range(n_subspaces):
        sub = dense[:, edges[k]:edges[k + 1]]
        c, h = _lloyd(sub, n_centers, n_iters, np.random.default_rng(streams[k]))
        centers.append(c.astype(np.float32))
        history.append(h)
    return Codebooks(subdims=widths, centers=centers, objective_history=history)


def pq_encode(dense: np.ndarray, codebooks: Codebooks) -> np.ndarray:
    """Nearest-center index per subspace; ties resolve to the lowest index.

    Accepts one vector or an (n, d) batch; returns (n, K) uint8.
    """
    dense = np.atleast_2d(np.asarray(dense, dtype=np.float64))
    if dense.shape[1] != codebooks.d_dense:
        raise ValueError("dense dimension mismatch with codebooks")
    codes = np.empty((dense.shape[0], codebooks.n_subspaces), dtype=np.uint8)
    for k, sl in enumerate(codebooks.slices()):
        sub = dense[:, sl]
        c = codebooks.centers[k].astype(np.float64)
        d2 = (np.sum(sub ** 2, axis=1)[:, None] - 2.0 * (sub @ c.T)
              + np.sum(c ** 2, axis=1)[None, :])
        codes[:, k] = np.argmin(d2, axis=1)
    return codes


def pack_codes(codes: np.ndarray) -> np.ndarray:
    """Pack (n, K) 4-bit codes two per byte, low nibble = even subspace.

    Output is subspace-pair-major: shape (ceil(K/2), n), C-contiguous, which
    is the layout the scan kernel streams.
    """
    n, K = codes.shape
    if codes.size and codes.max() > 15:
        raise ValueError("pack_codes requires 4-bit codes")
    npairs = (K + 1) // 2
    packed = np.zeros((npairs, n), dtype=np.uint8)
    packed[:] = codes[:, 0::2].T
    if K > 1:
        packed[: K // 2] |= codes[:, 1::2].T << 4
    return np.ascontiguousarray(packed)


def unpack_codes(packed: np.ndarray, n_subspaces: int) -> np.ndarray:
    """Inverse of :func:`pack_codes` -> (n, K) uint8."""
    npairs, n = packed.shape
    codes = np.empty((n, n_subspaces), dtype=np.uint8)
    codes[:, 0::2] = (packed & 0x0F).T
    if n_subspaces > 1:
        codes[:, 1::2] = (packed[: n_subspaces // 2] >> 4).T
    return codes


@dataclass
class PQCodes:
    """Code matrix in layout order. 4-bit codes are kept packed pair-major."""

    n: int
    n_subspaces: int
    n_centers: int
    packed: np.ndarray | None = None      # (ceil(K/2), n) u8 when n_centers == 16
    bytes_wide: np.ndarray | None = None  # (n, K) u8 when n_centers == 256

    @staticmethod
    def from_codes(codes: np.ndarray, n_centers: int) -> "PQCodes":
        n, K = codes.shape
        if n_centers == LUT16_CENTERS:
            return PQCodes(n, K, n_centers, packed=pack_codes(codes))
        if n_centers == 256:
            return PQCodes(n, K, n_centers, bytes_wide=np.ascontiguousarray(codes, dtype=np.uint8))
        raise ValueError("n_centers must be 16 or 256")

    def unpacked(self) -> np.ndarray:
        if self.packed is not None:
            return unpack_codes(self.packed, self.n_subspaces)
        return self.bytes_wide

    def memory_bytes(self) -> int:
        arr = self.packed if self.packed is not None else self.bytes_wide
        return 0 if arr is None else arr.nbytes


def adc_table(query_dense: np.ndarray, codebooks: Codebooks) -> np.ndarray:
    """Float lookup table T[k][c] = <query subvector k, center c>, shape (K, l)."""
    q = np.asarray(query_dense, dtype=np.float64)
    if q.shape != (codebooks.d_dense,):
        raise ValueError("query dense dimension mismatch")
    table = np.empty((codebooks.n_subspaces, codebooks.n_centers), dtype=np.float64)
    for k, sl in enumerate(codebooks.slices()):
        table[k] = codebooks.centers[k].astype(np.float64) @ q[sl]
    return table


def adc_scan_float(codes: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Unquantized ADC: per-point sum of table entries in subspace order."""
    out = np.zeros(codes.shape[0], dtype=np.float64)
    for k in range(codes.shape[1]):
        out += table[k][codes[:, k]]
    return out


@dataclass
class QuantizedLUT:
    """8-bit table with per-subspace bias and one shared scale.

    Dequantized entry = bias[k] + scale * table[k][c]; the whole de-bias is a
    single multiply-add using ``bias_total``.
    """

    bias: np.ndarray       # (K,) f64 per-subspace minimum
    scale: float
    table: np.ndarray      # (K, l) u8

    @property
    def bias_total(self) -> float:
        return float(np.sum(self.bias))


def quantize_lut(table: np.ndarray) -> QuantizedLUT:
    """Round a float table onto the shared-scale 8-bit grid (error <= scale/2)."""
    table = np.asarray(table, dtype=np.float64)
    if not np.all(np.isfinite(table)):
        raise ValueError("lookup table contains non-finite values")
    bias = table.min(axis=1)
    spread = float((table - bias[:, None]).max()) if table.size else 0.0
    scale = spread / 255.0
    if scale == 0.0:
        q = np.zeros(table.shape, dtype=np.uint8)
    else:
        q = np.clip(np.round((table - bias[:, None]) / scale), 0, 255).astype(np.uint8)
    return QuantizedLUT(bias=bias, scale=scale, table=q)


def lut16_scan_reference(codes: np.ndarray, qlut: QuantizedLUT) -> np.ndarray:
    """Scalar reference kernel defining the scan semantics (slow, exact).

    16-bit wrapping accumulation of unsigned table bytes, spilled to a wide
    sum every 256 subspaces, then one float multiply-add.
    """
    n, K = codes.shape
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        total = 0
        acc = 0
        for k in range(K):
            acc = (acc + int(qlut.table[k, codes[i, k]])) & 0xFFFF
            if (k + 1) % _CHUNK == 0:
                total += acc
                acc = 0
        total += acc
        out[i] = qlut.bias_total + qlut.scale * float(total)
    return out


_NIBBLE_LO = (np.arange(256, dtype=np.uint16) & 0x0F)
_NIBBLE_HI = (np.arange(256, dtype=np.uint16) >> 4)


def _pair_table(qlut: QuantizedLUT, pair: int, n_subspaces: int) -> np.ndarray:
    """256-entry uint16 table indexed by a packed byte: sum of the two nibbles'
    lookups (high nibble contributes 0 for a trailing odd subspace)."""
    lo = qlut.table[2 * pair].astype(np.uint16)[_NIBBLE_LO]
    if 2 * pair + 1 < n_subspaces:
        lo = lo + qlut.table[2 * pair + 1].astype(np.uint16)[_NIBBLE_HI]
    return lo


def lut16_scan(codes: PQCodes, qlut: QuantizedLUT) -> np.ndarray:
    """Vectorized quantized-table scan; bit-identical to the reference kernel.

    Requires 16-center codes.  Subspaces are processed in 256-wide chunks so
    that the 16-bit accumulator lanes cannot lose carries relative to the
    reference semantics.
    """
    if codes.n_centers != LUT16_CENTERS:
        raise ValueError("lut16_scan requires 16-center codes")
    K = codes.n_subspaces
    packed = codes.packed
    total = np.zeros(codes.n, dtype=np.int64)
    pairs_per_chunk = _CHUNK // 2
    npairs = packed.shape[0]
    for chunk_start in range(0, npairs, pairs_per_chunk):
        acc = np.zeros(codes.n, dtype=np.uint16)
        for pair in range(chunk_start, min(chunk_start + pairs_per_chunk, npairs)):
            t2 = _pair_table(qlut, pair, K)
            acc += np.take(t2, packed[pair])
        total += acc
    return qlut.bias_total + qlut.scale * total.astype(np.float64)


@dataclass
class WhiteningTransform:
    """Inner-product-preserving pair of linear maps plus the data mean.

    Data side applies ``forward @ (x - mean)``; query side ``inverse_t @ q``.
    For centered vectors, transformed inner products equal the originals.
    """

    forward: np.ndarray
    inverse_t: np.ndarray
    mean: np.ndarray


def whiten_fit(dense: np.ndarray, ridge_scale: float = 1e-6) -> WhiteningTransform:
    """Symmetric inverse square root of the data covariance (ridge-stabilized)."""
    X = np.asarray(dense, dtype=np.float64)
    mean = X.mean(axis=0)
    d = X.shape[1]
    cov = np.cov(X, rowvar=False, bias=True).reshape(d, d)
    if np.trace(cov) == 0.0:  # constant data: nothing to whiten
        eye = np.eye(d)
        return WhiteningTransform(forward=eye, inverse_t=eye.copy(), mean=mean)
    ridge = ridge_scale * np.trace(cov) / d
    w, V = np.linalg.eigh(cov + ridge * np.eye(d))
    if np.any(w <= 0):
        raise ValueError("covariance is singular even after ridge")
    forward = (V * (w ** -0.5)) @ V.T
    inverse_t = (V * (w ** 0.5)) @ V.T
    return WhiteningTransform(forward=forward, inverse_t=inverse_t, mean=mean)


def whiten_apply(t: WhiteningTransform, v: np.ndarray, side: str) -> np.ndarray:
    """Transform a vector or (n, d) batch; ``side`` is "data" or "query"."""
    v = np.asarray(v, dtype=np.float64)
    if side == "data":
        return (v - t.mean) @ t.forward.T
    if side == "query":
        return v @ t.inverse_t.T
    raise ValueError("side must be 'data' or 'query'")


@dataclass
class ScalarQuantResidual:
    """Per-dimension affine 8-bit codes: value ~ lo[d] + step[d] * (code + 0.5)."""

    lo: np.ndarray      # (d,) f32
    step: np.ndarray    # (d,) f32
    codes: np.ndarray   # (n, d) u8

    def decode(self, rows: np.ndarray | slice = slice(None)) -> np.ndarray:
        c = self.codes[rows].astype(np.float64)
        return self.lo.astype(np.float64) + self.step.astype(np.float64) * (c + 0.5)

    def dot(self, rows: np.ndarray, q: np.ndarray) -> np.ndarray:
        """Inner products of the selected decoded rows with ``q`` (f64)."""
        return self.decode(rows) @ np.asarray(q, dtype=np.float64)

    def memory_bytes(self) -> int:
        return self.lo.nbytes + self.step.nbytes + self.codes.nbytes


def sq_encode(dense: np.ndarray) -> ScalarQuantResidual:
    """Scalar-quantize each dimension to 8 bits of its own dynamic range."""
    X = np.asarray(dense, dtype=np.float64)
    lo = X.min(axis=0) if X.shape[0] else np.zeros(X.shape[1])
    hi = X.max(axis=0) if X.shape[0] else np.zeros(X.shape[1])
    step = (hi - lo) / 256.0
    safe = np.where(step > 0, step, 1.0)
    codes = np.clip(np.floor((X - lo) / safe), 0, 255).astype(np.uint8)
    return ScalarQuantResidual(lo=lo.astype(np.float32), step=step.astype(np.float32),
                               codes=codes)


def sq_decode(r: ScalarQuantResidual) -> np.ndarray:
    return r.decode()


def rate_distortion_bound(sigma2: float, bits: float, dims: int) -> float:
    """Information-theoretic floor on quantization MSE for isotropic Gaussians."""
    return sigma2 * 2.0 ** (-2.0 * bits / dims)


def azuma_error_bound(eps: float, n_subspaces: int, max_query_subnorm_sq: float,
                      max_residual_subnorm_sq: float) -> float:
    """Lower bound on P(|dense score error| < eps) for subspace quantization.

    Returns 1.0 for exact quantization (zero residual) and clamps at 0.
    """
    denom = 2.0 * n_subspaces * max_query_subnorm_sq * max_residual_subnorm_sq
    if denom == 0:
        return 1.0
    return max(0.0, 1.0 - 2.0 * math.exp(-(eps * eps) / denom))


def max_subspace_norm_sq(rows: np.ndarray, codebooks: Codebooks) -> float:
    """max over rows and subspaces of the squared subvector norm."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    best = 0.0
    for sl in codebooks.slices():
        best = max(best, float(np.max(np.sum(rows[:, sl] ** 2, axis=1))))
    return best


# Dense index file format (little-endian): magic "HDPQ", version u32, N u64,
# d_dense u32, K u32, l u32, subdims K*u32, centers per subspace l*width f32,
# packed codes (pair-major u8; or n*K u8 when l = 256), flags u8 for the
# scalar-quant residual and whitening blocks that follow.
DENSE_MAGIC = b"HDPQ"
DENSE_VERSION = 1


@dataclass
class DenseIndex:
    """Everything needed to score dense parts: codebooks, codes, residual, whitening."""

    codebooks: Codebooks
    codes: PQCodes
    residual: ScalarQuantResidual | None = None
    whitening: WhiteningTransform | None = None

    def memory_bytes(self) -> int:
        total = self.codes.memory_bytes()
        for c in self.codebooks.centers:
            total += c.nbytes
        if self.residual is not None:
            total += self.residual.memory_bytes()
        return total


def save_dense_index(idx: DenseIndex, path_or_file) -> None:
    f = path_or_file if hasattr(path_or_file, "write") else open(path_or_file, "wb")
    close = f is not path_or_file
    try:
        cb, codes = idx.codebooks, idx.codes
        f.write(DENSE_MAGIC)
        f.write(struct.pack("<IQIII", DENSE_VERSION, codes.n, cb.d_dense,
                            cb.n_subspaces, cb.n_centers))
        f.write(cb.subdims.astype("<u4").tobytes())
        for c in cb.centers:
            f.write(np.ascontiguousarray(c, dtype="<f4").tobytes())
        arr = codes.packed if codes.packed is not None else codes.bytes_wide
        f.write(arr.astype("<u1").tobytes())
        f.write(struct.pack("<B", 1 if idx.residual is not None else 0))
        if idx.residual is not None:
            r = idx.residual
            f.write(r.lo.astype("<f4").tobytes())
            f.write(r.step.astype("<f4").tobytes())
            f.write(r.codes.astype("<u1").tobytes())
        f.write(struct.pack("<B", 1 if idx.whitening is not None else 0))
        if idx.whitening is not None:
            w = idx.whitening
            f.write(w.mean.astype("<f8").tobytes())
            f.write(w.forward.astype("<f8").tobytes())
            f.write(w.inverse_t.astype("<f8").tobytes())
    finally:
        if close:
            f.close()


def load_dense_index(path_or_file) -> DenseIndex:
    f = path_or_file if hasattr(path_or_file, "read") else open(path_or_file, "rb")
    close = f is not path_or_file
    try:
        if _read_exact(f, 4, "magic") != DENSE_MAGIC:
            raise BadMagicError("not a dense index file")
        version, n, d, K, l = struct.unpack("<IQIII", _read_exact(f, 24, "header"))
        if version != DENSE_VERSION:
            raise BadVersionError(f"unsupported dense index version {version}")
        subdims = _read_array(f, "<u4", K, "subdims").astype(np.int64)
        centers = []
        for k in range(K):
            c = _read_array(f, "<f4", l * int(subdims[k]), f"centers {k}")
            centers.append(c.reshape(l, int(subdims[k])).copy())
        cb = Codebooks(subdims=subdims, centers=centers)
        if l == LUT16_CENTERS:
            npairs = (K + 1) // 2
            packed = _read_array(f, "<u1", npairs * n, "codes").reshape(npairs, n).copy()
            codes = PQCodes(n=n, n_subspaces=K, n_centers=l, packed=packed)
        else:
            wide = _read_array(f, "<u1", n * K, "codes").reshape(n, K).copy()
            codes = PQCodes(n=n, n_subspaces=K, n_centers=l, bytes_wide=wide)
        residual = None
        if struct.unpack("<B", _read_exact(f, 1, "residual flag"))[0]:
            lo = _read_array(f, "<f4", d, "sq lo").copy()
            step = _read_array(f, "<f4", d, "sq step").copy()
            rcodes = _read_array(f, "<u1", n * d, "sq codes").reshape(n, d).copy()
            residual = ScalarQuantResidual(lo=lo, step=step, codes=rcodes)
        whitening = None
        if struct.unpack("<B", _read_exact(f, 1, "whitening flag"))[0]:
            mean = _read_array(f, "<f8", d, "whitening mean").copy()
            fwd = _read_array(f, "<f8", d * d, "whitening forward").reshape(d, d).copy()
            inv = _read_array(f, "<f8", d * d, "whitening inverse").reshape(d, d).copy()
            whitening = WhiteningTransform(forward=fwd, inverse_t=inv, mean=mean)
        return DenseIndex(codebooks=cb, codes=codes, residual=residual, whitening=whitening)
    finally:
        if close:
            f.close()
