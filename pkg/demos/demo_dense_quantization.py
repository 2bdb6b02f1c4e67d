"""Dense-side anatomy: codebook training, the quantized 16-entry lookup-table
scan, and what each approximation layer costs in accuracy.

Run:  python3 demos/demo_dense_quantization.py
"""

import numpy as np

from hybridsearch import (
    PQCodes,
    adc_table,
    lut16_scan,
    pq_encode,
    quantize_lut,
    rate_distortion_bound,
    sq_encode,
    train_codebooks,
    whiten_apply,
    whiten_fit,
)
from hybridsearch.dense import adc_scan_float

rng = np.random.default_rng(0)
n, d = 50_000, 32
subspaces = d // 2

# Correlated data: whitening makes the training distribution isotropic while
# preserving every inner product (queries go through the transposed inverse).
mix = rng.normal(size=(d, d)) * 0.4 + np.eye(d)
X = rng.standard_normal((n, d)) @ mix.T
white = whiten_fit(X)
Xw = whiten_apply(white, X, "data")

codebooks = train_codebooks(Xw, subspaces, n_centers=16, seed=0)
codes = pq_encode(Xw, codebooks)
recon = codebooks.reconstruct(codes).astype(np.float64)
mse = np.mean(np.sum((Xw - recon) ** 2, axis=1))
floor = rate_distortion_bound(float(d), subspaces * 4, d)
print(f"quantization MSE {mse:.3f} vs information floor {floor:.3f} "
      f"(ratio {mse / floor:.2f}) at 4 bits per 2 dims")

q = rng.standard_normal(d)
qw = whiten_apply(white, q, "query")

# Float ADC: one 16-entry table per subspace, score = sum of table lookups.
table = adc_table(qw, codebooks)
float_scores = adc_scan_float(codes, table)

# Production path: the table is quantized to 8-bit entries with one shared
# scale, and points are scanned through packed 4-bit codes.
qlut = quantize_lut(table)
packed = PQCodes.from_codes(codes, 16)
fast_scores = lut16_scan(packed, qlut)
print(f"quantized-table error: max "
      f"{np.max(np.abs(fast_scores - float_scores)):.4f} "
      f"(guarantee {subspaces * qlut.scale / 2:.4f})")

exact = (Xw @ qw)
print(f"PQ approximation error: std {np.std(float_scores - exact):.3f} "
      f"on scores with std {np.std(exact):.3f}")

# The 8-bit residual store recovers almost all of that error at rerank time.
residual = sq_encode(Xw - recon)
corrected = fast_scores + residual.decode() @ qw
print(f"after residual correction: max error "
      f"{np.max(np.abs(corrected - exact)):.5f}")

top_exact = np.argsort(-exact)[:10]
top_corrected = np.argsort(-corrected)[:10]
print(f"top-10 overlap after correction: "
      f"{len(np.intersect1d(top_exact, top_corrected))}/10")
