"""How the layout permutation cuts accumulator cache-line traffic.

Builds the same inverted index twice, in original and cache-sorted order,
counts distinct lines touched per query, and compares with the analytic
expectation for the unsorted layout.

Run:  python3 demos/demo_cache_sorting.py
"""

import numpy as np

from hybridsearch import (
    CostModelParams,
    SynthConfig,
    build_inverted,
    cache_sort,
    expected_cachelines_sorted_bound,
    expected_cachelines_unsorted,
    generate_synthetic,
    measure_cachelines,
)
from hybridsearch.sparse import distinct_lines

B = 16  # accumulator slots per 64-byte cache-line (32-bit accumulators)
cfg = SynthConfig(n=100_000, d_sparse=10_000, d_dense=0, zipf_alpha=2.0,
                  n_queries=300, seed=0)
dataset, queries = generate_synthetic(cfg)
qs = [queries.point(i).sparse for i in range(queries.n)]

unsorted_index = build_inverted(dataset.sparse, np.arange(dataset.n))
order = cache_sort(dataset.sparse)
sorted_index = build_inverted(dataset.sparse, order)

measured_unsorted = measure_cachelines(unsorted_index, qs, B)
measured_sorted = measure_cachelines(sorted_index, qs, B)

params = CostModelParams(P=cfg.activity(), Q=cfg.query_activity(),
                         n=cfg.n, line_capacity=B)
print(f"expected lines/query, unsorted layout: "
      f"{expected_cachelines_unsorted(params):8.0f}")
print(f"measured lines/query, unsorted layout: {measured_unsorted:8.0f}")
print(f"measured lines/query, sorted layout:   {measured_sorted:8.0f}  "
      f"({measured_sorted / measured_unsorted:.2f}x)")
print(f"worst-case bound after sorting:        "
      f"{expected_cachelines_sorted_bound(params):8.0f}")

# Per-dimension view: the most active dimensions collapse into a few
# contiguous runs, so their postings share lines.
print("\nrank   nnz    lines(unsorted)  lines(sorted)")
ranked = sorted(unsorted_index.lists, key=lambda j: -len(unsorted_index.lists[j][0]))
for rank, j in enumerate(ranked[:8], start=1):
    lu = distinct_lines(unsorted_index.lists[j][0], B)
    ls = distinct_lines(sorted_index.lists[j][0], B)
    print(f"{rank:>4} {len(unsorted_index.lists[j][0]):>6} {lu:>12} {ls:>14}")
