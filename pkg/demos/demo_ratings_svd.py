"""Collaborative-filtering style ingestion: turn user-item-rating triplets
into hybrid vectors (raw rating rows sparse, truncated-SVD embedding dense)
and benchmark the methods on them.

Run:  python3 demos/demo_ratings_svd.py
"""

import numpy as np

from hybridsearch import HybridDataset, read_triplets, run_benchmark, svd_embed

rng = np.random.default_rng(0)
n_users, n_items = 3_000, 800

# A small planted-taste ratings matrix: each user mixes a few latent genres.
tastes = rng.dirichlet(np.ones(8), size=n_users)
genres = rng.dirichlet(np.ones(n_items // 8), size=8)
lines = []
for u in range(n_users):
    seen = rng.choice(n_items, size=rng.integers(15, 40), replace=False)
    for i in seen:
        affinity = tastes[u] @ genres[:, i % genres.shape[1]]
        rating = int(np.clip(np.round(1 + 4 * affinity * 8), 1, 5))
        lines.append(f"{u} {i} {rating}")

ratings = read_triplets(lines)
print(f"{ratings.n_users} users x {ratings.n_items} items, "
      f"{len(ratings.ratings)} ratings")

hybrid = svd_embed(ratings, rank=32, seed=0)
print(f"hybrid rows: {hybrid.d_sparse} sparse dims + {hybrid.d_dense} dense "
      f"dims (scaled left singular vectors)")

# Hold out 50 users as queries, search for similar users among the rest.
qrows = np.sort(rng.choice(hybrid.n, size=50, replace=False))
mask = np.ones(hybrid.n, dtype=bool)
mask[qrows] = False
dataset = HybridDataset(hybrid.sparse[np.flatnonzero(mask)],
                        hybrid.dense[np.flatnonzero(mask)])
queries = HybridDataset(hybrid.sparse[qrows], hybrid.dense[qrows])

report = run_benchmark(dataset, queries, h=10, reps=1, seed=0,
                       methods=["hybrid", "sparse-inverted-index",
                                "sparse-only-no-reorder", "dense-pq-reorder-10k",
                                "hamming-512"],
                       dataset_name="planted-ratings")
print()
print(report.to_table())
