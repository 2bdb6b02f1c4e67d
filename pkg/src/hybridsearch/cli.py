"""Command-line front end: gen, prep-ratings, build, search, bench, verify, cost.

Every subcommand is deterministic for a fixed seed; only benchmark timing
columns depend on the wall clock.  Exit codes: 0 success, 1 runtime/verification
failure, 2 usage error (argparse), 3 missing file, 4 malformed file.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data as dt
from . import harness as hh
from . import pipeline as pl
from . import sparse as spi

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_MISSING = 3
EXIT_FORMAT = 4


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, default=None, help="stage-1 overfetch factor")
    p.add_argument("--beta", type=float, default=None, help="stage-2 retain factor")
    p.add_argument("--h", type=int, default=None, help="default result count")
    p.add_argument("--top-t", type=int, default=None,
                   help="postings kept per dimension in the sparse data index")
    p.add_argument("--pq-subspaces", type=int, default=None)
    p.add_argument("--pq-centers", type=int, default=None)
    p.add_argument("--no-whitening", action="store_true")
    p.add_argument("--exact-rerank", action="store_true",
                   help="final stage uses raw vectors (needs --data at search time)")
    p.add_argument("--sparse-weight", type=float, default=None)
    p.add_argument("--dense-weight", type=float, default=None)
    p.add_argument("--kmeans-iters", type=int, default=None)
    p.add_argument("--train-sample", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", type=str, default=None,
                   help="key=value file; explicit flags override it")


_CONFIG_KEYS = {
    "alpha": ("overfetch", float),
    "beta": ("retain", float),
    "h": ("h", int),
    "top_t": ("top_t", int),
    "pq_subspaces": ("pq_subspaces", int),
    "pq_centers": ("pq_centers", int),
    "whitening": ("use_whitening", lambda s: s.lower() not in ("0", "false", "no")),
    "exact_rerank": ("exact_final_rerank", lambda s: s.lower() in ("1", "true", "yes")),
    "sparse_weight": ("sparse_weight", float),
    "dense_weight": ("dense_weight", float),
    "kmeans_iters": ("kmeans_iters", int),
    "train_sample": ("train_sample", int),
    "seed": ("seed", int),
}


def _build_config(args) -> pl.HybridIndexConfig:
    values: dict = {}
    if args.config:
        with open(args.config) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise dt.FormatError(f"{args.config}:{lineno}: expected key=value")
                key, _, raw = line.partition("=")
                key = key.strip()
                if key not in _CONFIG_KEYS:
                    raise dt.FormatError(f"{args.config}:{lineno}: unknown key {key!r}")
                field, conv = _CONFIG_KEYS[key]
                values[field] = conv(raw.strip())
    flag_map = [
        ("alpha", "overfetch"), ("beta", "retain"), ("h", "h"), ("top_t", "top_t"),
        ("pq_subspaces", "pq_subspaces"), ("pq_centers", "pq_centers"),
        ("sparse_weight", "sparse_weight"), ("dense_weight", "dense_weight"),
        ("kmeans_iters", "kmeans_iters"), ("train_sample", "train_sample"),
        ("seed", "seed"),
    ]
    for flag, field in flag_map:
        v = getattr(args, flag)
        if v is not None:
            values[field] = v
    if args.no_whitening:
        values["use_whitening"] = False
    if args.exact_rerank:
        values["exact_final_rerank"] = True
    return pl.HybridIndexConfig(**values)


def _cmd_gen(args) -> int:
    cfg = dt.SynthConfig(
        n=args.n, d_sparse=args.d_sparse, d_dense=args.d_dense,
        zipf_alpha=args.zipf_alpha, nnz_scale=args.nnz_scale,
        n_queries=args.n_queries, seed=args.seed)
    dataset, queries = dt.generate_synthetic(cfg)
    dt.save_dataset(dataset, args.out)
    if args.queries_out:
        dt.save_dataset(queries, args.queries_out)
    print(f"wrote {dataset.n} points ({dataset.d_sparse} sparse + "
          f"{dataset.d_dense} dense dims) to {args.out}")
    return EXIT_OK


def _cmd_prep_ratings(args) -> int:
    ratings = hh.read_triplets(args.input)
    hybrid = hh.svd_embed(ratings, rank=args.rank, dense_scale=args.dense_scale,
                          seed=args.seed)
    rng = np.random.default_rng(args.seed)
    nq = min(args.n_queries, hybrid.n)
    qrows = np.sort(rng.choice(hybrid.n, size=nq, replace=False))
    mask = np.ones(hybrid.n, dtype=bool)
    mask[qrows] = False
    drows = np.flatnonzero(mask)
    dataset = dt.HybridDataset(hybrid.sparse[drows], hybrid.dense[drows])
    queries = dt.HybridDataset(hybrid.sparse[qrows], hybrid.dense[qrows])
    dt.save_dataset(dataset, args.out)
    if args.queries_out:
        dt.save_dataset(queries, args.queries_out)
    print(f"embedded {ratings.n_users} users x {ratings.n_items} items -> "
          f"{dataset.n} datapoints + {queries.n} queries (rank {args.rank})")
    return EXIT_OK


def _cmd_build(args) -> int:
    dataset = dt.load_dataset(args.data)
    config = _build_config(args)
    index = pl.build_index(dataset, config)
    pl.save_index(index, args.out)
    size = os.path.getsize(args.out)
    print(f"built index over {index.n} points -> {args.out} ({size} bytes)")
    return EXIT_OK


def _cmd_search(args) -> int:
    dataset = dt.load_dataset(args.data) if args.data else None
    index = pl.load_index(args.index, dataset=dataset)
    queries = dt.load_dataset(args.queries)
    if queries.n == 0:
        raise ValueError("query file holds no vectors")
    if args.query_index is not None and not (0 <= args.query_index < queries.n):
        raise ValueError(f"--query-index out of range [0, {queries.n})")
    rows = [args.query_index] if args.query_index is not None else range(queries.n)
    for i in rows:
        if len(rows) > 1 or args.query_index is None and queries.n > 1:
            print(f"# query {i}")
        result = pl.search_topk(index, queries.point(i), args.h)
        for pid, score in zip(result.ids, result.scores):
            print(f"{pid},{score:.6f}")
    return EXIT_OK


def _cmd_bench(args) -> int:
    dataset = dt.load_dataset(args.data)
    queries = dt.load_dataset(args.queries)
    methods = args.methods.split(",") if args.methods else None
    report = hh.run_benchmark(dataset, queries, methods=methods, h=args.h,
                              reps=args.reps, seed=args.seed,
                              dataset_name=args.dataset_name)
    text = report.to_csv() if args.output_format == "csv" else report.to_table()
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
        print(f"wrote report to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_verify(args) -> int:
    reports = hh.verify_bounds(args.suite, trials=args.trials, seed=args.seed,
                               threads=args.threads)
    ok = True
    for rep in reports:
        print(rep.line())
        ok &= rep.passed
    return EXIT_OK if ok else EXIT_FAIL


def _cmd_cost(args) -> int:
    cfg = dt.SynthConfig(n=args.n, d_sparse=args.d_sparse, d_dense=0,
                         zipf_alpha=args.zipf_alpha, nnz_scale=args.nnz_scale,
                         n_queries=args.queries, seed=args.seed)
    P = cfg.activity()
    params = spi.CostModelParams(P=P, Q=cfg.query_activity(), n=args.n,
                                 line_capacity=args.line_capacity)
    B = args.line_capacity
    measured_u = np.zeros(args.d_sparse)
    measured_s = np.zeros(args.d_sparse)
    mean_u = mean_s = 0.0
    for seed in range(args.seed, args.seed + args.seeds):
        cfg_seed = dt.SynthConfig(n=args.n, d_sparse=args.d_sparse, d_dense=0,
                                  zipf_alpha=args.zipf_alpha,
                                  nnz_scale=args.nnz_scale,
                                  n_queries=args.queries, seed=seed)
        dataset, queries = dt.generate_synthetic(cfg_seed)
        unsorted_idx = spi.build_inverted(dataset.sparse, np.arange(dataset.n))
        order = spi.cache_sort(dataset.sparse)
        sorted_idx = spi.build_inverted(dataset.sparse, order)
        qs = [queries.point(i).sparse for i in range(queries.n)]
        mean_u += spi.measure_cachelines(unsorted_idx, qs, B) / args.seeds
        mean_s += spi.measure_cachelines(sorted_idx, qs, B) / args.seeds
        for j, (ids, _) in unsorted_idx.lists.items():
            measured_u[j] += spi.distinct_lines(ids, B) / args.seeds
        for j, (ids, _) in sorted_idx.lists.items():
            measured_s[j] += spi.distinct_lines(ids, B) / args.seeds
    expect_u = spi.expected_cachelines_unsorted(params)
    bound_s = spi.expected_cachelines_sorted_bound(params)
    lines = ["dim_rank,P,Q,expected_lines_unsorted,sorted_bound_lines,"
             "measured_lines_unsorted,measured_lines_sorted"]
    blocks = args.n / B
    for j in range(min(args.d_sparse, args.max_dims)):
        pj, qj = params.P[j], params.Q[j]
        e_u = (1 - (1 - pj) ** B) * blocks
        ln = pj * args.n / B
        if ln > 0 and np.log2(ln) >= j + 1:
            e_s = 2.0 ** (j + 1) * np.ceil(ln / 2.0 ** (j + 1))
        else:
            e_s = e_u
        lines.append(f"{j + 1},{pj:.6g},{qj:.6g},{e_u:.3f},{e_s:.3f},"
                     f"{measured_u[j]:.3f},{measured_s[j]:.3f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    print(f"# per-query totals: measured unsorted={mean_u:.1f} sorted={mean_s:.1f} "
          f"expected unsorted={expect_u:.1f} sorted bound={bound_s:.1f}",
          file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="hybridsearch",
        description="Approximate maximum-inner-product search over hybrid "
                    "sparse+dense vectors")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic hybrid dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d-sparse", type=int, default=10_000)
    p.add_argument("--d-dense", type=int, default=64)
    p.add_argument("--zipf-alpha", type=float, default=2.0)
    p.add_argument("--nnz-scale", type=float, default=0.5)
    p.add_argument("--n-queries", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--queries-out", default=None)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("prep-ratings",
                       help="embed 'user item rating' triplets into a hybrid dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--rank", type=int, default=300)
    p.add_argument("--dense-scale", type=float, default=None)
    p.add_argument("--n-queries", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--queries-out", default=None)
    p.set_defaults(func=_cmd_prep_ratings)

    p = sub.add_parser("build", help="build a hybrid index from a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_build)

    p = sub.add_parser("search", help="query a built index, printing id,score lines")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--data", default=None,
                   help="original dataset (enables exact final rerank)")
    p.add_argument("--h", type=int, default=20)
    p.add_argument("--query-index", type=int, default=None,
                   help="run a single query from the file")
    p.set_defaults(func=_cmd_search)

    p = sub.add_parser("bench", help="run the recall/latency benchmark suite")
    p.add_argument("--data", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--methods", default=None,
                   help=f"comma list from {sorted(hh.METHODS)}")
    p.add_argument("--h", type=int, default=20)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset-name", default="dataset")
    p.add_argument("--output-format", choices=("csv", "table"), default="table")
    p.add_argument("--out", default=None)
    p.add_argument("--threads", type=int, default=os.cpu_count())
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("verify", help="Monte-Carlo verification of the analytic bounds")
    p.add_argument("--suite", choices=("prop1", "prop2", "prop3", "prop4", "all"),
                   default="all")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count())
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("cost", help="cache-line cost model vs. measurement (CSV)")
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--d-sparse", type=int, default=10_000)
    p.add_argument("--zipf-alpha", type=float, default=2.0)
    p.add_argument("--nnz-scale", type=float, default=0.5)
    p.add_argument("--line-capacity", type=int, default=16)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-dims", type=int, default=64,
                   help="emit at most this many leading dimensions")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_cost)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: missing file: {e.filename or e}", file=sys.stderr)
        return EXIT_MISSING
    except dt.FormatError as e:
        print(f"error: malformed file: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except (ValueError, MemoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
