"""Fast approximate maximum-inner-product search over hybrid sparse+dense vectors.

The library pairs a cache-sorted pruned inverted index (sparse component) with
product-quantized codes scanned through 16-entry quantized lookup tables
(dense component), then repairs the approximation error by reordering a small
overfetched candidate set with residual stores.
"""

from .data import (
    BadMagicError,
    BadVersionError,
    FormatError,
    HybridDataset,
    HybridVector,
    SparseVector,
    SynthConfig,
    TruncatedFileError,
    generate_synthetic,
    hybrid_dot,
    load_dataset,
    normalize_sparse,
    save_dataset,
)
from .sparse import (
    Accumulator,
    CostModelParams,
    InvertedIndex,
    PruneThresholds,
    build_inverted,
    cache_sort,
    chernoff_prune_bound,
    expected_cachelines_sorted_bound,
    expected_cachelines_unsorted,
    measure_cachelines,
    prune_split,
    sparse_scan,
)
from .dense import (
    Codebooks,
    DenseIndex,
    PQCodes,
    QuantizedLUT,
    ScalarQuantResidual,
    WhiteningTransform,
    adc_table,
    azuma_error_bound,
    lut16_scan,
    lut16_scan_reference,
    pq_encode,
    quantize_lut,
    rate_distortion_bound,
    sq_decode,
    sq_encode,
    train_codebooks,
    whiten_apply,
    whiten_fit,
)
from .pipeline import (
    GapRecallReport,
    HybridIndex,
    HybridIndexConfig,
    SearchResult,
    build_index,
    gap_recall_check,
    load_index,
    save_index,
    search_batch,
    search_topk,
    select_topk,
)
from .harness import (
    BenchReport,
    BoundReport,
    RatingsMatrix,
    brute_force_topk,
    read_triplets,
    recall_at_h,
    run_benchmark,
    svd_embed,
    verify_bounds,
)

__version__ = "0.1.0"
