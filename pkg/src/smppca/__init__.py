"""One-pass low-rank approximation of A^T B from a single streaming pass."""
from .matrix_core import (ConvergenceError, Entry, EntryStream, MatrixId, StreamConsumedError,
                          exact_product, spectral_norm, truncated_svd)
from .sketch import (SketchKind, SketchOperator, SketchSummary, ingest, ingest_dense, load_summary,
                     merge, save_summary)
from .estimate import EstimatorKind, estimate_block, estimate_dense, estimate_entry
from .sample import SampleDistribution, SampleSet, q_of, sample_binomial, sample_fast
from .waltmin import FactorPair, Partition, WaltminConfig, run_waltmin
from .pipeline import (EvalReport, PipelineConfig, Sampler, advise_parameters, evaluate,
                       lela_two_pass, norm_context, sketch_svd_baseline, smp_pca, smp_pca_dense,
                       smp_pca_from_summary)
from .generators import GeneratorKind, GeneratorSpec, generate

__version__ = "0.1.0"
