"""Deterministic desk-scale strip-attention backbone with cost accounting,
gradient verification, and a benchmarking CLI."""

from .attention import (Attention, AttnShapes, SpatialReduce, csr_spatial_reduce,
                        generalized_attention, grid_for_tokens, mhsa_params,
                        reference_mhsa, strip_attention, strip_params)
from .backbone import (HEADS, ORDERED_VARIANTS, SR_RATIOS, VARIANTS, HybridBlock,
                       S2AFormer, Stage, StageConfig, VariantConfig, build_variant,
                       load_manifest, read_manifest, save_manifest,
                       synthetic_blobs, train_toy)
from .bench import CSV_HEADER, BenchRecord, bench_attention, nearest_rank
from .blocks import (LocalInteraction, Mlp, PatchEmbed, SqueezeExcite, Stem,
                     from_tokens, to_tokens)
from .costs import (CostReport, FormulaInputs, InequalityReport, ReconcileReport,
                    attention_macs, bound_a_macs_formula, build_cost_report,
                    count_macs, count_params, mhsa_macs_formula, reconcile_ssa,
                    ssa_macs_breakdown, ssa_macs_formula, stage_formula_inputs,
                    verify_inequality)
from .errors import (ConfigError, ContractError, DimensionError, GraphStateError,
                     NumericError, ParameterError, S2AError)
from .gradcheck import finite_diff_grad, max_rel_err, module_gradcheck
from .nn import BatchNormInference, Conv2d, LayerNorm, Linear, Module
from .rng import (BENCH_STREAM, DATA_STREAM, DROPOUT_STREAM, INIT_STREAM, RngStream)
from .tensor import DTYPES, MacCounter, Tensor, backward

__version__ = "0.1.0"
