"""Speculative decoding with token-tree verification on small numpy transformers."""

from .boost_tuning import (
    BoostPool,
    PromptSample,
    collective_boost_tune,
    generate_samples,
    matching_length,
    ngram_factory,
    pool_coverage,
)
from .engine import (
    GenerationRequest,
    RunMetrics,
    compare_equivalence,
    run_incremental,
    run_speculative,
)
from .scheduler import (
    CostProfile,
    LearnedScheduler,
    MatchPredictor,
    TrainSample,
    choose_config,
    collect_samples,
    measure_cost_profile,
    mlp_forward,
    mlp_train,
)
from .speculator import (
    ALL_CONFIGS,
    NgramSSM,
    NgramTable,
    SpecConfig,
    TransformerSSM,
    beam_speculate,
    ngram_fit,
    speculate_tree,
)
from .token_tree import TokenTree, ancestors, dfs_chains, merge_sequences, verify
from .transformer import (
    KVCache,
    ModelConfig,
    ModelWeights,
    attention,
    chain_attention_step,
    decode_incremental,
    final_hidden,
    init_random_weights,
    prefill,
    tree_parallel_decode,
)

__version__ = "0.1.0"

__all__ = [
    "ALL_CONFIGS",
    "ancestors",
    "attention",
    "beam_speculate",
    "BoostPool",
    "chain_attention_step",
    "choose_config",
    "collect_samples",
    "collective_boost_tune",
    "compare_equivalence",
    "CostProfile",
    "decode_incremental",
    "dfs_chains",
    "final_hidden",
    "generate_samples",
    "GenerationRequest",
    "init_random_weights",
    "KVCache",
    "LearnedScheduler",
    "matching_length",
    "MatchPredictor",
    "measure_cost_profile",
    "merge_sequences",
    "mlp_forward",
    "mlp_train",
    "ModelConfig",
    "ModelWeights",
    "ngram_factory",
    "ngram_fit",
    "NgramSSM",
    "NgramTable",
    "pool_coverage",
    "prefill",
    "PromptSample",
    "run_incremental",
    "run_speculative",
    "RunMetrics",
    "SpecConfig",
    "speculate_tree",
    "TokenTree",
    "TrainSample",
    "TransformerSSM",
    "tree_parallel_decode",
    "verify",
]
