"""Distributed conformal novelty detection with quantized model exchange."""

from .conformal import (
    ErrorMetrics,
    FastLSULog,
    PValueVector,
    RejectionSet,
    bh_procedure,
    empirical_pvalue,
    empirical_pvalues,
    fastlsu,
    fastlsu_actual_comm,
    fastlsu_comm_bound,
)
from .datagen import AgentDataset, SynthConfig, centroids, generate, novelty_mean
from .errors import (
    CorruptPayloadError,
    DistConformalError,
    InsufficientDataError,
    InvalidInputError,
    InvalidSpecError,
    InvalidSplitError,
)
from .experiments import AggregateRow, SweepSpec, emit_table, run_sweep, run_trials
from .network import (
    EpisodeConfig,
    Method,
    Trial,
    TrialOutcome,
    run_b2,
    run_b3,
    run_conservative,
    run_episode,
    run_model_exchange,
    split_blocks,
)
from .quantization import CommLedger, QuantizedModel, QuantSpec, dequantize, deserialize, quantize_model, serialize
from .scoring import ForestConfig, PUDataset, ScoreModel, build_pu_dataset, composite_scores, train_score_model

__version__ = "0.1.0"
