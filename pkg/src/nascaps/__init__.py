"""Hardware-aware multi-objective architecture search for capsule networks."""

from .genotype import (
    Genotype,
    LayerDescriptor,
    LayerKind,
    ParseError,
    RejectedConfiguration,
    SearchSpace,
    Violation,
    deserialize,
    expand,
    genotype_id,
    random_genotype,
    repair,
    serialize,
    validate,
)
from .hwmodel import (
    CostReport,
    HardwareConfig,
    calibrate,
    estimate,
    layer_cost_params,
    layer_cycles,
    layer_memory_accesses,
    routing_cost_params,
)
from .nsga import (
    FitnessVector,
    Individual,
    SearchConfig,
    SearchResult,
    crossover,
    crowding_distance,
    dominates,
    mutate,
    non_dominated_sort,
    run_search,
)
from .evaluation import (
    EvaluationCache,
    EvaluationRequest,
    EvaluationResult,
    FitnessEvaluator,
    SurrogateBackend,
    TrainerBridge,
    BridgePool,
    surrogate_accuracy,
)
from .analysis import (
    AccuracyTrace,
    epoch_correlation_table,
    hypervolume,
    pearson,
    pick_pareto,
)
from .presets import PRESETS, load_preset

__version__ = "0.1.0"
