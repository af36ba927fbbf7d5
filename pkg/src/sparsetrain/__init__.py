"""sparsetrain: memory-budgeted sparse-update fine-tuning for small CNNs.

The package splits into a numpy compute stack (ops, graph, engine), planning
under a byte budget (planner), structured pruning (pruning), the training
loop (training), and I/O (checkpoint, data, kvfile, reporting, cli).
"""

from .checkpoint import load_model, save_model
from .data import LabeledDataset, load_cifar10_binary, synth_task_pair
from .engine import BlockPruneConfig, backward, forward, loss_and_grads
from .errors import (
    BudgetError,
    CheckpointError,
    ConfigError,
    DatasetError,
    GraphError,
    PruningError,
    ScheduleError,
    ShapeError,
    SparseTrainError,
)
from .graph import LayerNode, ModelGraph
from .models import mobilenet_v2, toy_cnn
from .planner import (
    MemoryModel,
    ScheduleConfig,
    ScheduleState,
    UpdatePlan,
    classifier_plan,
    dynamic_coverage,
    footprint_report,
    full_plan,
    plan_selection,
    schedule_step,
)
from .pruning import (
    PatternLibrary,
    SparsityProfile,
    assign_layer_sparsity,
    build_dependency_groups,
    channel_prune,
    pattern_prune,
    sparsity_report,
)
from .training import TrainConfig, TrainResult, evaluate, fine_tune

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "load_model",
    "save_model",
    "LabeledDataset",
    "load_cifar10_binary",
    "synth_task_pair",
    "BlockPruneConfig",
    "forward",
    "backward",
    "loss_and_grads",
    "SparseTrainError",
    "ShapeError",
    "GraphError",
    "BudgetError",
    "ScheduleError",
    "PruningError",
    "CheckpointError",
    "DatasetError",
    "ConfigError",
    "LayerNode",
    "ModelGraph",
    "toy_cnn",
    "mobilenet_v2",
    "MemoryModel",
    "UpdatePlan",
    "ScheduleConfig",
    "ScheduleState",
    "plan_selection",
    "full_plan",
    "classifier_plan",
    "footprint_report",
    "schedule_step",
    "dynamic_coverage",
    "PatternLibrary",
    "SparsityProfile",
    "build_dependency_groups",
    "channel_prune",
    "assign_layer_sparsity",
    "pattern_prune",
    "sparsity_report",
    "TrainConfig",
    "TrainResult",
    "fine_tune",
    "evaluate",
]
