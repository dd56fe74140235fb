"""Continual learning with cyclically scrolled weight importance.

The package trains one shared parameter store as N nested sub-networks
(slimmable widths); the block anchoring the smallest sub-network rotates at
every task boundary, so each task declares a fresh importance ranking over
the same weights before seeing any data. Regularization (EWC, MAS),
distillation (LwF) and herded exemplar replay compose with that mechanism.
"""

from .data import (
    LabeledDataset,
    Task,
    TaskStream,
    load_dataset,
    normalize_dataset,
    split_classes,
    synthetic_gaussian_tasks,
)
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    InputError,
    ParseError,
    ScrollNetError,
    TrainingDiverged,
)
from .metrics import (
    MetricsReport,
    average_accuracy,
    evaluate_all,
    evaluate_task_agnostic,
    evaluate_task_aware,
)
from .scrolling import (
    ScrollState,
    advance,
    initial_state,
    offset_for_task,
    ranking,
    state_for_task,
)
from .slimmable import (
    LayerSpec,
    SlimmableModel,
    active_indices,
    build_model,
    conv_spec,
    convnet_arch,
    linear_spec,
    load_model,
    mlp_arch,
    norm_spec,
    pool_spec,
    relu_spec,
    save_model,
)
from .strategies import (
    BatchGroup,
    ExemplarMemory,
    FisherState,
    MasImportanceState,
    TeacherSnapshot,
    consolidate,
    dynamic_loss,
    ewc_fisher,
    ewc_penalty,
    herding_select,
    lwf_loss,
    mas_importance,
    mas_penalty,
    rebalance_memory,
    replay_batch,
)
from .tensor import (
    SGD,
    Tensor,
    avgpool2d,
    batch_norm,
    conv2d,
    global_avg_pool,
    linear,
    maxpool2d,
    no_grad,
    relu,
    sgd_step,
    soft_cross_entropy,
    softmax_cross_entropy,
    take,
)
from .trainer import (
    RunState,
    StrategyConfig,
    TrainConfig,
    load_checkpoint,
    lr_at_epoch,
    new_run,
    run_sequence,
    save_checkpoint,
    train_task,
)

__version__ = "0.1.0"
