"""samod: question-modulated self-attention in small residual convnets.

A self-contained float64 autodiff library plus an experiment bench: a
synthetic grid-of-shapes question-answering dataset, a configurable
residual backbone with attention placements, two question-conditioning
mechanisms for those attention modules, Adamax training, and exact
parameter accounting for large named geometries.
"""

from .attention import AttentionMaps, SelfAttention, sa_param_count
from .config import ConfigError, RunConfig, load_config, parse_config, parse_placements
from .encoder import QuestionEncoder, Vocabulary, tokenize, tokenize_batch
from .model import (
    ARCHS,
    VqaModel,
    analytic_modulation_count,
    analytic_sa_count,
    count_parameters,
    parameter_buckets,
)
from .modulation import BetaModulator, GammaModulator, modulated_sa_forward, modulation_param_count
from .nn import BatchNorm2d, Conv2d, Initializer, Linear, Module, Parameter
from .resnet import Backbone, NetworkPlan, PlanError, ResidualBlock, StageSpec, build_backbone, desk_plan
from .shapeworld import (
    ANSWERS,
    FAMILIES,
    GenerationError,
    Sample,
    Scene,
    SceneObject,
    evaluate_question,
    generate,
    majority_rate,
    parse_question,
    read_dataset,
    render,
    write_dataset,
)
from .tensor import ShapeError, Tape, Tensor, active_tape, backward, no_grad
from .training import (
    Adamax,
    DivergenceError,
    PreparedData,
    RunReport,
    build_model,
    evaluate_model,
    prepare_data,
    run_training,
    sweep,
    sweep_table,
    train_model,
)

__version__ = "0.1.0"
