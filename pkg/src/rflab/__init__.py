"""Rectified-flow distillation toolkit: RFDS, iRFDS and RFDS-Rev on toy data."""

from .distill import (
    DistillConfig,
    IdentityGenerator,
    LinearGenerator,
    RotationViewGenerator,
    StepRule,
    flow_residual,
    irfds_grad,
    irfds_invert,
    isds_grad,
    rfds_grad,
    rfds_grad_full,
    rfds_optimize,
    rfds_rev_optimize,
    sds_grad,
)
from .fields import PassCounters, cfg_velocity
from .interpolant import Schedule, ScheduleKind, interpolate, schedule_eval, velocity_target
from .net import NetConfig, TrainConfig, VelocityNet, reflow_finetune, train_flow_matching
from .oracle import (
    GaussianMixture,
    MixtureScoreField,
    MixtureVelocityField,
    BridgedVelocityField,
    oracle_score,
    oracle_velocity,
    score_to_velocity,
    velocity_to_score,
)
from .sampler import SamplerConfig, euler_invert, euler_sample, euler_step, partial_insert_sample, straightness

__version__ = "0.1.0"
