"""featlab: a deterministic laboratory for invariant vs spurious feature
learning on the two-bit data model.

Library layers:
  data       two-bit multi-environment datasets
  cnn        the two-layer CNN and its feature probes
  objectives ERM, penalized invariance, DRO+retention losses
  theory     population recursion, closed-form fixed point, kernel
  dynamics   GD trainer and verification pipelines
  mlp, feat  featurizer/classifier nets and augmented training rounds
  io, plots  artifact serialization and optional figures
  cli        command-line front end
"""
from .data import (
    EnvironmentSpec,
    GroupCounts,
    TwoBitDataset,
    TwoBitSample,
    group_counts,
    sample_dataset,
    sample_test_set,
)
from .cnn import Activation, CnnParams, FeatureProbe, init_cnn, logit, logits, probe_features
from .objectives import (
    LossReport,
    PenaltyVector,
    erm_loss_grad,
    feat_objective,
    irmv1_loss_grad,
    irmv1_penalty,
)
from .theory import (
    FixedPoint,
    IrmKernelDiag,
    RecursionState,
    closed_form_fixed_point,
    eta_window,
    irm_kernel,
    step_recursion,
)
from .dynamics import TrainConfig, TrajectoryRecord, run_gd
from .feat import FeatConfig, FeatResult, evaluate, partition_by_correctness, run_feat, run_ifeat

__version__ = "0.1.0"
