"""Invariant prediction across environments via residual independence.

Learns predictors whose residuals are independent of (features, environment)
using HSIC, with normalizing-flow, additive-noise and classification
objectives, plus the synthetic SCM benchmark and baselines to evaluate
parent detection and domain generalization.
"""

from .autodiff import Tensor, concat, stack_scalars, zero_grad
from .losses import (
    KernelSpec,
    complexity_loss,
    cross_entropy,
    flow_nll,
    hsic,
    hsic_permutation_threshold,
    wasserstein1d,
)
from .flow import MtaFlowStack, MtaLayer
from .models import GateVector, Mlp, classification_residual, gate_apply
from .optim import AdamState, adam_step, lr_schedule
from .scm import (
    EnvDataset,
    ScmSetting,
    SettingData,
    enumerate_settings,
    generate_setting_data,
    make_setting,
    mechanism_eval,
    sample_environment,
)
from .training import (
    RunReport,
    TrainConfig,
    predict,
    train_anm,
    train_classifier,
    train_flow,
)
from .baselines import IcpResult, cerm_train, icp_linear

__version__ = "0.1.0"
