"""Plug-and-play posterior sampling for imaging inverse problems.

The sampler alternates an exactly integrated prior step (a stochastic
auto-encoder round trip through a generative consistency model) with an
implicit, proximal data-fidelity step. A stochastic-approximation outer loop
can additionally calibrate the conditioning vector of the prior by ascending
the marginal likelihood of the measurement.
"""

from splitlang.equiv_hr import (
    SubsampleOp,
    alias_free_downsample,
    compose_check,
    lift_kernel,
    verify_equivalence,
)
from splitlang.harness import (
    ExperimentConfig,
    RunRecord,
    demo_image,
    load_image,
    load_tensor,
    psnr,
    run_experiment,
    save_image,
    save_tensor,
)
from splitlang.operators import (
    ConvKernel,
    DegradationOp,
    Tensor,
    compose_ops,
    conv_op,
    downsample_op,
    identity_op,
    make_gaussian_kernel,
    make_motion_kernel,
    mask_op,
    op_apply,
    op_adjoint,
    op_pseudoinverse,
    phase_retrieval_op,
)
from splitlang.proximal import (
    ProxRequest,
    ProxResult,
    prox_apply,
    prox_cg,
    prox_diag,
    prox_freq,
    prox_nonlinear,
)
from splitlang.sae import (
    AnalyticGaussianPrior,
    NoiseSchedule,
    RemotePrior,
    consistency_apply,
    encode_stochastic,
    grad_logcond_c,
    make_schedule,
    sae_step,
)
from splitlang.sampler import (
    ChainTrace,
    LatinoConfig,
    default_timesteps,
    delta_schedule,
    latino_run,
    ula_run,
)
from splitlang.sapg import (
    PromptState,
    SapgConfig,
    chain_grad,
    gamma_schedule,
    latino_pro_run,
    project_ball,
)

__version__ = "0.1.0"

__all__ = [
    "AnalyticGaussianPrior",
    "ChainTrace",
    "ConvKernel",
    "DegradationOp",
    "ExperimentConfig",
    "LatinoConfig",
    "NoiseSchedule",
    "PromptState",
    "ProxRequest",
    "ProxResult",
    "RemotePrior",
    "RunRecord",
    "SapgConfig",
    "SubsampleOp",
    "Tensor",
    "alias_free_downsample",
    "chain_grad",
    "compose_check",
    "compose_ops",
    "lift_kernel",
    "verify_equivalence",
    "consistency_apply",
    "conv_op",
    "default_timesteps",
    "delta_schedule",
    "demo_image",
    "downsample_op",
    "encode_stochastic",
    "gamma_schedule",
    "grad_logcond_c",
    "identity_op",
    "latino_pro_run",
    "latino_run",
    "load_image",
    "load_tensor",
    "make_gaussian_kernel",
    "make_motion_kernel",
    "make_schedule",
    "mask_op",
    "op_adjoint",
    "op_apply",
    "op_pseudoinverse",
    "phase_retrieval_op",
    "project_ball",
    "prox_apply",
    "prox_cg",
    "prox_diag",
    "prox_freq",
    "prox_nonlinear",
    "psnr",
    "run_experiment",
    "sae_step",
    "save_image",
    "save_tensor",
    "ula_run",
]
