"""gridsr: 2x statistical downscaling of gridded geophysical fields.

A self-contained engine: float64 autodiff tensors, synthetic multi-variable
field stacks, a windowed-attention transformer and residual-CNN downscaler
trained with an MSE + mass-conservation loss, and an evaluation harness
(RMSE / PSNR / SSIM / conservation gap / carbon estimate) with zero-shot
cross-resolution inference.
"""

from .errors import ConfigError, FormatError, GridSRError, NumericsError, ShapeError
from .fields import (
    ALL_VARS,
    SURFACE_VARS,
    FieldStack,
    GridField,
    NormStats,
    VariableId,
    apply_norm,
    coarsen,
    coarsen_stack,
    coarsen_values,
    fit_norm,
    invert_norm,
    load_grid,
    save_grid,
    synth_grf,
    synth_stack,
)
from .models import (
    Checkpoint,
    ModelSpec,
    bilinear_upsample,
    forward,
    init_params,
    load_checkpoint,
    predict,
    resnet_forward,
    save_checkpoint,
    vit_forward,
)
from .tensor import Tensor
from .training import Adam, LossConfig, TrainConfig, mass_loss, mse_loss, total_loss, train
from .evaluation import (
    CarbonConfig,
    EvalReport,
    conservation_gap,
    estimate_carbon,
    evaluate,
    psnr,
    rmse,
    ssim,
)

__version__ = "0.1.0"
