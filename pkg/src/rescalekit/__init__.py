"""Training-free receptive-field adaptation toolkit for convolutional
denoisers: re-dilated and dispersed convolution, noise-damped guidance,
tile-synchronized group normalization, and a deterministic sampler to
exercise them end to end."""

from . import runtime as _runtime  # noqa: F401  (pins BLAS pools on import)

from .dispersion import (
    CalibrationSet,
    DispersionOperator,
    disperse_kernel,
    dispersed_conv,
    evaluate_objective,
    operator_residuals,
    solve_dispersion,
    solve_for_kernel,
)
from .dten import read_container, read_dten, write_container, write_dten
from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    NumericalError,
    ParameterError,
    RescalekitError,
    SingularSystemError,
    TruncationError,
)
from .guidance import noise_damped_cfg, standard_cfg
from .normalization import GroupNormStats, group_norm
from .plans import (
    VALID_BLOCKS,
    AdaptationPlan,
    DispersedSpec,
    RedilatedSpec,
    default_operator,
    resolve_operators,
)
from .redilation import (
    DilationSchedule,
    StretchInfo,
    fractional_redilated_conv,
    redilated_conv,
    schedule_eval,
    stretch_params,
)
from .sampler import (
    NoiseSchedule,
    SampleResult,
    SamplerConfig,
    StepRecord,
    inference_timesteps,
    predicted_x0,
    sample,
)
from .tensorcore import (
    Kernel,
    PadSpec,
    conv2d,
    dilate_kernel,
    footprint_count,
    footprint_width,
    impulse_response,
    interp,
    interp_to,
)
from .tiling import (
    TileLayout,
    TiledResult,
    TinyDecoder,
    synchronized_stats,
    tiled_apply,
)
from .unet import (
    AttentionParams,
    UNet,
    UNetConfig,
    WeightStore,
    init_toy_weights,
    plain_attention,
    redilated_attention,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptationPlan",
    "AttentionParams",
    "CalibrationSet",
    "ConfigError",
    "DilationSchedule",
    "DimensionError",
    "DispersedSpec",
    "DispersionOperator",
    "FormatError",
    "GroupNormStats",
    "Kernel",
    "NoiseSchedule",
    "NumericalError",
    "PadSpec",
    "ParameterError",
    "RedilatedSpec",
    "RescalekitError",
    "SampleResult",
    "SamplerConfig",
    "SingularSystemError",
    "StepRecord",
    "StretchInfo",
    "TileLayout",
    "TiledResult",
    "TinyDecoder",
    "TruncationError",
    "UNet",
    "UNetConfig",
    "VALID_BLOCKS",
    "WeightStore",
    "conv2d",
    "default_operator",
    "dilate_kernel",
    "disperse_kernel",
    "dispersed_conv",
    "evaluate_objective",
    "footprint_count",
    "footprint_width",
    "fractional_redilated_conv",
    "group_norm",
    "impulse_response",
    "inference_timesteps",
    "interp",
    "interp_to",
    "noise_damped_cfg",
    "operator_residuals",
    "plain_attention",
    "predicted_x0",
    "read_container",
    "read_dten",
    "redilated_attention",
    "redilated_conv",
    "resolve_operators",
    "sample",
    "schedule_eval",
    "solve_dispersion",
    "solve_for_kernel",
    "standard_cfg",
    "stretch_params",
    "synchronized_stats",
    "tiled_apply",
    "write_container",
    "write_dten",
]
