"""Momentum-guided video diffusion and iterative Gaussian-splat reconstruction."""

from .core import (
    Camera,
    GaussianPrimitive,
    GaussianScene,
    ImageFrame,
    InvalidParameterError,
    LatentVideo,
    PipelineConfig,
    SceneSplatError,
    Trajectory,
    VideoClip,
    covariance_matrix,
    validate_scene,
)
from .cascade import PixelMomentumField, cascade_blend, enhance_window, pixel_momentum_field
from .diffusion import (
    IdentityCodec,
    LatentMomentumField,
    NoiseSchedule,
    PatchCodec,
    build_schedule,
    gaussian_score_denoiser,
    latent_momentum_coefficients,
    momentum_reverse_step,
    oracle_denoiser,
    q_sample,
    reference_pool,
    sample_ancestral,
    sample_phi,
    train_toy_denoiser,
    vanilla_reverse_step,
)
from .metrics import gs_loss, psnr, ssim
from .optimize import OptimizeConfig, densify_prune_reset, optimize_scene
from .pipeline import (
    FrameStore,
    RGBDInput,
    evaluate,
    init_scene_from_rgbd,
    make_trajectory,
    run_pipeline,
    window_indices,
)
from .render import (
    RenderStats,
    ScaleMap,
    SceneGradients,
    Splat2D,
    project,
    render_color,
    render_gradients,
    render_scale_map,
    render_video,
)
from .rng import NoiseSource

__version__ = "0.1.0"
