"""Hybrid foveated volume rendering: a Monte Carlo path tracer streams
posed foveal frames with depth while a rapidly regenerated Gaussian-splat
model covers the periphery; a compositor stitches the two with depth-guided
reprojection, and a binary protocol connects viewer, tracer, and trainer."""

from .camera import Camera, fibonacci_sphere_cameras, look_at, orbit_cameras, yaw_camera
from .compositor import (
    CompositeSettings,
    FrameSchedule,
    ReprojectedFoveal,
    ReprojectionGrid,
    composite,
    cutout_gaussians,
    reconstruct_world,
    render_display_frame,
    render_peripheral,
    reproject,
    select_latency_mode,
)
from .metrics import (
    MaskedMetrics,
    UndefinedMetricError,
    compute_masked_metrics,
    foveal_crop,
    masked_psnr,
    masked_ssim,
    percentiles,
)
from .pathtracer import (
    ColoredPoint,
    DenoiseSettings,
    FoveatedFrame,
    RenderSettings,
    compute_albedo,
    denoise,
    first_significant_hit,
    generate_point_cloud,
    render,
)
from .rasterizer import RasterOutput, SplatGradients, rasterize, rasterize_alpha_trained, rasterize_backward
from .splats import (
    Gaussian,
    RawSplats,
    SplatModel,
    apply_viewer_boost,
    compute_settings_hash,
    deserialize,
    load_model,
    save_model,
    serialize,
)
from .training import (
    TrainConfig,
    TrainView,
    ViewGate,
    compute_loss,
    initialize_model,
    model_view_mpsnr,
    refine_model,
    save_checkpoint,
    should_add_view,
    simplify,
    train_view_from_frame,
)
from .volume import (
    EnvironmentMap,
    MalformedHeaderError,
    NonFiniteDataError,
    SizeMismatchError,
    TransferFunction,
    Volume,
    VolumeFormatError,
    load_transfer_function,
    load_volume,
    make_procedural_volume,
    sample_density,
    save_transfer_function,
    save_volume,
)

__version__ = "0.1.0"
