"""Multi-image-prompted multi-view diffusion and SDS 3D generation, desk scale."""

from .encoders import (
    EncoderConfig,
    EncoderStack,
    HiddenTokens,
    LocalTokens,
    PixelAutoencoder,
    PixelLatent,
    TextContext,
)
from .errors import (
    ConfigError,
    DivergenceError,
    NumericsError,
    ParseError,
    ShapeError,
)
from .controllers import (
    LocalContext,
    StackedFrames,
    build_local_context,
    stack_pixel_latents,
    unstack_views,
)
from .metrics import (
    ClassProbabilities,
    MetricReport,
    MetricResult,
    build_report,
    clip_image_score,
    clip_text_score,
    quality_inception_score,
)
from .mv_unet import (
    ContextCrossAttention,
    DenseFrameAttention,
    DenoiserOutput,
    MultiViewLatent,
    MultiViewModel,
    NoiseSchedule,
    ddim_sample,
    ddim_step,
)
from .pipeline import (
    RunManifest,
    generate_prompt_set,
    run,
    run_3d_generation,
    run_eval,
    run_mv_generation,
)
from .prompting import (
    CameraEmbedder,
    CameraEmbedding,
    CameraPose,
    ControllerConfig,
    ImagePrompt,
    PromptSet,
    ViewLabel,
    camera_pose,
    embed_camera,
    orthogonal_camera_rig,
    parse_controller_config,
    rig_pose,
)
from .sds_nerf import (
    ConvexPullGuidance,
    ModelGuidance,
    OracleNoiseGuidance,
    RadianceField,
    RaySamples,
    RenderConfig,
    SDSConfig,
    composite,
    optimize_nerf,
    render,
    sds_gradient,
)

__version__ = "0.1.0"
