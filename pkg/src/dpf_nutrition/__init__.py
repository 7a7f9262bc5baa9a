"""RGB-D food nutrition estimation with multi-scale cross-modal attention fusion."""

from .dataset import (
    NUTRIENTS,
    AugmentConfig,
    DishRecord,
    IngredientRecord,
    NutrientVector,
    RGBDSample,
    SplitManifest,
    augment,
    build_split,
    load_sample,
    parse_metadata,
    serialize_metadata,
)
from .depth import (
    DepthMap,
    DepthProvider,
    DepthProviderConfig,
    normalize_depth,
    predict_depth,
    reassemble_concatenate,
    resample,
)
from .errors import *  # noqa: F401,F403
from .evaluation import MetricsReport, evaluate, mae, pmae, run_ablation, write_report
from .explain import Heatmap, grad_cam, render_depth
from .model import (
    ABLATION_INDEX,
    CrossModalAttention,
    FusionNet,
    ModelConfig,
    MultiScaleFusion,
    build_model,
    cab_fuse,
    channel_attention,
    multiscale_fuse,
    spatial_attention,
)
from .synthetic import SyntheticSceneSpec, generate_synthetic, synthetic_dataset
from .training import (
    Checkpoint,
    SubtaskLosses,
    TrainConfig,
    fit,
    load_checkpoint,
    save_checkpoint,
    subtask_loss,
    total_loss,
)

__version__ = "0.1.0"
