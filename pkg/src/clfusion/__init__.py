"""Cross-level fusion of object lists and multi-view camera features at desk scale."""

from .camera import CameraRig, default_rig, project_box
from .decoder import DecoderConfig, MaskMode, QdnDecoder, build_model, predict
from .features import RenderConfig, render_feature_grids
from .harness import ExperimentConfig, Variant, desk_benchmark, noise_sweep, report, run_experiment
from .masks import GaussianMaskParams, attention_bias, biased_attention, shared_mask_for_objects, single_target_mask
from .matching import hungarian_assign
from .metrics import evaluate
from .polg import PolgConfig, generate_object_list
from .scene import Bounds, ObjectList, ObjectRecord, Scene, SceneGenConfig, sample_random_scene

__version__ = "0.1.0"
