"""Two-stream (person crop + image context) gesture classification for artworks."""

from .config import Config, ModelConfig, TrainConfig, resolve_config
from .data import (
    BBox,
    DatasetManifest,
    ImageRecord,
    Issue,
    LabelMap,
    PersonInstance,
    class_distribution,
    extract_crop,
    make_example,
    parse_annotations,
    validate_manifest,
)
from .evaluation import (
    aggregate_runs,
    confusion_matrix,
    evaluate_split,
    macro_f1,
    per_class_f1,
    render_report,
)
from .inference import Detection, DetectionSet, GesturePrediction, load_detections, predict
from .model import BackboneSpec, FusionHeadConfig, TwoStreamModel, build_model, load_checkpoint, save_checkpoint
from .training import compute_class_weights, run_multi_seed, train, weighted_cross_entropy

__version__ = "0.1.0"
