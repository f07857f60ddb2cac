"""countloop: single-image object counting and localization with a small
fully-convolutional classifier trained via iterative active learning."""

from .active_loop import (
    LabelDecision,
    LabelSets,
    Query,
    QueryBatch,
    Session,
    run_headless_session,
)
from .imgio import Image, RescaleTransform, load_image, rescale_for_window
from .matching import BoundingWindow, init_labels, max_suppress, ncc
from .metrics import ScoreReport, match_detections, score
from .network import (
    ClassifierState,
    ConvergenceFailure,
    NetworkConfig,
    apply_model,
    classify,
    select_capacity,
    train_to_labels,
)
from .oracle import GeneratorSpec, GroundTruth, SimulatedUser, generate_synthetic

__all__ = [
    "BoundingWindow",
    "ClassifierState",
    "ConvergenceFailure",
    "GeneratorSpec",
    "GroundTruth",
    "Image",
    "LabelDecision",
    "LabelSets",
    "NetworkConfig",
    "Query",
    "QueryBatch",
    "RescaleTransform",
    "ScoreReport",
    "Session",
    "SimulatedUser",
    "apply_model",
    "classify",
    "generate_synthetic",
    "init_labels",
    "load_image",
    "match_detections",
    "max_suppress",
    "ncc",
    "rescale_for_window",
    "run_headless_session",
    "score",
    "select_capacity",
    "train_to_labels",
]

__version__ = "0.1.0"
