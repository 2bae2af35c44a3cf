"""Machine-assisted image annotation toolkit.

Segments proposed by a model (or the synthetic generator) are edited
through add / remove / change-label / change-depth actions under
micro-action cost accounting; a deterministic greedy annotator simulates
the editing loop against ground truth for benchmarking.
"""
from .engine import (
    ActionRecord,
    ActiveEntry,
    AnnotationSession,
    CandidateList,
    MicroActionLedger,
    ProposalSet,
    Rendering,
    Segment,
    SessionConfig,
    auto_initialize,
    new_session,
    render_hash,
    replay_log,
)
from .labels import Label, STUFF, THING
from .masks import Canvas, Mask, Point, SpatialMoments, contains, decode, encode, iou, mahalanobis, moments, rasterize
from .metrics import (
    CostCurve,
    GroundTruthImage,
    QualityReport,
    aggregate_curve,
    evaluate_quality,
    labelme_polygon_cost,
    panoptic_quality,
    pixel_agreement,
    recall_at_iou,
)
from .simulator import ActionTrace, SimRng, build_candidate_pool, sample_click, simulate_image, step
from .synth import NoiseConfig, default_catalog, oracle_proposals, random_ground_truth, synthesize

__version__ = "0.1.0"

__all__ = [
    "ActionRecord",
    "ActionTrace",
    "ActiveEntry",
    "AnnotationSession",
    "Canvas",
    "CandidateList",
    "CostCurve",
    "GroundTruthImage",
    "Label",
    "Mask",
    "MicroActionLedger",
    "NoiseConfig",
    "Point",
    "ProposalSet",
    "QualityReport",
    "Rendering",
    "Segment",
    "SessionConfig",
    "SimRng",
    "SpatialMoments",
    "STUFF",
    "THING",
    "aggregate_curve",
    "auto_initialize",
    "build_candidate_pool",
    "contains",
    "decode",
    "default_catalog",
    "encode",
    "evaluate_quality",
    "iou",
    "labelme_polygon_cost",
    "mahalanobis",
    "moments",
    "new_session",
    "oracle_proposals",
    "panoptic_quality",
    "pixel_agreement",
    "random_ground_truth",
    "rasterize",
    "recall_at_iou",
    "render_hash",
    "replay_log",
    "sample_click",
    "simulate_image",
    "step",
    "synthesize",
]
