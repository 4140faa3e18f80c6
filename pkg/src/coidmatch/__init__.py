"""coidmatch: two-view object correspondence identification.

Matches object-level scene graphs observed by two agents using a
trainable masked graph-matching pipeline (attentional embeddings,
neighborhood consensus, GPS position consistency, SoftMax-variance
filtering of non-covisible objects), plus a synthetic scene simulator,
trainer, and evaluation harness.
"""

from .graph_build import Pose, SceneGraph, build_graph, to_world
from .matcher import (
    ConsensusConfig,
    MatcherConfig,
    MatchPipeline,
    MatchResult,
    default_matcher_config,
    init_model_params,
)
from .gnn import GnnConfig
from .scene_sim import SimConfig, WorldScene, generate_scene, make_instance, render_view
from .train_eval import MetricsReport, TrainConfig, evaluate, pr_curve, train

__version__ = "0.1.0"

__all__ = [
    "ConsensusConfig",
    "GnnConfig",
    "MatchPipeline",
    "MatchResult",
    "MatcherConfig",
    "MetricsReport",
    "Pose",
    "SceneGraph",
    "SimConfig",
    "TrainConfig",
    "WorldScene",
    "build_graph",
    "default_matcher_config",
    "evaluate",
    "generate_scene",
    "init_model_params",
    "make_instance",
    "pr_curve",
    "render_view",
    "to_world",
    "train",
    "__version__",
]
