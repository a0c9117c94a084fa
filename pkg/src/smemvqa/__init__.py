"""Spatial memory network for visual question answering, in numpy."""

__version__ = "0.1.0"

from .features import RasterImage, SpatialFeatures, extract_grid_patch, load_precomputed, save_precomputed
from .harness import TrainConfig, evaluate, position_heuristic_baseline, train, vqa_consensus
from .model import SMemConfig, SMemVQA, IBowImg, init_ibowimg, init_params, load_checkpoint, save_checkpoint
from .synth import SynthSpec, generate, load_dataset, serialize_dataset
from .tensor import Rng, Tensor, finite_diff_check
from .text import Vocabulary, build_vocab, encode_question, tokenize

__all__ = [
    "IBowImg",
    "RasterImage",
    "Rng",
    "SMemConfig",
    "SMemVQA",
    "SpatialFeatures",
    "SynthSpec",
    "Tensor",
    "TrainConfig",
    "Vocabulary",
    "build_vocab",
    "encode_question",
    "evaluate",
    "extract_grid_patch",
    "finite_diff_check",
    "generate",
    "init_ibowimg",
    "init_params",
    "load_checkpoint",
    "load_dataset",
    "load_precomputed",
    "position_heuristic_baseline",
    "save_checkpoint",
    "save_precomputed",
    "serialize_dataset",
    "tokenize",
    "train",
    "vqa_consensus",
]
