"""Foreground segmentation distilled from latent directions of an image generator."""

from .generator import (GeneratorSpec, LatentCode, Generator, ToyCompositor, ToyCompositorParams,
                        build_generator, register_generator, toy_oracle_mask, toy_oracle_masks)
from .probe import Direction, DirectionPair, ProbeConfig, find_direction_pair, radial_prior
from .masksynth import RefineConfig, extract_mask, refine, synthesize_dataset, DatasetManifest
from .segnet import SegArchConfig, TrainConfig, init_model, train, predict, ensemble_predict
from .evalharness import evaluate, load_dataset, ablation_sweep, MetricsReport

__version__ = "0.1.0"
