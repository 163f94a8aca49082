"""Unsupervised skeleton-based temporal action localization.

Pipeline: denoising pre-training of an attention-based spatio-temporal
graph-convolution encoder on rolling pose windows, an embedding-norm
dynamics metric per window, and transition detection at zero crossings of
the metric's discrete curvature.
"""
from .adm import (AdmSeries, CurvatureSeries, TransitionPoint, compute_adm,
                  detect_transitions, embed_sequence, export_adm_curve,
                  second_difference)
from .evaluate import (EvalConfig, EvalReport, average_precision,
                       localization_latency, match_transitions, run_eval)
from .model import (ModelConfig, ModelParams, cheb_conv, forward, init_params,
                    load_params, save_params, scaled_laplacian)
from .skeleton import (DemarcationSet, PoseSequence, SkeletonGraph, WindowBatch,
                       add_gaussian_noise, build_mpii_skeleton, load_pose_file,
                       normalize_poses, partition_windows, save_pose_file,
                       shuffle_windows)
from .synth import (RegimeSpec, SyntheticClip, curvature_oracle, generate_clip,
                    generate_corpus, write_corpus)
from .tensor import Tensor, finite_difference_grad
from .train import TrainConfig, TrainReport, adam_step, mse_loss, train

__version__ = "0.1.0"
