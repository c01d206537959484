"""Fit unions of smooth parallelepipeds to single depth maps."""
from .geometry import (ConvexPrimitive, Decomposition, Params, SceneTransform, convex_scores,
                       corners, hard_inside, halfplane_values, indicator, sdf, sdf_gradient,
                       split_convex, volume_estimate)
from .io import (FormatError, read_camera, read_decomposition, read_pfm, read_pgm,
                 read_segmentation, write_camera, write_decomposition, write_pfm, write_pgm)
from .losses import (LossBreakdown, LossWeights, align_loss, entropy_loss, guidance_loss,
                     localization_loss, loss_and_grad, ortho_loss, overlap_loss, sample_loss,
                     total_loss, unique_loss, volume_order_loss)
from .metrics import (FitReport, chamfer_l1, coverage, depth_metrics, evaluate,
                      normal_metrics, normals_from_depth, seg_accuracy)
from .refine import (FitTrace, NumericalError, PolishConfig, gradient_check, grid_init,
                     perturb, pipeline, polish, prune, random_init, split_all)
from .render import RenderOutput, raymarch, render_normals
from .sampling import Camera, SampleSet, build_transform, generate_samples, split_total
from .synth import SyntheticScene, default_camera, synth_scene

__version__ = "0.1.0"
