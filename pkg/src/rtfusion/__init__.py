"""Desk-scale RGB-thermal fusion detection with a verifiable autodiff core."""

from .autodiff import (SGD, GradCheckReport, Parameter, Tensor, bilinear_sample,
                       concat, conv2d, global_avg_pool, grad_check, grouped_conv2d,
                       linear, no_grad, scale_channels, sgd_step)
from .config import ExperimentConfig
from .dataset import DatasetSample, generate_dataset, load_dataset, save_dataset
from .fusion import (FeaturePair, FusionParams, conv_cc, deformable_fuse,
                     ffm_forward, fixed_fuse, global_cc, predict_offsets,
                     riffle_shuffle)
from .losses import (LossBreakdown, bce_loss, corr_max_loss, detection_loss,
                     dice_loss, neg_corr_loss, seg_loss, total_loss)
from .masks import (AnrAirResult, BoxLevelMask, GroundTruthBox, RelationMatrix,
                    anr_air, count_false_positives, downsample_mask_nearest,
                    rasterize_boxes, relation_matrix)
from .metrics import (Detection, MatchResult, MetricReport, MrProtocol,
                      average_precision, fp_ablation, greedy_nms, iou,
                      match_detections, mr_fppi_curve)
from .model import (Detector, backbone_forward, decode_and_nms, encode_targets,
                    head_forward, luminance)
from .refinement import (RefinementParams, channel_correlation, frm_forward,
                         predict_mask, project_correlation, refine)
from .training import TrainResult, evaluate, load_trained, run_inference, train

__version__ = "0.1.0"
