"""Multi-style stylization of a compact radiance field."""

__version__ = "0.1.0"

from .consistency import (OcclusionMask, SupervisionPack, backward_warp, build_supervision, estimate_flow,
                          mscl_loss, occlusion_mask, reconstruct_supervision, select_reference_view)
from .field import (FieldConfig, FieldParams, RadianceField, TrainConfig, encode_position, field_eval,
                    pretrain_nerf, render_image, render_ray)
from .metrics import ViewSequence, psnr, ssim, twe, warped_perceptual
from .mls import (HeadParamVector, MlsParams, add_style_incremental, pack_heads, predict_params, pretrain_mls,
                  unpack_heads)
from .pipeline import MultiStyleNeRF
from .scene_io import CameraModel, FlowField, SceneBundle, generate_synthetic_scene, ground_truth_flow, load_scene
from .style_space import (StyleEntry, StyleFeature, StyleSet, correct_text_feature, cosine_distance,
                          encode_image_style, encode_text_style, match_style, train_cfcm)
from .stylizer import AdaINStylizer, FeatureExtractor, adain_transfer, channel_stats, stylize_views
from .trainer import (RunManifest, StylizationConfig, incremental_train, pregenerate_supervision,
                      render_stylized, stylization_train)
