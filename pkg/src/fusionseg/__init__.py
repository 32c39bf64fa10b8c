"""Point-cloud semantic segmentation with a dual-stream network and a
Sim2Real fine-tuning workflow."""

from .cloud import (AGV, ASSEMBLY_LINE, CLASS_NAMES, DYNAMIC_CLASSES, FLOOR,
                    HUMAN, NUM_CLASSES, ROBOT, STATIC_CLASSES, TABLE,
                    UNLABELED, WALL, DecimationPolicy, LabeledCloud,
                    NormalizationRecord, class_aware_decimate, load_cloud,
                    merge_clouds, resample_to_budget, save_cloud,
                    voxel_downsample, zero_center_normalize)
from .graph import EdgeFeatureBlock, KnnGraph, build_edge_features, knn
from .nn import (Checkpoint, FusionConfig, Logits, ParameterStore,
                 cross_entropy_loss, fusion_forward, init_params,
                 load_checkpoint, predict_labels, save_checkpoint)
from .metrics import (ConfusionMatrix, MetricsReport, accuracies, confusion,
                      iou_per_class, measure_latency, miou, report)
from .training import (AdamState, FreezeSpec, PreprocessPolicy, TrainConfig,
                       TrainHistory, adam_step, cosine_lr, evaluate, finetune,
                       split_dataset, train)
from .datagen import (IDENTITY_AUGMENTATION, REAL_PROFILE, SIM_PROFILE,
                      AugmentationSpec, DomainProfile, SceneSpec, augment,
                      generate_scene, load_dataset, make_dataset, save_dataset)

__version__ = "0.1.0"
