"""dermprobe: probe frozen diffusion-UNet features for skin-lesion analysis.

A frozen denoising UNet supplies decoder-block activations for noised
images; lightweight probes trained on those activations perform 5-class
lesion segmentation and binary malignancy classification, with
skin-tone-stratified evaluation and a block/timestep ablation harness.
"""

from .backbone import (
    BackboneDescriptor,
    BlockSpec,
    DecoderActivation,
    FrozenBackbone,
    build_toy_backbone,
    collect_activations,
    full_scale_geometry,
    load_pretrained_backbone,
    save_backbone,
    train_toy_backbone,
)
from .data import (
    CLASS_NAMES,
    DEFAULT_PALETTE,
    TONE_BINS,
    MaskPalette,
    SampleRecord,
    SubsetPlan,
    decode_mask,
    draw_subset_plan,
    generate_synthetic_corpus,
    load_corpus,
)
from .evaluation import (
    AblationGrid,
    MetricsReport,
    compute_iou,
    compute_roc_auc,
    kmeans_blocks,
    run_ablation,
    stratify_report,
)
from .features import (
    ClassificationVector,
    PixelFeatureMap,
    classification_vector,
    concat_features,
    pool_to_512,
    segmentation_features,
    upsample_bilinear,
)
from .probes import ClassifierHead, SegmentationProbeEnsemble, cls_predict, seg_predict
from .schedule import NoiseSchedule, build_linear_schedule, forward_noise
from .train import TrainConfig, train_classifier, train_segmentation

__version__ = "0.1.0"
