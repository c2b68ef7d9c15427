"""Lesion-level explanation of a retinal severity CNN and controllable
fundus image synthesis from vessel masks plus pathological descriptors."""

from .archive import ModelCheckpoint, load_archive, save_archive
from .detector import (
    AugmentConfig,
    DetectorConfig,
    DetectorSchedule,
    FeatureStack,
    SeverityDetector,
    build_detector,
    default_config,
    desk_config,
    detector_from_checkpoint,
    detector_to_checkpoint,
    forward_features,
    predict_severity,
    train_detector,
)
from .activation import (
    ActivationNet,
    ActivationStack,
    build_activation_net,
    heatmap_png,
    project,
)
from .descriptors import (
    DescriptorSet,
    LesionBox,
    PathologicalDescriptor,
    clone_remove,
    extract_descriptors,
    load_descriptor_set,
    locate_lesions,
    multiply,
    otsu_threshold,
    reconstruct_projections,
    relocate,
    sample_subset,
    save_descriptor_set,
)
from .gan import (
    DiscriminatorConfig,
    FundusDiscriminator,
    FundusGenerator,
    GanSchedule,
    GeneratorConfig,
    LossWeights,
    adversarial_loss,
    discriminate,
    generate,
    generator_adv_loss,
    perceptual_loss,
    sample_noise,
    severity_loss,
    total_generator_loss,
    train_gan,
)
from .metrics import EvalReport, ablation_percept, fid, mse, severity_curve
from .perceptual import Vgg19Features, load_vgg19_features, toy_feature_net
from .preprocess import (
    DatasetManifest,
    PreprocessSpec,
    crop_to_fov,
    fov_mask,
    ingest,
    load_image,
    load_mask,
    save_image,
    save_mask,
)

__version__ = "0.1.0"
