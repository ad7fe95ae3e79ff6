"""Discriminator-free translation-based unsupervised deformable registration."""

__version__ = "0.1.0"

from .grids import (DeformationField, ImageGrid, MaskGrid, identity_field,
                    jacobian_stats, warp, warp_tensor)
from .networks import (DEFAULT_LAYER_IDS, JointNetworks, ProjectionHeads,
                       RegistrationNet, TranslationDecoder, TranslationEncoder,
                       TranslationNet, build_networks, embed_patches,
                       encode_features, init_parameters, register,
                       sample_locations, translate)
from .losses import (LossWeights, NCEConfig, appearance_loss,
                     global_alignment_loss, info_nce, local_alignment_loss,
                     patch_nce_loss, smoothness_loss, total_loss)
from .data import (ElasticDeformConfig, PairRecord, PairedDataset,
                   binomial_blur3, dataset_checksum, default_elastic_config,
                   generate_shapes_dataset, load_dataset, load_png16,
                   otsu_threshold, preprocess_slice, random_elastic_field,
                   remap_intensity, save_dataset, save_png16,
                   synthesize_modality)
from .metrics import EvalReport, aggregate, dice, evaluate_pair, hd95, write_report
from .training import (FitResult, TrainConfig, TrainingDiverged, VariantFlags,
                       fit, lr_at_epoch, make_variant, term_rngs, train_step)

__all__ = [
    "__version__",
    "DeformationField", "ImageGrid", "MaskGrid", "identity_field",
    "jacobian_stats", "warp", "warp_tensor",
    "DEFAULT_LAYER_IDS", "JointNetworks", "ProjectionHeads", "RegistrationNet",
    "TranslationDecoder", "TranslationEncoder", "TranslationNet",
    "build_networks", "embed_patches", "encode_features", "init_parameters",
    "register", "sample_locations", "translate",
    "LossWeights", "NCEConfig", "appearance_loss", "global_alignment_loss",
    "info_nce", "local_alignment_loss", "patch_nce_loss", "smoothness_loss",
    "total_loss",
    "ElasticDeformConfig", "PairRecord", "PairedDataset", "binomial_blur3",
    "dataset_checksum", "default_elastic_config", "generate_shapes_dataset",
    "load_dataset", "load_png16", "otsu_threshold", "preprocess_slice",
    "random_elastic_field", "remap_intensity", "save_dataset", "save_png16",
    "synthesize_modality",
    "EvalReport", "aggregate", "dice", "evaluate_pair", "hd95", "write_report",
    "FitResult", "TrainConfig", "TrainingDiverged", "VariantFlags", "fit",
    "lr_at_epoch", "make_variant", "term_rngs", "train_step",
]
