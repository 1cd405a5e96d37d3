"""Parameter-efficient fine-tuning engine for ViT encoders on dense
multispectral segmentation: autodiff core, band-adaptive ViT backbone,
LoRA / deep-prompt / convolutional-adapter attachments, segmentation
decoders, the training protocol, split builders, and generalization
diagnostics.
"""

from .autodiff import Tensor, backward, grad_check, no_grad
from .backbone import BackboneConfig, ViTBackbone, vit_base_config, vit_large_config
from .data import DatasetManifest, Sample, normalize, reflect_pad_to, subset_bands
from .decoders import DecoderConfig, FeaturePyramid, Neck
from .diagnostics import (DistanceReport, distance_report, export_embeddings,
                          parameter_memory_report)
from .metrics import ConfusionMatrix, miou
from .model import SegmentationModel, build_model
from .peft import (LoraConfig, VitAdapterConfig, VptConfig, apply_freeze_policy,
                   attach_lora, attach_vit_adapter, attach_vpt, count_parameters,
                   merge_lora)
from .splits import build_buffered_spatial_splits, build_class_balanced_splits, haversine_km
from .synthetic import SyntheticConfig, generate_synthetic
from .training import RunConfig, evaluate, lr_search, run_replicates, train

__version__ = "0.1.0"
