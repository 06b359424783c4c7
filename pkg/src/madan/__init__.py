"""Multi-source adversarial domain aggregation for semantic segmentation,
at desk scale: synthetic multi-domain data, the adversarial objectives, a
staged trainer and mIoU evaluation."""

from .datagen import CLASS_NAMES, DomainSpec, generate_dataset, load_dataset, render_scene, sample_domain_spec
from .losses import LossReport, LossWeights, total_loss
from .metrics import ConfusionMatrix, iou
from .models import ModelBundle, ModelConfig, init_bundle
from .trainer import TrainConfig, TrainData, run_madan

__version__ = "0.1.0"
