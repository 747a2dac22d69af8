"""Single-image reflection removal with concurrent gradient and image inference networks."""
from .estimator import ReflectionRemover
from .exceptions import (
    ConfigurationError,
    CRRNError,
    DimensionError,
    ImageFormatError,
    IntegrityError,
    SchemaVersionError,
)
from .gin import GinConfig, GradientNet, build_gin
from .iin import FeatureExtractionBlock, IinConfig, ImageNet, build_iin
from .image_model import Resolution, gradient_magnitude, load_image, resize, save_image
from .metrics import LossWeights, SsimConfig, l1_loss, loss_si, loss_ssim, regional, si, ssim, total_loss
from .network import ConcurrentNet
from .synthesis import MixWeights, SynthesisConfig, generate_dataset, mix

__version__ = "0.1.0"
