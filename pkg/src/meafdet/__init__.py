"""RGB + infrared small-target detection with mask-enhanced attention fusion."""
from .config import RunConfig, TrainConfig, load_config, parse_config, serialize_config
from .data import GroundTruthBox, ImagePair, SynthSpec, generate_synthetic, load_dataset
from .detector import BackboneConfig, Detection, Detector, SrBranchConfig, strip_sr
from .fusion import FusionParams, meaf_forward
from .losses import LossWeights
from .trainer import OptimizerState, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
