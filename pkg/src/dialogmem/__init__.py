"""Source-aware recurrent entity networks for dialogue response selection."""
from .entnet import EntNet, load_checkpoint
from .sentnet import SEntNet
from .training import TrainConfig, train

__all__ = ["EntNet", "SEntNet", "TrainConfig", "load_checkpoint", "train"]
__version__ = "0.1.0"
