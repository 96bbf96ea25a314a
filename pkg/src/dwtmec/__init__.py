"""Domain-specific whitening layers and the min-entropy consensus loss on a small numpy framework."""

from .losses import cross_entropy, entropy_loss, log_softmax, mec_loss, total_loss
from .model import Network, build_cnn, build_mlp
from .train import TrainConfig, train_loop, train_step
from .whitening import BatchStats, Domain, DwtLayer, batch_stats, dwt_backward, dwt_forward

__version__ = "0.1.0"

__all__ = [
    "BatchStats", "Domain", "DwtLayer", "Network", "TrainConfig",
    "batch_stats", "build_cnn", "build_mlp", "cross_entropy", "dwt_backward", "dwt_forward",
    "entropy_loss", "log_softmax", "mec_loss", "total_loss", "train_loop", "train_step",
]
