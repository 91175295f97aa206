"""Deep embedded image clustering: transformer patch autoencoder, a learned
2-D clustering space, density-peak centers with neighbor-weighted soft
assignment, and KL self-training."""

from .data import BlobSpec, Dataset, circle_means, load_csv, load_idx, \
    make_blobs
from .metrics import accuracy, hungarian, nmi
from .model import Network, PatchGrid
from .trainer import RunConfig, TrainReport, pretrain, train

__version__ = "0.1.0"

__all__ = [
    "BlobSpec", "Dataset", "Network", "PatchGrid", "RunConfig",
    "TrainReport", "accuracy", "circle_means", "hungarian", "load_csv",
    "load_idx", "make_blobs", "nmi", "pretrain", "train", "__version__",
]
