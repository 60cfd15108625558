"""Binary pixel embeddings (one-hot, thermometer, learnable) for robust small CNNs."""

from .attack import AttackConfig, lspga_attack
from .corruptions import (CorruptionSpec, ErrorTable, apply_corruption, corruption_error,
                          mean_corruption_error, mean_error_cifar_style)
from .encoders import (OneHotEncoder, PixelBinaryEmbedding, ThermometerEncoder, binarize_table,
                       cosine_similarity_matrix, embed_images, encode_one_hot, encode_thermometer,
                       p2be_backward)
from .estimator import BinaryEmbeddingClassifier
from .training import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "lspga_attack", "CorruptionSpec", "ErrorTable", "apply_corruption",
    "corruption_error", "mean_corruption_error", "mean_error_cifar_style", "OneHotEncoder",
    "PixelBinaryEmbedding", "ThermometerEncoder", "binarize_table", "cosine_similarity_matrix",
    "embed_images", "encode_one_hot", "encode_thermometer", "p2be_backward",
    "BinaryEmbeddingClassifier", "TrainConfig", "evaluate", "load_checkpoint", "save_checkpoint",
    "train",
]
