"""Medical image captioning on a from-scratch numpy autodiff core.

A ViT encodes the image, an LSTM decoder conditioned on it emits one vector
per step, and each vector is matched to the nearest token of a pretrained
text encoder's embedding table.
"""

from .alignment import DecodePolicy, DomainError, generate, hybrid_loss, nearest_token
from .config import Config, desk_config, load_config
from .model import CaptionModel
from .tokenizer import ConfigurationError, DataError, Vocabulary, decode, encode, tokenize, train_wordpiece

__version__ = "0.1.0"

__all__ = [
    "CaptionModel", "Config", "ConfigurationError", "DataError", "DecodePolicy", "DomainError",
    "Vocabulary", "decode", "desk_config", "encode", "generate", "hybrid_loss", "load_config",
    "nearest_token", "tokenize", "train_wordpiece",
]
