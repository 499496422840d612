"""Masked-autoencoder pretraining and LoRA adaptation of a 3D ViT for perfusion volumes."""

from .decoder import DecoderConfig, MaskedAutoencoder, build_mae
from .errors import ConfigError, DataError, NumericError, PerfMAEError
from .lora import FinetuneHyper, LoRASpec, run_finetune
from .train import PretrainPlan, run_pretraining
from .vit import Encoder, ViTConfig
from .volume import PhantomSpec, Volume, generate_phantom, load_volume, preprocess

__version__ = "0.1.0"
