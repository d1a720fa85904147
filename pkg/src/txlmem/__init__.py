"""Transformer-XL language modelling with heterogeneous per-layer memories."""

from .attention import AttentionInput, AttentionParams, attend, attention_flops
from .memory import LayerMemory, MemoryConfig, MemoryManager, arrange, state_size, update
from .model import ModelConfig, ModelParams, bpc, forward, init_params, loss
from .tensor import Tape, Tensor

__version__ = "0.1.0"
