"""Desk-scale Fusion-in-Decoder inference with cross-attention token filtering and early exit."""
from .early_exit import ExitConfig
from .filtering import FilterConfig
from .model import ModelConfig, load_weights
from .runtime import DecodeSettings, FidInput, Passage, generate

__all__ = ["DecodeSettings", "ExitConfig", "FidInput", "FilterConfig", "ModelConfig", "Passage",
           "generate", "load_weights"]
