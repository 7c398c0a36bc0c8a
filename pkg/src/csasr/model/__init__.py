"""The interactive-language-bias ASR model."""

from csasr.model.checkpoint import load_model, save_model
from csasr.model.config import PRESETS, BiasFlags, ModelConfig
from csasr.model.ilb import ForwardOutput, IlbModel
from csasr.model.layers import Context

__all__ = ["PRESETS", "BiasFlags", "Context", "ForwardOutput", "IlbModel", "ModelConfig", "load_model", "save_model"]
