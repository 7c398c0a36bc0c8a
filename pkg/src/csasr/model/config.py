"""Model configuration and the seven ablation presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from csasr.errors import ConfigError


@dataclass(frozen=True)
class BiasFlags:
    multitask_ld: bool = False
    encoder_bias: bool = False
    decoder_bias: bool = False
    ctc_bias: bool = False

    @property
    def uses_ld(self) -> bool:
        return self.multitask_ld or self.encoder_bias or self.decoder_bias or self.ctc_bias


# index -> (flags, description); hard-coded so an ablation cannot be misconfigured
PRESETS: dict[str, tuple[BiasFlags, str]] = {
    "1.0": (BiasFlags(), "Hybrid CTC/attention"),
    "1.1": (BiasFlags(multitask_ld=True), "Multi-task with LD"),
    "1.2": (BiasFlags(multitask_ld=True, decoder_bias=True), "Decoder LPB"),
    "1.3": (BiasFlags(multitask_ld=True, encoder_bias=True), "Encoder LPB"),
    "1.4": (BiasFlags(multitask_ld=True, encoder_bias=True, ctc_bias=True), "Encoder + CTC LPB"),
    "1.5": (BiasFlags(multitask_ld=True, encoder_bias=True, decoder_bias=True), "Encoder + Decoder LPB"),
    "1.6": (
        BiasFlags(multitask_ld=True, encoder_bias=True, decoder_bias=True, ctc_bias=True),
        "Encoder + Decoder + CTC LPB",
    ),
}


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 16
    model_dim: int = 64
    heads: int = 4
    encoder_layers: int = 4
    decoder_layers: int = 2
    ld_decoder_layers: int = 2
    ffn_dim: int = 256
    conv_kernel: int = 15
    vocab_size: int = 43
    lang_vocab_size: int = 3
    subsample_factor: int = 4
    flags: BiasFlags = field(default_factory=BiasFlags)
    dropout: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.lang_vocab_size < 2:
            raise ConfigError("lang_vocab_size must be >= 2")
        if self.subsample_factor not in (1, 2, 4):
            raise ConfigError(f"subsample_factor must be 1, 2 or 4, got {self.subsample_factor}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be odd")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        f = self.flags
        if f.decoder_bias and not f.multitask_ld:
            raise ConfigError("decoder_bias needs the LD decoder (multitask_ld)")
        if f.ctc_bias and not f.encoder_bias:
            raise ConfigError("ctc_bias needs encoder_bias (the CTC head consumes H')")
        if f.encoder_bias and not f.multitask_ld:
            raise ConfigError("encoder_bias needs the LD decoder: the frame LID is trained through it")

    @classmethod
    def from_preset(cls, preset: str, **overrides) -> "ModelConfig":
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        return cls(flags=PRESETS[preset][0], **overrides)

    @classmethod
    def full_scale(cls, preset: str = "1.6", **overrides) -> "ModelConfig":
        """The full-size dimensions (12 conformer / 6 decoder layers, D=256, 2048 FFN, V=6923)."""
        dims = dict(
            feature_dim=83, model_dim=256, heads=4, encoder_layers=12, decoder_layers=6,
            ld_decoder_layers=6, ffn_dim=2048, vocab_size=6923, lang_vocab_size=3,
        )
        dims.update(overrides)
        return cls.from_preset(preset, **dims)

    def preset_name(self):
        for name, (flags, _) in PRESETS.items():
            if flags == self.flags:
                return name
        return None

    def to_items(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "flags":
                for k, v in dataclasses.asdict(self.flags).items():
                    out[f"flags.{k}"] = str(v).lower()
            else:
                out[f.name] = str(getattr(self, f.name))
        return out

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "ModelConfig":
        flags = {k[len("flags."):]: v == "true" for k, v in items.items() if k.startswith("flags.")}
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name == "flags" or f.name not in items:
                continue
            kw[f.name] = float(items[f.name]) if f.name == "dropout" else int(items[f.name])
        return cls(flags=BiasFlags(**flags), **kw)
