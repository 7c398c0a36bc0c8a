"""Checkpoint files: ``key=value`` text header, then named tensor blobs."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from csasr.errors import ConfigError, UsageError
from csasr.model.config import ModelConfig
from csasr.numerics.serialize import read_array, write_array

MAGIC = "csasr-checkpoint 1"


def write_checkpoint(path, config_items: dict, params: dict, meta: Optional[dict] = None,
                     buffers: Optional[dict] = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        lines = [MAGIC]
        lines += [f"config.{k}={v}" for k, v in config_items.items()]
        lines += [f"meta.{k}={v}" for k, v in (meta or {}).items()]
        lines.append("end")
        fh.write(("\n".join(lines) + "\n").encode())
        for kind, table in (("param", params), ("buffer", buffers or {})):
            for name, arr in table.items():
                fh.write(f"{kind} {name}\n".encode())
                write_array(fh, arr)
    tmp.replace(path)


def read_checkpoint(path):
    """Returns ``(config_items, params, meta, buffers)``."""
    config, meta, params, buffers = {}, {}, {}, {}
    with open(path, "rb") as fh:
        if fh.readline().decode().rstrip("\n") != MAGIC:
            raise UsageError(f"{path}: not a checkpoint file")
        while True:
            line = fh.readline().decode().rstrip("\n")
            if line == "end":
                break
            if not line:
                raise UsageError(f"{path}: truncated header")
            key, _, value = line.partition("=")
            section, _, name = key.partition(".")
            (config if section == "config" else meta)[name] = value
        while True:
            line = fh.readline().decode().rstrip("\n")
            if not line:
                break
            kind, _, name = line.partition(" ")
            (params if kind == "param" else buffers)[name] = read_array(fh)
    return config, params, meta, buffers


def save_model(model, path, meta: Optional[dict] = None, buffers: Optional[dict] = None) -> None:
    params = {name: t.data for name, t in model.named_parameters()}
    write_checkpoint(path, model.cfg.to_items(), params, meta, buffers)


def load_model(path, model_cls=None):
    """Rebuild a model from a checkpoint; returns ``(model, meta, buffers)``."""
    from csasr.model.ilb import IlbModel

    items, params, meta, buffers = read_checkpoint(path)
    model_cls = model_cls or IlbModel
    model = model_cls(ModelConfig.from_items(items))
    load_parameters(model, params)
    return model, meta, buffers


def load_parameters(model, params: dict) -> None:
    own = dict(model.named_parameters())
    if set(own) != set(params):
        missing, extra = sorted(set(own) - set(params)), sorted(set(params) - set(own))
        raise ConfigError(f"checkpoint/config mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, t in own.items():
        if params[name].shape != t.shape:
            raise ConfigError(f"checkpoint/config mismatch for {name}: {params[name].shape} vs {t.shape}")
        t.data = np.array(params[name])
