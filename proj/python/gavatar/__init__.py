"""Gaussian head avatars from few-shot images.

Configuration arguments accept a dict (partial run configuration, same layout
as the CLI's config.json) or a JSON string.
"""

import json as _json

from . import _core
from ._core import (
    Avatar,
    Camera,
    ConfigError,
    Dataset,
    Error,
    FormatError,
    Frame,
    HeadParams,
    PhaseError,
    metrics,
    rasterize,
    read_png,
    reenact,
    write_png,
)

__all__ = [
    "Avatar", "Camera", "ConfigError", "Dataset", "Error", "FormatError", "Frame", "HeadParams", "PhaseError",
    "default_config", "finetune", "generate", "invert", "metrics", "rasterize", "read_png", "reenact",
    "resolve_config", "train_base", "train_prior", "write_png",
]


def _text(config):
    if config is None:
        return "{}"
    return config if isinstance(config, str) else _json.dumps(config)


def default_config():
    return _json.loads(_core.default_config())


def resolve_config(config=None):
    return _json.loads(_core.resolve_config(_text(config)))


def generate(config=None):
    return Dataset.generate(_text(config))


def train_prior(dataset, config=None, identities=(), views=()):
    return _core.train_prior(dataset, _text(config), list(identities), list(views))


def invert(prior, shots, config=None):
    return _core.invert(prior, list(shots), _text(config))


def finetune(inverted, shots, config=None):
    return _core.finetune(inverted, list(shots), _text(config))


def train_base(shots, config=None):
    return _core.train_base(list(shots), _text(config))
