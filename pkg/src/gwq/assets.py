"""Bundled desk-scale fixtures: corpus splits and a trained reference model.

The corpus is synthesized deterministically (see :mod:`gwq.textgen`) and
split into train/validation halves; the model checkpoint is produced by
``scripts/build_assets.py`` and committed so tests and the acceptance
suite never retrain.
"""

from __future__ import annotations

from importlib import resources

from .container import ModelBundle, read_container

CORPUS_SEED = 20240501
CORPUS_CHARS = 360_000
TRAIN_SPLIT = 320_000

MODEL_FILE = "tinylm.st"
TRAIN_FILE = "tiny-corpus-train.txt"
VAL_FILE = "tiny-corpus-val.txt"


def asset_path(name: str):
    return resources.files("gwq").joinpath("assets", name)


def load_model() -> ModelBundle:
    with resources.as_file(asset_path(MODEL_FILE)) as path:
        return read_container(path)


def load_text(name: str) -> str:
    return asset_path(name).read_text(encoding="utf-8")


def train_text() -> str:
    return load_text(TRAIN_FILE)


def val_text() -> str:
    return load_text(VAL_FILE)
