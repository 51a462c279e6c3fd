"""Bundled dataset fixtures."""

import math
import os
from dataclasses import dataclass
from importlib import resources

import numpy as np
import torch


class DataError(Exception):
    pass


@dataclass
class DatasetSplit:
    train_images: torch.Tensor
    train_labels: torch.Tensor
    val_images: torch.Tensor
    val_labels: torch.Tensor


def _to_tensors(images: np.ndarray, labels: np.ndarray):
    pixels = images.shape[1]
    for channels in (1, 3):
        side = math.isqrt(pixels // channels)
        if channels * side * side == pixels:
            break
    else:
        raise DataError(f"cannot infer image geometry from {pixels} pixels")
    x = torch.from_numpy(images).to(torch.float32).div_(255.0)
    x = x.reshape(-1, channels, side, side)
    return x, torch.from_numpy(labels).to(torch.int64)


def load_dataset(name: str, data_dir=None) -> DatasetSplit:
    filename = f"{name}.npz"
    if data_dir:
        path = os.path.join(data_dir, filename)
        if not os.path.exists(path):
            raise DataError(f"no data file for dataset {name!r} under {data_dir}")
        raw = np.load(path)
    else:
        ref = resources.files(__package__) / "data" / filename
        if not ref.is_file():
            raise DataError(f"dataset {name!r} is not bundled; pass a data directory")
        with resources.as_file(ref) as path:
            raw = np.load(path)
    xt, yt = _to_tensors(raw["train_images"], raw["train_labels"])
    xv, yv = _to_tensors(raw["val_images"], raw["val_labels"])
    return DatasetSplit(xt, yt, xv, yv)
