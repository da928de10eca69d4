"""Dataset construction and ingestion.

Gaussian-noise datasets for initialization studies and a CIFAR-10 binary
loader with per-feature standardization. A synthetic writer produces files
in the same binary format for environments without the real archive.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .linalg import Rng

RECORD_BYTES = 3073
IMAGE_FEATURES = 3072


@dataclass
class Dataset:
    """Input rows, labels (vectors or class indices), and load metadata."""

    inputs: np.ndarray
    labels: np.ndarray
    normalization: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.inputs.shape[0]


def gaussian_noise_dataset(n, dim_in=100, dim_label=100, rng=None):
    """Gaussian inputs rescaled to length exactly 10, Gaussian labels.

    Entries are drawn with variance 1/100. The rescaling pins each input
    vector's length at exactly 10; labels keep their raw draw.
    """
    if n < 1:
        raise ValueError("need at least one datapoint")
    rng = rng or Rng(0, ("gaussian-data",))
    x = rng.split("inputs").standard_normal((n, dim_in)) / 10.0
    x *= 10.0 / np.linalg.norm(x, axis=1, keepdims=True)
    y = rng.split("labels").standard_normal((n, dim_label)) / 10.0
    return Dataset(x, y, {"kind": "gaussian", "input_length": 10.0})


def standardize_features(x):
    """Per-feature zero mean and unit variance over the given rows.

    Zero-variance features are mapped to 0. Returns the standardized
    array plus the mean and raw standard deviation used.
    """
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    dead = std == 0.0
    if np.any(dead):
        warnings.warn(f"{int(dead.sum())} features have zero variance; left at 0")
    safe = np.where(dead, 1.0, std)
    out = (x - mean) / safe
    out[:, dead] = 0.0
    return out, mean, std


def load_cifar10_binary(path, subset_size=None):
    """Load CIFAR-10 binary records and standardize each feature.

    Records are 1 label byte plus 3072 pixel bytes. When subset_size is
    given, the first subset_size records are used; standardization always
    uses the loaded subset's own statistics.
    """
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES != 0:
        raise ValueError(
            f"truncated file: {raw.size} bytes is not a positive multiple of {RECORD_BYTES}"
        )
    records = raw.reshape(-1, RECORD_BYTES)
    if subset_size is not None:
        if subset_size < 1 or subset_size > records.shape[0]:
            raise ValueError(
                f"subset_size {subset_size} outside 1..{records.shape[0]} available records"
            )
        records = records[:subset_size]
    labels = records[:, 0].astype(np.int64)
    if np.any(labels > 9):
        raise ValueError("label byte out of range 0..9")
    feats, mean, std = standardize_features(records[:, 1:])
    return Dataset(feats, labels, {"kind": "cifar10", "mean": mean, "std": std})


def write_synthetic_cifar(path, n, rng=None, classes=10):
    """Write a CIFAR-format binary file of Gaussian class-mixture images.

    Each class gets a fixed mean image; records add pixel noise and cycle
    through the classes, so the file is balanced and learnable. Stands in
    for the real archive where only the record format and a class
    structure matter.
    """
    if n < 1:
        raise ValueError("need at least one record")
    rng = rng or Rng(0, ("synthetic-cifar",))
    means = rng.split("means").uniform(60.0, 196.0, (classes, IMAGE_FEATURES))
    noise = 25.0 * rng.split("noise").standard_normal((n, IMAGE_FEATURES))
    labels = np.arange(n) % classes
    out = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = labels.astype(np.uint8)
    out[:, 1:] = np.clip(np.rint(means[labels] + noise), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(out.tobytes())
    return path
