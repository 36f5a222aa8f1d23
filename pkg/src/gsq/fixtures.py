"""Seeded desk-scale fixtures: a 64x64 weight matrix and 256x64 calibration activations.

The shipped ``data/*.gsqt`` files are exactly what :func:`make_fixture` produces.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from gsq.tensor import RngStream, read_tensor, write_tensor

FIXTURE_SEED = 20240607
WEIGHTS_FILE = "fixture_weights.gsqt"
CALIB_FILE = "fixture_calib.gsqt"


def make_fixture(rows: int = 64, cols: int = 64, samples: int = 256, seed: int = FIXTURE_SEED):
    """Gaussian weights with a few heavy rows; correlated activations with outlier channels."""
    rng = RngStream(seed)
    w = rng.derive("weights").gaussian((rows, cols)).astype(np.float64) / np.sqrt(cols)
    w[:: max(1, rows // 8)] *= 2.0
    z = rng.derive("latent").gaussian((samples, cols)).astype(np.float64)
    spectrum = 1.0 / np.sqrt(1.0 + np.arange(cols))
    mix = rng.derive("mix").gaussian((cols, cols)).astype(np.float64) / np.sqrt(cols)
    x = (z * spectrum) @ mix + 0.1 * rng.derive("iso").gaussian((samples, cols))
    x[:, :: max(1, cols // 4)] *= 4.0
    return w.astype(np.float32), x.astype(np.float32)


def data_dir() -> Path:
    return Path(str(resources.files("gsq") / "data"))


def load_fixture():
    d = data_dir()
    return read_tensor(d / WEIGHTS_FILE), read_tensor(d / CALIB_FILE)


def write_fixture(directory=None) -> None:
    d = Path(directory) if directory else data_dir()
    d.mkdir(parents=True, exist_ok=True)
    w, x = make_fixture()
    write_tensor(d / WEIGHTS_FILE, w)
    write_tensor(d / CALIB_FILE, x)


if __name__ == "__main__":
    write_fixture()
