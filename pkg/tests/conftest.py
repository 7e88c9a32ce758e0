import numpy as np
import pytest

from vsdalign.cli import main as cli_main
from vsdalign.cli import _load_dataset


@pytest.fixture
def synth_dataset(tmp_path):
    """Generate a synthetic dataset via the CLI and load it."""

    def _make(n_images=16, d=8, captions_per_image=5, fidelity=0.9, sigma=0.1, seed=0,
              subdir="data"):
        out = tmp_path / subdir
        rc = cli_main([
            "synth", "--out", str(out),
            "--n-images", str(n_images),
            "--captions-per-image", str(captions_per_image),
            "--d", str(d),
            "--vsd-fidelity", str(fidelity),
            "--noise-sigma", str(sigma),
            "--seed", str(seed),
        ])
        assert rc == 0
        return _load_dataset(str(out))

    return _make


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))
