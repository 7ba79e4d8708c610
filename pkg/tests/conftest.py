import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
TESTS_DIR = os.path.dirname(os.path.abspath(__file__))
for path in (ROOT, TESTS_DIR):
    if path not in sys.path:
        sys.path.insert(0, path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def quantized_image(rng):
    """Imagen 12x10 con valores k/255 (sobrevive intacta a PNG/PPM)"""
    return rng.integers(0, 256, size=(10, 12, 3)).astype(np.float64) / 255.0


@pytest.fixture
def image_dir(tmp_path, rng):
    """Árbol pequeño de imágenes PNG 16x16, con un subdirectorio"""
    from dataset_io import save_image

    root = tmp_path / 'images'
    for index in range(4):
        sub = root / ('sub' if index % 2 else '')
        save_image(rng.uniform(0, 1, size=(16, 16, 3)), str(sub / f"img_{index}.png"))
    return root
