"""Helpers shared across test modules."""

import numpy as np


def random_image(rng, h=16, w=16):
    return rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
