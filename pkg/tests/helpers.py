"""Small builders shared across the test modules."""
from __future__ import annotations

from fractions import Fraction

import numpy as np

from sigprint.descriptor import Descriptor, Signature
from sigprint.scalespace import Keypoint


def make_sig(image_id: str, values) -> Signature:
    """Signature with one dummy keypoint per descriptor row."""
    values = np.asarray(values, dtype=np.uint8).reshape(-1, 64)
    kps = [Keypoint((float(i), 0.0, 0.0), 1.6, 1.0, 0, 1) for i in range(len(values))]
    descs = [Descriptor(v, i, 0) for i, v in enumerate(values)]
    return Signature(image_id, kps, descs)


def random_sigs(rng, n_images: int, per_image, prefix: str = "img", permutations: bool = False):
    """Seeded signatures of random rank vectors; ``per_image`` is an int or a (lo, hi) range."""
    sigs = []
    for i in range(n_images):
        n = per_image if isinstance(per_image, int) else int(rng.integers(per_image[0], per_image[1] + 1))
        if permutations:
            vals = np.array([rng.permutation(64) for _ in range(n)], dtype=np.uint8).reshape(n, 64)
        else:
            vals = rng.integers(0, 64, (n, 64)).astype(np.uint8)
        sigs.append(make_sig(f"{prefix}{i:04d}", vals))
    return sigs


def ks_oracle(x, y) -> Fraction:
    """Exact sup |F_x - F_y| evaluated at every sample point."""
    n, m = len(x), len(y)
    return max(abs(Fraction(sum(v <= t for v in x), n) - Fraction(sum(v <= t for v in y), m)) for t in list(x) + list(y))
