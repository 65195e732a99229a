"""Random elastic deformation of training slices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates


@dataclass
class ElasticParams:
    """Sampling ranges for the elastic warp.

    ``smoothing_range`` is the Gaussian width (pixels) applied to the random
    field; ``magnitude_range`` scales the unit-normalised field, which is then
    divided by the image width so the warp strength does not depend on
    resolution. ``affine_degrees`` > 0 adds a small random rotation.
    """

    smoothing_range: tuple = (20.0, 30.0)
    magnitude_range: tuple = (0.0, 450.0)
    probability: float = 1.0 / 3.0
    affine_degrees: float = 0.0

    def __post_init__(self):
        for lo, hi in (self.smoothing_range, self.magnitude_range):
            if lo < 0 or hi < lo:
                raise ValueError("ranges must be non-negative and ordered")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must lie in [0, 1]")


def displacement_field(shape, smoothing, magnitude, rng):
    """Smoothed uniform noise, unit-normalised, scaled to ``magnitude / width`` pixels."""
    field = rng.uniform(-1.0, 1.0, size=(2,) + tuple(shape))
    field = np.stack([gaussian_filter(f, smoothing, mode="constant") for f in field])
    peak = np.abs(field).max()
    if peak > 0:
        field /= peak
    return field * (magnitude / shape[1])


def warp(image, label, field, degrees=0.0):
    h, w = image.shape
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                             indexing="ij")
    if degrees:
        t = np.radians(degrees)
        cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
        r0, c0 = rows - cr, cols - cc
        rows = cr + np.cos(t) * r0 - np.sin(t) * c0
        cols = cc + np.sin(t) * r0 + np.cos(t) * c0
    coords = np.stack([rows + field[0], cols + field[1]])
    out_image = map_coordinates(image, coords, order=1, mode="nearest").astype(image.dtype)
    out_label = None
    if label is not None:
        out_label = map_coordinates(label, coords, order=0, mode="nearest").astype(label.dtype)
    return out_image, out_label


def elastic_deform(image, label, p: ElasticParams, rng: np.random.Generator, force=False):
    """Warp ``(image, label)`` with probability ``p.probability`` (always if ``force``).

    Labels use nearest-neighbour lookup, so no new classes appear. The draw
    order from ``rng`` is fixed, which makes the result reproducible.
    """
    image = np.asarray(image)
    if label is not None and np.shape(label) != image.shape:
        raise ValueError("image and label must have the same shape")
    if not force and rng.random() >= p.probability:
        return image.copy(), None if label is None else np.array(label, copy=True)
    smoothing = rng.uniform(*p.smoothing_range)
    magnitude = rng.uniform(*p.magnitude_range)
    degrees = rng.uniform(-p.affine_degrees, p.affine_degrees) if p.affine_degrees else 0.0
    field = displacement_field(image.shape, smoothing, magnitude, rng)
    return warp(image, None if label is None else np.asarray(label), field, degrees)
