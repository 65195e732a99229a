"""Linear fusion of per-plane class probabilities into a single segmentation.

For each voxel ``x`` and class ``c`` the fused score is::

    z(x)_c = sum_k W[k, c] * p[k, x, c] + beta[c]

and the label is ``argmax_c softmax(z)_c`` (lowest class on ties). ``W`` and
``beta`` are fitted on validation predictions by minimising voxel-wise
cross-entropy of ``softmax(z)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nncore.layers import softmax


class FusionError(ValueError):
    pass


@dataclass
class FusionParams:
    W: np.ndarray                 # (|V|, C)
    beta: np.ndarray              # (C,)
    vectors: list | None = None   # view vectors the rows of W belong to
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.W.ndim != 2 or self.beta.shape != (self.W.shape[1],):
            raise FusionError(f"W {self.W.shape} and beta {self.beta.shape} do not agree")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.beta))):
            raise FusionError("fusion parameters must be finite")

    @property
    def num_planes(self):
        return self.W.shape[0]

    @property
    def num_classes(self):
        return self.W.shape[1]

    @classmethod
    def uniform(cls, num_planes, num_classes, vectors=None):
        """Plain averaging: ``W = 1/|V|``, ``beta = 0``."""
        return cls(np.full((num_planes, num_classes), 1.0 / num_planes), np.zeros(num_classes),
                   vectors)

    def to_dict(self):
        return {
            "vectors": None if self.vectors is None else [list(map(float, v)) for v in self.vectors],
            "W": self.W.tolist(),
            "beta": self.beta.tolist(),
            "info": self.info,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["W"], dtype=np.float64), np.array(d["beta"], dtype=np.float64),
                   d.get("vectors"), d.get("info", {}))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _stack(prob_volumes):
    if isinstance(prob_volumes, np.ndarray):
        probs = prob_volumes
    else:
        probs = list(prob_volumes)
        if not probs:
            raise FusionError("need at least one probability volume")
        shapes = {np.shape(p) for p in probs}
        if len(shapes) != 1:
            raise FusionError(f"probability volumes disagree in shape: {sorted(shapes)}")
        probs = np.stack([np.asarray(p) for p in probs])
    return probs


def scores(probs, W, beta):
    """``z`` for stacked probabilities ``(V, ..., C)``."""
    return np.einsum("v...c,vc->...c", probs, W, optimize=True) + beta


def fuse(prob_volumes, fp: FusionParams, check=True):
    """Fuse ``|V|`` probability volumes; returns ``(z, labels)``.

    ``prob_volumes`` is a list of equally shaped ``(..., C)`` arrays or an array
    stacked along a leading plane axis.
    """
    probs = _stack(prob_volumes)
    if probs.shape[0] != fp.num_planes or probs.shape[-1] != fp.num_classes:
        raise FusionError(f"got {probs.shape[0]} planes x {probs.shape[-1]} classes, fusion "
                          f"expects {fp.num_planes} x {fp.num_classes}")
    if check:
        sums = probs.sum(axis=-1, dtype=np.float64)
        if np.any(np.abs(sums - 1.0) > 1e-5):
            raise FusionError("plane probabilities must sum to 1 per voxel")
    z = scores(probs.astype(np.float64, copy=False), fp.W, fp.beta)
    # argmax of softmax(z) equals argmax of z; np.argmax returns the first maximum
    return z, np.argmax(z, axis=-1).astype(np.uint8)


def fusion_loss(W, beta, probs, labels):
    """Mean cross-entropy of ``softmax(z)`` and its gradients.

    ``probs`` is ``(V, n, C)``, ``labels`` ``(n,)``.
    """
    z = scores(probs, W, beta)
    p = softmax(z)
    n = labels.shape[0]
    rows = np.arange(n)
    value = -np.mean(np.log(np.maximum(p[rows, labels], 1e-300)))
    dz = p
    dz[rows, labels] -= 1.0
    dz /= n
    dW = np.einsum("vnc,nc->vc", probs, dz, optimize=True)
    return float(value), dW, dz.sum(axis=0)


def balanced_sample(labels, max_voxels, rng):
    """Indices with background and foreground in equal numbers.

    Foreground is drawn with replacement when it is the rarer part, so the two
    halves always match. At most ``max_voxels`` indices are returned.
    """
    labels = np.asarray(labels).ravel()
    fg = np.flatnonzero(labels > 0)
    if fg.size == 0:
        raise FusionError("validation truth contains no foreground voxels")
    bg = np.flatnonzero(labels == 0)
    if bg.size == 0:
        take = min(fg.size, int(max_voxels))
        return np.sort(rng.choice(fg, size=take, replace=False))
    half = max(1, int(max_voxels) // 2)
    n_bg = min(bg.size, half)
    bg_idx = rng.choice(bg, size=n_bg, replace=False)
    fg_idx = rng.choice(fg, size=n_bg, replace=fg.size < n_bg)
    return np.sort(np.concatenate([bg_idx, fg_idx]))


def fit_fusion(val_prob_volumes, val_truth, steps=200, step_size=0.1, max_voxels=1_000_000,
               seed=0, vectors=None, balance=True) -> FusionParams:
    """Fit ``W`` and ``beta`` on validation subjects.

    ``val_prob_volumes`` holds, per subject, the ``|V|`` plane probability
    volumes; ``val_truth`` the matching label arrays. Starts at plain averaging
    and runs full-batch gradient descent. A step is only accepted when it
    lowers the loss; otherwise the step size is halved. The fit-set loss can
    therefore never end above the averaging loss. Losses are recorded in
    ``info``.
    """
    val_prob_volumes = list(val_prob_volumes)
    val_truth = list(val_truth)
    if not val_prob_volumes or len(val_prob_volumes) != len(val_truth):
        raise FusionError("need one truth volume per validation subject (at least one)")
    rng = np.random.default_rng(seed)
    feats, labs = [], []
    budget = max(1, int(max_voxels) // len(val_prob_volumes))
    for planes, truth in zip(val_prob_volumes, val_truth):
        probs = _stack(planes)
        truth = np.asarray(truth)
        if probs.shape[1:-1] != truth.shape:
            raise FusionError(f"prediction grid {probs.shape[1:-1]} != truth {truth.shape}")
        flat = probs.reshape(probs.shape[0], -1, probs.shape[-1])
        labels = truth.ravel().astype(np.int64)
        if labels.max(initial=0) >= probs.shape[-1]:
            raise FusionError("truth contains classes beyond the prediction channels")
        if balance:
            idx = balanced_sample(labels, budget, rng) if np.any(labels > 0) else None
        else:
            idx = np.sort(rng.choice(labels.size, size=min(budget, labels.size), replace=False))
        if idx is None:
            continue
        feats.append(flat[:, idx].astype(np.float64))
        labs.append(labels[idx])
    if not feats:
        raise FusionError("validation truth contains no foreground voxels")
    probs = np.concatenate(feats, axis=1)
    labels = np.concatenate(labs)

    num_planes, _, num_classes = probs.shape
    start = FusionParams.uniform(num_planes, num_classes)
    W, beta = start.W.copy(), start.beta.copy()
    value, dW, dbeta = fusion_loss(W, beta, probs, labels)
    initial = value
    eta = step_size
    accepted = 0
    for _ in range(steps):
        W_new, beta_new = W - eta * dW, beta - eta * dbeta
        new_value, new_dW, new_dbeta = fusion_loss(W_new, beta_new, probs, labels)
        if new_value < value:
            W, beta, value, dW, dbeta = W_new, beta_new, new_value, new_dW, new_dbeta
            accepted += 1
        else:
            eta *= 0.5
    info = {"initial_loss": initial, "final_loss": value, "accepted_steps": accepted,
            "fit_voxels": int(labels.size), "final_step_size": eta}
    return FusionParams(W, beta, vectors, info)
