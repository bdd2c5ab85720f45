"""Anchors, target assignment and the classification + regression loss.

Coordinates inside a crop are voxel positions in (z, y, x) order; regression
values follow the head layout ``(t_x, t_y, t_z, t_d)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np

from .exceptions import ConfigError, ShapeError

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1
POS_IOU = 0.5
NEG_IOU = 0.02
HEAD_STRIDE = 4


@dataclass(frozen=True)
class AnchorSpec:
    """Anchor cube diameters (voxels at the working resolution) on a stride-4 grid."""

    diameters_vox: Tuple[float, ...]
    stride_vox: int = HEAD_STRIDE

    def __post_init__(self):
        object.__setattr__(self, "diameters_vox", tuple(float(d) for d in self.diameters_vox))
        if not self.diameters_vox:
            raise ConfigError("anchor list is empty")
        if min(self.diameters_vox) <= 0:
            raise ConfigError("anchor diameters must be positive")

    @classmethod
    def from_mm(cls, anchors_mm: Sequence[float], spacing_mm: float = 1.0) -> "AnchorSpec":
        return cls(tuple(a / spacing_mm for a in anchors_mm))

    @property
    def n_anchors(self) -> int:
        return len(self.diameters_vox)

    def centers(self, grid_side: int) -> np.ndarray:
        """(s, s, s, 3) anchor centres in crop voxels, (z, y, x) order."""
        c = (np.arange(grid_side) + 0.5) * self.stride_vox
        zz, yy, xx = np.meshgrid(c, c, c, indexing="ij")
        return np.stack([zz, yy, xx], axis=-1)


@dataclass
class TargetAssignment:
    """Per-(cell, anchor) labels and, for positives, regression targets ``v``.

    ``labels`` has shape ``(..., s, s, s, A)`` with values POSITIVE/NEGATIVE/IGNORE;
    ``targets`` has one more trailing axis of 4 (v_x, v_y, v_z, v_d).
    """

    labels: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if self.targets.shape != self.labels.shape + (4,):
            raise ShapeError(f"targets {self.targets.shape} do not match labels {self.labels.shape}")

    @classmethod
    def stack(cls, items: Iterable["TargetAssignment"]) -> "TargetAssignment":
        items = list(items)
        return cls(np.stack([t.labels for t in items]), np.stack([t.targets for t in items]))

    @property
    def n_positive(self) -> int:
        return int((self.labels == POSITIVE).sum())


def cube_iou(center_a, d_a, center_b, d_b) -> np.ndarray:
    """IoU of axis-aligned cubes given centres (..., 3) and side lengths (...)."""
    center_a, center_b = np.asarray(center_a, float), np.asarray(center_b, float)
    d_a, d_b = np.asarray(d_a, float), np.asarray(d_b, float)
    lo = np.maximum(center_a - d_a[..., None] / 2, center_b - d_b[..., None] / 2)
    hi = np.minimum(center_a + d_a[..., None] / 2, center_b + d_b[..., None] / 2)
    inter = np.prod(np.clip(hi - lo, 0, None), axis=-1)
    union = d_a ** 3 + d_b ** 3 - inter
    return inter / union


def encode(nodule_center, nodule_d, anchor_center, anchor_d) -> np.ndarray:
    """Offsets (v_x, v_y, v_z, v_d) of a nodule relative to an anchor; centres are (z, y, x)."""
    dz, dy, dx = (np.asarray(nodule_center, float) - np.asarray(anchor_center, float)) / anchor_d
    return np.array([dx, dy, dz, np.log(nodule_d / anchor_d)])


def decode(t, anchor_center, anchor_d) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`encode`; vectorised over leading axes. Returns ((z, y, x), d)."""
    t = np.asarray(t, float)
    anchor_center = np.asarray(anchor_center, float)
    anchor_d = np.asarray(anchor_d, float)
    shift = np.stack([t[..., 2], t[..., 1], t[..., 0]], axis=-1) * anchor_d[..., None]
    return anchor_center + shift, anchor_d * np.exp(t[..., 3])


def assign_targets(nodules: Sequence[Tuple[Sequence[float], float]], anchors: AnchorSpec,
                   grid_side: int) -> TargetAssignment:
    """Label every (cell, anchor) of one crop against the nodules inside it.

    ``nodules`` holds ``(center_vox_zyx, diameter_vox)`` pairs in crop coordinates.
    """
    if anchors.n_anchors == 0:
        raise ConfigError("anchor list is empty")
    a = anchors.n_anchors
    centers = anchors.centers(grid_side)[..., None, :].repeat(a, axis=-2)      # (s,s,s,A,3)
    diam = np.broadcast_to(np.asarray(anchors.diameters_vox), centers.shape[:-1])
    labels = np.full(centers.shape[:-1], NEGATIVE, dtype=np.int8)
    targets = np.zeros(centers.shape[:-1] + (4,), dtype=np.float32)
    if not nodules:
        return TargetAssignment(labels, targets)
    ious = np.stack([cube_iou(centers, diam, np.broadcast_to(np.asarray(c, float), centers.shape),
                              np.full(diam.shape, float(d)))
                     for c, d in nodules])                                      # (K,s,s,s,A)
    best_iou = ious.max(axis=0)
    owner = ious.argmax(axis=0)
    positive = best_iou >= POS_IOU
    # every nodule keeps its single best anchor; contested anchors go to the higher IoU
    forced = {}
    for k in range(len(nodules)):
        idx = np.unravel_index(int(np.argmax(ious[k])), best_iou.shape)
        if idx not in forced or ious[k][idx] > ious[forced[idx]][idx]:
            forced[idx] = k
    for idx, k in forced.items():
        owner[idx] = k
        positive[idx] = True
    labels[best_iou >= NEG_IOU] = IGNORE
    labels[positive] = POSITIVE
    for idx in zip(*np.nonzero(positive)):
        c, d = nodules[owner[idx]]
        targets[idx] = encode(c, d, centers[idx], diam[idx])
    return TargetAssignment(labels, targets)


def smooth_l1(x):
    x = np.asarray(x, float)
    ax = np.abs(x)
    return np.where(ax < 1, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x):
    return np.clip(np.asarray(x, float), -1.0, 1.0)


def sigmoid(z):
    z = np.asarray(z, float)
    return np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))))


def bce_loss(logit, g):
    """Binary cross-entropy on logits; returns (loss, d loss / d logit) elementwise."""
    z = np.asarray(logit, float)
    g = np.asarray(g, float)
    loss = np.maximum(z, 0) - z * g + np.log1p(np.exp(-np.abs(z)))
    return loss, sigmoid(z) - g


def select_classification(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Boolean mask of anchors entering the classification loss.

    Per crop: every positive plus the ``max(2 * n_pos, 1)`` negatives with the highest loss.
    """
    mask = labels == POSITIVE
    for b in range(labels.shape[0]):
        lab = labels[b].ravel()
        neg = np.flatnonzero(lab == NEGATIVE)
        if neg.size == 0:
            continue
        n_neg = min(max(2 * int((lab == POSITIVE).sum()), 1), neg.size)
        neg_loss, _ = bce_loss(logits[b].ravel()[neg], 0.0)
        # stable sort keeps ties deterministic
        hardest = neg[np.argsort(-neg_loss, kind="stable")[:n_neg]]
        m = mask[b].reshape(-1)
        m[hardest] = True
    return mask


def multitask_loss(grid: np.ndarray, ta: TargetAssignment):
    """Total, classification and localisation loss plus the gradient w.r.t. ``grid``.

    ``grid`` is a head output of shape (n, s, s, s, A, 5); ``ta`` is batched to match.
    """
    grid = np.asarray(grid)
    if ta.labels.ndim == grid.ndim - 2:
        ta = TargetAssignment(ta.labels[None], ta.targets[None])
    if grid.shape[:-1] != ta.labels.shape or grid.shape[-1] != 5:
        raise ShapeError(f"head {grid.shape} does not match assignment {ta.labels.shape}")
    logits = grid[..., 0].astype(np.float64)
    grad = np.zeros(grid.shape, np.float64)
    sel = select_classification(logits, ta.labels)
    n_sel = int(sel.sum())
    loss_cls = 0.0
    if n_sel:
        g = (ta.labels[sel] == POSITIVE).astype(float)
        l, dl = bce_loss(logits[sel], g)
        loss_cls = float(l.sum() / n_sel)
        grad[..., 0][sel] = dl / n_sel
    pos = ta.labels == POSITIVE
    n_pos = int(pos.sum())
    loss_loc = 0.0
    if n_pos:
        diff = grid[..., 1:][pos].astype(np.float64) - ta.targets[pos]
        loss_loc = float(smooth_l1(diff).sum() / n_pos)
        grad[..., 1:][pos] = smooth_l1_grad(diff) / n_pos
    return loss_cls + loss_loc, loss_cls, loss_loc, grad.astype(grid.dtype)
