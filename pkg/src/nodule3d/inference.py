"""Whole-scan inference by overlapping crops.

Windows of side ``m`` are placed every ``m/2`` voxels per axis. Each head cell is
decoded only by the window whose centre is nearest to it, so every cell of the
scan is decoded exactly once and never from a window border.
"""
from __future__ import annotations

from itertools import product
from typing import List, Sequence

import numpy as np

from .ctio import CropSpec, CtVolume, extract_crop
from .evaluation import Candidate, CropTransform, decode_proposals, nms_3d
from .network import ProposalNetwork
from .objective import AnchorSpec


def window_starts(extent: int, side: int, stride: int) -> List[int]:
    if extent <= side:
        return [0]
    starts = list(range(0, extent - side + 1, stride))
    if starts[-1] != extent - side:
        starts.append(extent - side)
    return starts


def _ownership(starts: Sequence[int], side: int, cell_stride: int) -> List[np.ndarray]:
    """Per window, the mask of its head cells (1-D) that it owns."""
    s = side // cell_stride
    centers = np.asarray(starts, float) + side / 2
    masks = []
    for w, st in enumerate(starts):
        pos = st + (np.arange(s) + 0.5) * cell_stride
        nearest = np.argmin(np.abs(pos[:, None] - centers[None, :]), axis=1)
        masks.append(nearest == w)
    return masks


def detect(net: ProposalNetwork, volume: CtVolume, anchors: AnchorSpec, series_id: str = "",
           score_threshold: float = 0.1, nms_threshold: float = 0.1, use_nms: bool = True,
           max_candidates: int = 0, batch_size: int = 4) -> List[Candidate]:
    """Candidates for one normalised, resampled volume (network in inference mode)."""
    m = net.cfg.crop_side
    stride = m // 2
    cell = anchors.stride_vox
    per_axis = [window_starts(n, m, stride) for n in volume.shape]
    owners = [_ownership(st, m, cell) for st in per_axis]
    windows = list(product(*[range(len(st)) for st in per_axis]))
    cands: List[Candidate] = []
    for b0 in range(0, len(windows), batch_size):
        chunk = windows[b0:b0 + batch_size]
        starts = [np.array([per_axis[a][i] for a, i in enumerate(w)]) for w in chunk]
        crops = [extract_crop(volume, CropSpec(m, tuple(s + m / 2)))[0][0] for s in starts]
        head = net.forward(np.stack(crops), mode="infer")
        for k, (w, s) in enumerate(zip(chunk, starts)):
            mz, my, mx = (owners[a][i] for a, i in enumerate(w))
            mask = mz[:, None, None] & my[None, :, None] & mx[None, None, :]
            cands += decode_proposals(head.grid[k], anchors, CropTransform(tuple(s), volume.spacing_mm,
                                                                           volume.origin_mm),
                                      score_threshold, series_id, mask)
    cands = nms_3d(cands, nms_threshold, enabled=use_nms)
    cands.sort(key=lambda c: -c.probability)
    if max_candidates:
        cands = cands[:max_candidates]
    return cands
