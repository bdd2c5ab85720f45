"""Turning head outputs into world-space candidates and scoring them with FROC."""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .ctio import NoduleAnnotation
from .exceptions import DataError, DegenerateInputError
from .objective import AnchorSpec, cube_iou, decode, sigmoid

FROC_OPERATING_POINTS = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
CANDIDATE_HEADER = ["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm", "probability"]


@dataclass
class Candidate:
    series_id: str
    center_world_mm: Tuple[float, float, float]  # (x, y, z)
    diameter_mm: float
    probability: float

    def __post_init__(self):
        self.center_world_mm = tuple(float(c) for c in self.center_world_mm)
        self.diameter_mm = float(self.diameter_mm)
        self.probability = float(self.probability)
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability {self.probability} outside [0, 1]")
        if not self.diameter_mm > 0:
            raise ValueError(f"diameter must be positive, got {self.diameter_mm}")


@dataclass(frozen=True)
class CropTransform:
    """Maps crop-local voxels (z, y, x) to world millimetres."""

    offset_vox: Tuple[float, float, float]
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin_mm: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def to_world(self, local_zyx) -> np.ndarray:
        return ((np.asarray(local_zyx, float) + self.offset_vox) * self.spacing_mm
                + np.asarray(self.origin_mm, float))


def decode_proposals(grid: np.ndarray, anchors: AnchorSpec, transform: CropTransform,
                     score_threshold: float = 0.5, series_id: str = "",
                     cell_mask: Optional[np.ndarray] = None) -> List[Candidate]:
    """Candidates for every (cell, anchor) of one crop whose probability clears the threshold.

    ``grid`` is (s, s, s, A, 5); ``cell_mask`` (s, s, s) restricts decoding to some cells.
    """
    grid = np.asarray(grid, float)
    if grid.ndim == 6:
        if grid.shape[0] != 1:
            raise ValueError("decode one crop at a time")
        grid = grid[0]
    s = grid.shape[0]
    prob = sigmoid(grid[..., 0])
    keep = prob >= score_threshold
    if cell_mask is not None:
        keep &= np.asarray(cell_mask, bool)[..., None]
    if not keep.any():
        return []
    centers = anchors.centers(s)[..., None, :].repeat(anchors.n_anchors, axis=-2)
    diam = np.broadcast_to(np.asarray(anchors.diameters_vox), keep.shape)
    c_vox, d_vox = decode(grid[..., 1:][keep], centers[keep], diam[keep])
    world = transform.to_world(c_vox)
    spacing = float(np.mean(transform.spacing_mm))
    return [Candidate(series_id, (w[2], w[1], w[0]), d * spacing, p)
            for w, d, p in zip(world, d_vox, prob[keep])]


def _centers_zyx(cands: Sequence[Candidate]) -> np.ndarray:
    return np.array([[c.center_world_mm[2], c.center_world_mm[1], c.center_world_mm[0]] for c in cands])


def nms_3d(cands: Sequence[Candidate], iou_threshold: float = 0.1, enabled: bool = True) -> List[Candidate]:
    """Greedy suppression in descending probability using cube IoU, per series."""
    if not enabled:
        return list(cands)
    by_series: Dict[str, List[Candidate]] = defaultdict(list)
    for c in cands:
        by_series[c.series_id].append(c)
    kept: List[Candidate] = []
    for series in by_series.values():
        order = sorted(range(len(series)), key=lambda i: -series[i].probability)
        ordered = [series[i] for i in order]
        centers = _centers_zyx(ordered)
        diam = np.array([c.diameter_mm for c in ordered])
        alive = np.ones(len(ordered), bool)
        for i in range(len(ordered)):
            if not alive[i]:
                continue
            kept.append(ordered[i])
            rest = np.flatnonzero(alive[i + 1:]) + i + 1
            if rest.size:
                iou = cube_iou(centers[rest], diam[rest], np.broadcast_to(centers[i], (rest.size, 3)),
                               np.full(rest.size, diam[i]))
                alive[rest[iou > iou_threshold]] = False
    return kept


def is_hit(c: Candidate, n: NoduleAnnotation) -> bool:
    """True iff the candidate centre lies strictly inside the nodule's radius."""
    d = np.linalg.norm(np.subtract(c.center_world_mm, n.center_world_mm))
    return bool(d < n.diameter_mm / 2)


@dataclass
class FrocCurve:
    thresholds: np.ndarray
    fps_per_scan: np.ndarray
    sensitivity: np.ndarray
    operating_points: Tuple[float, ...]
    operating_sensitivity: np.ndarray
    mean_score: float

    def sensitivity_at(self, fps: float) -> float:
        return float(_interp_curve(self.fps_per_scan, self.sensitivity, [fps])[0])


def _interp_curve(fps: np.ndarray, sens: np.ndarray, at: Sequence[float]) -> np.ndarray:
    """Linear interpolation on the curve anchored at the origin; flat beyond the last point."""
    xs = np.concatenate([[0.0], np.asarray(fps, float)])
    ys = np.concatenate([[0.0], np.asarray(sens, float)])
    ux = np.unique(xs)
    uy = np.array([ys[xs == x].max() for x in ux])
    return np.interp(np.asarray(at, float), ux, uy)


def _match(candidates: Sequence[Candidate], annotations: Sequence[NoduleAnnotation],
           ignore: Sequence[NoduleAnnotation]):
    """Best hitting probability per nodule, probabilities of the false positives, and of every
    candidate that is not dropped by the ignore list."""
    by_series: Dict[str, List[Tuple[int, NoduleAnnotation]]] = defaultdict(list)
    for j, a in enumerate(annotations):
        by_series[a.series_id].append((j, a))
    ignored: Dict[str, List[NoduleAnnotation]] = defaultdict(list)
    for a in ignore:
        ignored[a.series_id].append(a)
    best = np.full(len(annotations), -np.inf)
    fp_probs, kept_probs = [], []
    for c in candidates:
        hit_any = False
        for j, a in by_series.get(c.series_id, ()):
            if is_hit(c, a):
                hit_any = True
                best[j] = max(best[j], c.probability)
        if hit_any:
            kept_probs.append(c.probability)
        elif not any(is_hit(c, a) for a in ignored.get(c.series_id, ())):
            fp_probs.append(c.probability)
            kept_probs.append(c.probability)
    return best, np.asarray(fp_probs, float), np.asarray(kept_probs, float)


def froc(candidates: Sequence[Candidate], annotations: Sequence[NoduleAnnotation], n_scans: int,
         ignore: Sequence[NoduleAnnotation] = (),
         operating_points: Sequence[float] = FROC_OPERATING_POINTS) -> FrocCurve:
    """Sensitivity versus false positives per scan over every probability threshold.

    A nodule counts once; extra candidates on an already-detected nodule are neither
    true nor false positives. Candidates hitting only ``ignore`` nodules are dropped.
    The mean score averages the interpolated sensitivity at ``operating_points``.
    """
    if n_scans <= 0:
        raise DegenerateInputError("FROC needs at least one scan")
    if not annotations:
        raise DegenerateInputError("FROC needs at least one annotated nodule")
    best, fp_probs, kept_probs = _match(candidates, annotations, ignore)
    # every distinct candidate probability is a threshold
    thresholds = np.unique(kept_probs)[::-1]
    n_nod = len(annotations)
    fp_sorted = np.sort(fp_probs)
    nod_sorted = np.sort(best[np.isfinite(best)])
    fps = (fp_sorted.size - np.searchsorted(fp_sorted, thresholds, side="left")) / n_scans
    sens = (nod_sorted.size - np.searchsorted(nod_sorted, thresholds, side="left")) / n_nod
    op = _interp_curve(fps, sens, operating_points)
    return FrocCurve(thresholds, fps, sens, tuple(operating_points), op, float(op.mean()))


def write_candidates(path, cands: Iterable[Candidate]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CANDIDATE_HEADER)
        for c in cands:
            w.writerow([c.series_id, *(f"{v:.4f}" for v in c.center_world_mm), f"{c.diameter_mm:.4f}",
                        f"{c.probability:.6f}"])


def read_candidates(path) -> List[Candidate]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or any(h not in reader.fieldnames for h in CANDIDATE_HEADER):
                raise DataError(f"{path}: expected header {','.join(CANDIDATE_HEADER)}")
            return [Candidate(r["seriesuid"], (float(r["coordX"]), float(r["coordY"]), float(r["coordZ"])),
                              float(r["diameter_mm"]), float(r["probability"])) for r in reader]
    except OSError as exc:
        raise DataError(f"cannot read candidates {path}: {exc}") from exc


def write_froc(path, curve: FrocCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fps_per_scan", "sensitivity"])
        for f, s in zip(curve.fps_per_scan, curve.sensitivity):
            w.writerow([f"{f:.6f}", f"{s:.6f}"])


def format_mean_score(curve: FrocCurve) -> str:
    return f"mean_froc_score={curve.mean_score:.6f}"
