"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

import numbers
from typing import Dict, List, Sequence, Union

import numpy as np

from .ctio import CtVolume, NoduleAnnotation
from .exceptions import ConfigError, ShapeError


def check_volumes(X) -> List[CtVolume]:
    """Return ``X`` as a list of volumes; a single volume is wrapped."""
    if isinstance(X, CtVolume):
        return [X]
    try:
        vols = list(X)
    except TypeError:
        raise TypeError(f"expected a CtVolume or an iterable of them, got {type(X).__name__}") from None
    for i, v in enumerate(vols):
        if not isinstance(v, CtVolume):
            raise TypeError(f"item {i} is {type(v).__name__}, not CtVolume")
        if not np.all(np.isfinite(v.voxels)):
            raise ValueError(f"volume {i} contains non-finite voxels")
    return vols


def check_isotropic(v: CtVolume, spacing_mm: float = None, atol: float = 1e-4) -> float:
    """Spacing of an isotropic volume; optionally require a specific value."""
    s = np.asarray(v.spacing_mm, float)
    if np.ptp(s) > atol:
        raise ShapeError(f"volume spacing {tuple(s)} is not isotropic; resample it first")
    if spacing_mm is not None and abs(s[0] - spacing_mm) > atol:
        raise ShapeError(f"volume spacing {s[0]} mm differs from the expected {spacing_mm} mm")
    return float(s[0])


def group_annotations(annotations, volumes: Sequence[CtVolume],
                      series_ids: Sequence[str]) -> List[List[NoduleAnnotation]]:
    """Per-volume annotation lists.

    Accepts either one list per volume, or a flat list matched by series id.
    """
    annotations = list(annotations)
    if len(series_ids) != len(volumes):
        raise ShapeError(f"{len(series_ids)} series ids for {len(volumes)} volumes")
    if annotations and all(isinstance(a, NoduleAnnotation) for a in annotations):
        by_id: Dict[str, List[NoduleAnnotation]] = {s: [] for s in series_ids}
        for a in annotations:
            if a.series_id in by_id:
                by_id[a.series_id].append(a)
        return [by_id[s] for s in series_ids]
    if len(annotations) != len(volumes):
        raise ShapeError(f"got {len(annotations)} annotation lists for {len(volumes)} volumes")
    return [list(a) for a in annotations]


def check_scalar(x, name: str, target_type=numbers.Real, min_val=None, max_val=None,
                 include_min: bool = True, include_max: bool = True):
    if isinstance(x, bool) or not isinstance(x, target_type):
        raise ConfigError(f"{name} must be {getattr(target_type, '__name__', target_type)}, got {x!r}")
    if min_val is not None and (x < min_val or (x == min_val and not include_min)):
        raise ConfigError(f"{name}={x} is below the allowed minimum {min_val}")
    if max_val is not None and (x > max_val or (x == max_val and not include_max)):
        raise ConfigError(f"{name}={x} is above the allowed maximum {max_val}")
    return x


def check_crop_side(m: int) -> int:
    check_scalar(m, "crop_side", numbers.Integral, 16)
    if m % 16:
        raise ConfigError(f"crop_side {m} must be a multiple of 16")
    return int(m)


def series_ids_of(volumes: Sequence[CtVolume], series_ids: Union[Sequence[str], None]) -> List[str]:
    if series_ids is None:
        return [f"volume-{i:04d}" for i in range(len(volumes))]
    series_ids = list(series_ids)
    if len(series_ids) != len(volumes):
        raise ShapeError(f"{len(series_ids)} series ids for {len(volumes)} volumes")
    return series_ids
