"""CT volumes: file formats, isotropic resampling, crops and synthetic scans.

Voxel arrays are indexed (z, y, x); spacing and origin follow the same order.
Annotations keep the LUNA'16 world convention (x, y, z) in millimetres.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConfigError, DataError, GenerationError

HU_MIN, HU_MAX = -1000.0, 400.0
PAD_VALUE = 0.0
NVOL_MAGIC = b"NVOL"
NVOL_VERSION = 1
ANNOTATION_HEADER = ["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"]


@dataclass
class CtVolume:
    voxels: np.ndarray
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin_mm: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise DataError(f"volume must be 3-D, got shape {self.voxels.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.origin_mm = tuple(float(o) for o in self.origin_mm)
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ConfigError(f"spacing must be three positive values, got {self.spacing_mm}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.voxels.shape

    def world_to_voxel(self, p_mm_zyx) -> np.ndarray:
        return (np.asarray(p_mm_zyx, float) - self.origin_mm) / self.spacing_mm

    def voxel_to_world(self, p_vox_zyx) -> np.ndarray:
        return np.asarray(p_vox_zyx, float) * self.spacing_mm + self.origin_mm


@dataclass
class NoduleAnnotation:
    series_id: str
    center_world_mm: Tuple[float, float, float]  # (x, y, z)
    diameter_mm: float

    def __post_init__(self):
        self.center_world_mm = tuple(float(c) for c in self.center_world_mm)
        self.diameter_mm = float(self.diameter_mm)
        if self.diameter_mm <= 0:
            raise DataError(f"nodule diameter must be positive, got {self.diameter_mm}")

    @property
    def center_zyx(self) -> np.ndarray:
        x, y, z = self.center_world_mm
        return np.array([z, y, x])


@dataclass
class CropSpec:
    side: int
    center_vox: Tuple[float, float, float]
    nodules: List[Tuple[np.ndarray, float]] = field(default_factory=list)


def world_to_voxel(v: CtVolume, p_mm_zyx) -> np.ndarray:
    return v.world_to_voxel(p_mm_zyx)


def voxel_to_world(v: CtVolume, p_vox_zyx) -> np.ndarray:
    return v.voxel_to_world(p_vox_zyx)


def annotation_to_voxel(v: CtVolume, ann: NoduleAnnotation) -> Tuple[np.ndarray, float]:
    """Centre in (z, y, x) voxels and diameter in voxels (isotropic spacing assumed)."""
    return v.world_to_voxel(ann.center_zyx), ann.diameter_mm / float(np.mean(v.spacing_mm))


# ---------------------------------------------------------------------------
# resampling and intensity
# ---------------------------------------------------------------------------

def _linear_axis(a: np.ndarray, axis: int, positions: np.ndarray) -> np.ndarray:
    """Linear interpolation along one axis at fractional indices, clamped to the edges."""
    n = a.shape[axis]
    p = np.clip(positions, 0, n - 1)
    lo = np.floor(p).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    frac = (p - lo).astype(np.float64)
    shape = [1] * a.ndim
    shape[axis] = -1
    frac = frac.reshape(shape)
    a_lo = np.take(a, lo, axis=axis)
    a_hi = np.take(a, hi, axis=axis)
    return a_lo * (1 - frac) + a_hi * frac


def resampled_extent(extent: int, spacing: float, target_mm: float) -> int:
    return max(1, int(np.floor(extent * spacing / target_mm + 0.5)))


def resample_isotropic(v: CtVolume, target_mm: float) -> CtVolume:
    """Trilinear resampling to spacing ``target_mm`` on every axis; origin is preserved."""
    if not target_mm > 0:
        raise ConfigError(f"target spacing must be positive, got {target_mm}")
    data = v.voxels.astype(np.float64)
    for axis, (n, s) in enumerate(zip(v.shape, v.spacing_mm)):
        out_n = resampled_extent(n, s, target_mm)
        data = _linear_axis(data, axis, np.arange(out_n) * target_mm / s)
    return CtVolume(data.astype(np.float32), (target_mm,) * 3, v.origin_mm)


def normalize_intensity(v: CtVolume) -> CtVolume:
    """Clip to the [-1000, 400] HU window and map it linearly onto [0, 1]."""
    x = (np.clip(v.voxels, HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)
    return CtVolume(x.astype(np.float32), v.spacing_mm, v.origin_mm)


# ---------------------------------------------------------------------------
# crops
# ---------------------------------------------------------------------------

def crop_origin(spec: CropSpec) -> np.ndarray:
    """Integer voxel index (z, y, x) of the crop's first voxel."""
    return np.floor(np.asarray(spec.center_vox, float) - spec.side / 2 + 0.5).astype(int)


def extract_crop(v: CtVolume, spec: CropSpec, nodules_vox: Sequence[Tuple[Sequence[float], float]] = ()):
    """Cut an m^3 block centred at ``spec.center_vox``; outside reads are ``PAD_VALUE``.

    ``nodules_vox`` are ``(center_zyx, diameter)`` in volume voxels; the ones whose
    centre falls inside the crop are returned in crop-local voxels.
    Returns ``(tensor of shape (1, 1, m, m, m), local_nodules)``.
    """
    m = int(spec.side)
    start = crop_origin(spec)
    out = np.full((m, m, m), PAD_VALUE, dtype=np.float32)
    src_lo = np.maximum(start, 0)
    src_hi = np.minimum(start + m, v.shape)
    if np.all(src_hi > src_lo):
        dst_lo = src_lo - start
        dst_hi = dst_lo + (src_hi - src_lo)
        out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = \
            v.voxels[src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]]
    local = []
    for c, d in nodules_vox:
        lc = np.asarray(c, float) - start
        if np.all(lc >= 0) and np.all(lc < m):
            local.append((lc, float(d)))
    spec.nodules = local
    return out[None, None], local


def sample_training_crops(shape: Sequence[int], nodules_vox: Sequence[Tuple[Sequence[float], float]],
                          side: int, rng: np.random.Generator, positive_fraction: float = 0.7,
                          jitter: Optional[float] = None) -> Iterator[CropSpec]:
    """Endless stream of crop placements.

    With probability ``positive_fraction`` (and at least one nodule) the crop is centred on
    a random nodule plus uniform jitter of up to ``jitter`` voxels per axis (default m/4);
    otherwise the centre is uniform over the volume.
    """
    jitter = side / 4 if jitter is None else float(jitter)
    shape = np.asarray(shape, float)
    lo = np.minimum(side / 2, shape / 2)
    hi = np.maximum(shape - side / 2, shape / 2)
    while True:
        if nodules_vox and rng.random() < positive_fraction:
            c, _ = nodules_vox[rng.integers(len(nodules_vox))]
            center = np.asarray(c, float) + rng.uniform(-jitter, jitter, 3)
        else:
            center = rng.uniform(lo, hi)
        yield CropSpec(side, tuple(center))


# ---------------------------------------------------------------------------
# synthetic scans
# ---------------------------------------------------------------------------

BACKGROUND_HU = (-900.0, -700.0)
NODULE_HU = (-100.0, 100.0)
NODULE_DIAMETER_MM = (4.0, 30.0)
VOXEL_NOISE_HU = 25.0


def _smooth_field(rng: np.random.Generator, shape, coarse: int = 6) -> np.ndarray:
    grid = rng.random((coarse,) * 3)
    field_ = grid
    for axis, n in enumerate(shape):
        field_ = _linear_axis(field_, axis, np.linspace(0, coarse - 1, n))
    return field_


def generate_synthetic_volume(seed: int, n_nodules: int, side_mm: float = 128.0, spacing: float = 1.0,
                              series_id: Optional[str] = None, max_tries: int = 1000,
                              noise_hu: float = VOXEL_NOISE_HU) -> Tuple[CtVolume, List[NoduleAnnotation]]:
    """Lung-like noise with non-overlapping spherical nodules.

    Nodule diameters are log-uniform on [4, 30] mm, intensities uniform on [-100, 100] HU,
    with a linear one-voxel edge. Annotations are world millimetres.
    """
    rng = np.random.default_rng(seed)
    n = max(1, int(round(side_mm / spacing)))
    shape = (n, n, n)
    lo_hu, hi_hu = BACKGROUND_HU
    vol = lo_hu + (hi_hu - lo_hu) * _smooth_field(rng, shape)
    vol += rng.normal(0.0, noise_hu, shape)
    series_id = series_id or f"synth-{seed:06d}"
    centers: List[np.ndarray] = []
    diameters: List[float] = []
    for _ in range(n_nodules):
        for _attempt in range(max_tries):
            d = float(np.exp(rng.uniform(*np.log(NODULE_DIAMETER_MM))))
            r = d / 2
            margin = r + 2.0
            if 2 * margin >= side_mm:
                continue
            c = rng.uniform(margin, side_mm - margin, 3)
            if all(np.linalg.norm(c - c2) > r + d2 / 2 + 2.0 for c2, d2 in zip(centers, diameters)):
                break
        else:
            raise GenerationError(f"could not place {n_nodules} non-overlapping nodules in {max_tries} tries")
        centers.append(c)
        diameters.append(d)
    for c, d in zip(centers, diameters):
        value = rng.uniform(*NODULE_HU)
        r = d / 2
        box_lo = np.maximum(np.floor((c - r - 1.5 * spacing) / spacing).astype(int), 0)
        box_hi = np.minimum(np.ceil((c + r + 1.5 * spacing) / spacing).astype(int) + 1, n)
        zz, yy, xx = np.meshgrid(*[np.arange(a, b) for a, b in zip(box_lo, box_hi)], indexing="ij")
        pts = np.stack([zz, yy, xx], -1) * spacing
        dist = np.linalg.norm(pts - c, axis=-1)
        weight = np.clip((r - dist) / spacing + 0.5, 0.0, 1.0)
        sub = vol[box_lo[0]:box_hi[0], box_lo[1]:box_hi[1], box_lo[2]:box_hi[2]]
        sub += weight * (value + rng.normal(0.0, noise_hu, sub.shape) - sub)
    volume = CtVolume(vol.astype(np.float32), (spacing,) * 3, (0.0, 0.0, 0.0))
    anns = [NoduleAnnotation(series_id, (c[2], c[1], c[0]), d) for c, d in zip(centers, diameters)]
    return volume, anns


def generate_synthetic_dataset(seed: int, n_volumes: int, n_nodules: int = 3, side_mm: float = 128.0,
                               spacing: float = 1.0) -> Tuple[List[str], List[CtVolume], List[NoduleAnnotation]]:
    """``n_volumes`` synthetic scans; volume ``i`` uses generator seed ``seed * 100003 + i``."""
    ids, vols, anns = [], [], []
    for i in range(n_volumes):
        sid = f"synth-{seed:04d}-{i:04d}"
        v, a = generate_synthetic_volume(seed * 100_003 + i, n_nodules, side_mm, spacing, series_id=sid)
        ids.append(sid)
        vols.append(v)
        anns += a
    return ids, vols, anns


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_nvol(path, v: CtVolume) -> None:
    d, h, w = v.shape
    header = NVOL_MAGIC + struct.pack("<I3I3f3f", NVOL_VERSION, d, h, w, *v.spacing_mm, *v.origin_mm)
    Path(path).write_bytes(header + np.ascontiguousarray(v.voxels, dtype="<f4").tobytes())


def read_nvol(path) -> CtVolume:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read volume {path}: {exc}") from exc
    if data[:4] != NVOL_MAGIC:
        raise DataError(f"{path} is not an NVOL file")
    head = struct.calcsize("<I3I3f3f")
    try:
        version, d, h, w, sz, sy, sx, oz, oy, ox = struct.unpack_from("<I3I3f3f", data, 4)
    except struct.error as exc:
        raise DataError(f"truncated NVOL header in {path}") from exc
    if version != NVOL_VERSION:
        raise DataError(f"unsupported NVOL version {version} in {path}")
    count = d * h * w
    if len(data) != 4 + head + 4 * count:
        raise DataError(f"{path}: payload size does not match dims {(d, h, w)}")
    vox = np.frombuffer(data, dtype="<f4", count=count, offset=4 + head).reshape(d, h, w)
    return CtVolume(vox.astype(np.float32), (sz, sy, sx), (oz, oy, ox))


def write_annotations(path, anns: Sequence[NoduleAnnotation]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_HEADER)
        for a in anns:
            writer.writerow([a.series_id, *(repr(float(c)) for c in a.center_world_mm), repr(a.diameter_mm)])


def read_annotations(path) -> List[NoduleAnnotation]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or any(h not in reader.fieldnames for h in ANNOTATION_HEADER):
                raise DataError(f"{path}: expected header {','.join(ANNOTATION_HEADER)}")
            return [NoduleAnnotation(r["seriesuid"], (float(r["coordX"]), float(r["coordY"]),
                                                      float(r["coordZ"])), float(r["diameter_mm"]))
                    for r in reader]
    except OSError as exc:
        raise DataError(f"cannot read annotations {path}: {exc}") from exc
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path}: malformed annotation row: {exc}") from exc
