"""scikit-learn style wrappers: preprocessing transformers and the nodule proposer.

Typical use::

    pipe = make_pipeline(IsotropicResampler(1.0), IntensityNormalizer(),
                         NoduleProposer(crop_side=32, epochs=20))
    pipe.fit(volumes, annotations)
    candidates = pipe.predict(test_volumes)
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .ctio import CtVolume, annotation_to_voxel, normalize_intensity, resample_isotropic
from .evaluation import Candidate, FrocCurve, froc
from .inference import detect
from .network import NetworkConfig, build_network, load_store, save_store
from .objective import AnchorSpec
from .trainer import SGD, CropStream, LossRecord, TrainConfig, train
from .validation import check_isotropic, check_scalar, check_volumes, group_annotations, series_ids_of

log = logging.getLogger(__name__)


class IsotropicResampler(TransformerMixin, BaseEstimator):
    """Trilinear resampling of every volume to one spacing on all axes.

    Parameters
    ----------
    spacing_mm : float
        Target voxel spacing in millimetres.
    """

    def __init__(self, spacing_mm: float = 1.0):
        self.spacing_mm = spacing_mm

    def fit(self, X, y=None):
        check_scalar(self.spacing_mm, "spacing_mm", min_val=0, include_min=False)
        check_volumes(X)
        self.n_volumes_seen_ = len(check_volumes(X))
        return self

    def transform(self, X) -> List[CtVolume]:
        check_is_fitted(self, "n_volumes_seen_")
        return [resample_isotropic(v, self.spacing_mm) for v in check_volumes(X)]


class IntensityNormalizer(TransformerMixin, BaseEstimator):
    """Clip to the lung HU window and rescale to [0, 1]. Stateless."""

    def fit(self, X, y=None):
        self.n_volumes_seen_ = len(check_volumes(X))
        return self

    def transform(self, X) -> List[CtVolume]:
        check_is_fitted(self, "n_volumes_seen_")
        return [normalize_intensity(v) for v in check_volumes(X)]


class NoduleProposer(BaseEstimator):
    """The 3-D proposal network as an estimator.

    ``fit(X, y)`` trains on normalised isotropic volumes ``X`` with annotations ``y``
    (one list per volume, or a flat list matched by ``series_ids``). ``predict``
    returns world-space candidates from sliding-window inference; ``score`` is
    the mean FROC sensitivity over the seven standard operating points.
    """

    def __init__(self, group_channels=(24, 32, 64, 64, 64), blocks_per_group=(2, 2, 3, 3, 3),
                 anchors_mm=(10.0, 30.0, 60.0), crop_side: int = 128, engine: str = "gemm",
                 initial_lr: float = 0.01, epochs: int = 100, lr_drop_epochs=(50, 80),
                 lr_drop_factor: float = 0.1, momentum: float = 0.9, weight_decay: float = 1e-4,
                 batch_size: int = 1, crops_per_epoch: int = 16, positive_fraction: float = 0.7,
                 checkpoint_every: int = 10,
                 score_threshold: float = 0.1, nms_threshold: float = 0.1, use_nms: bool = True,
                 max_candidates: int = 0, random_state: int = 0, warm_start: bool = False):
        self.group_channels = group_channels
        self.blocks_per_group = blocks_per_group
        self.anchors_mm = anchors_mm
        self.crop_side = crop_side
        self.engine = engine
        self.initial_lr = initial_lr
        self.epochs = epochs
        self.lr_drop_epochs = lr_drop_epochs
        self.lr_drop_factor = lr_drop_factor
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.crops_per_epoch = crops_per_epoch
        self.positive_fraction = positive_fraction
        self.checkpoint_every = checkpoint_every
        self.score_threshold = score_threshold
        self.nms_threshold = nms_threshold
        self.use_nms = use_nms
        self.max_candidates = max_candidates
        self.random_state = random_state
        self.warm_start = warm_start

    # -- configuration -----------------------------------------------------

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(group_channels=tuple(self.group_channels),
                             blocks_per_group=tuple(self.blocks_per_group),
                             anchors_mm=tuple(self.anchors_mm), crop_side=self.crop_side,
                             engine=self.engine).validate()

    def train_config(self) -> TrainConfig:
        return TrainConfig(initial_lr=self.initial_lr, epochs=self.epochs,
                           lr_drop_epochs=tuple(self.lr_drop_epochs), lr_drop_factor=self.lr_drop_factor,
                           momentum=self.momentum, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, crops_per_epoch=self.crops_per_epoch,
                           rng_seed=self.random_state, positive_fraction=self.positive_fraction,
                           checkpoint_every=self.checkpoint_every).validate()

    def _init_network(self):
        self.network_, self.store_ = build_network(self.network_config(), self.random_state)
        self.optimizer_ = SGD(self.store_, self.momentum, self.weight_decay)
        self.history_: List[LossRecord] = []
        self.n_epochs_trained_ = 0

    def _spacing(self, vols: Sequence[CtVolume]) -> float:
        spacings = {round(check_isotropic(v), 6) for v in vols}
        if len(spacings) != 1:
            raise ValueError(f"all volumes must share one spacing, got {sorted(spacings)}")
        return spacings.pop()

    # -- estimator API -----------------------------------------------------

    def fit(self, X, y, series_ids: Optional[Sequence[str]] = None, out_dir=None, on_epoch=None):
        vols = check_volumes(X)
        if not vols:
            raise ValueError("fit needs at least one volume")
        y = list(y)
        if series_ids is None and y and all(not isinstance(a, (list, tuple)) for a in y):
            raise ValueError("a flat annotation list needs series_ids")
        ids = series_ids_of(vols, series_ids)
        per_volume = group_annotations(y, vols, ids)
        spacing = self._spacing(vols)
        tcfg = self.train_config()
        if not (self.warm_start and hasattr(self, "network_")):
            self._init_network()
        self.spacing_mm_ = spacing
        self.anchors_ = AnchorSpec.from_mm(self.anchors_mm, spacing)
        nodules = [[annotation_to_voxel(v, a) for a in anns] for v, anns in zip(vols, per_volume)]
        stream = CropStream(vols, nodules, self.crop_side, self.anchors_,
                            np.random.default_rng(self.random_state + self.n_epochs_trained_),
                            self.positive_fraction)
        start = self.n_epochs_trained_
        if start >= tcfg.epochs:
            return self
        _, records = train(self.network_, self.store_, tcfg, stream, out_dir=out_dir, start_epoch=start,
                           optimizer=self.optimizer_, on_epoch=on_epoch)
        self.history_ += records
        self.n_epochs_trained_ = tcfg.epochs
        return self

    def predict(self, X, series_ids: Optional[Sequence[str]] = None) -> List[Candidate]:
        check_is_fitted(self, "network_")
        vols = check_volumes(X)
        ids = series_ids_of(vols, series_ids)
        out: List[Candidate] = []
        for v, sid in zip(vols, ids):
            anchors = AnchorSpec.from_mm(self.anchors_mm, check_isotropic(v))
            out += detect(self.network_, v, anchors, sid, self.score_threshold, self.nms_threshold,
                          self.use_nms, self.max_candidates)
        return out

    def froc(self, X, y, series_ids: Optional[Sequence[str]] = None, ignore=()) -> FrocCurve:
        vols = check_volumes(X)
        ids = series_ids_of(vols, series_ids)
        anns = [a for group in group_annotations(list(y), vols, ids) for a in group]
        return froc(self.predict(vols, ids), anns, len(vols), ignore=ignore)

    def score(self, X, y, series_ids: Optional[Sequence[str]] = None) -> float:
        return self.froc(X, y, series_ids).mean_score

    # -- persistence -------------------------------------------------------

    def save(self, path) -> Path:
        check_is_fitted(self, "network_")
        save_store(path, self.store_, self.optimizer_.state())
        return Path(path)

    def load(self, path, spacing_mm: float = 1.0) -> "NoduleProposer":
        """Restore weights (and optimizer velocity when present) from a checkpoint."""
        self._init_network()
        arrays = load_store(path, self.store_)
        self.optimizer_.load_state(arrays)
        if "meta/epoch" in arrays:
            self.n_epochs_trained_ = int(arrays["meta/epoch"][0]) + 1
        self.spacing_mm_ = spacing_mm
        self.anchors_ = AnchorSpec.from_mm(self.anchors_mm, spacing_mm)
        return self
