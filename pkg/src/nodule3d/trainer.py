"""SGD with a step learning-rate schedule, crop batching and loss-curve output."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .ctio import CtVolume, extract_crop, sample_training_crops
from .exceptions import ConfigError, NonFiniteLossError
from .network import ParamStore, ProposalNetwork, save_store
from .objective import AnchorSpec, TargetAssignment, assign_targets, multitask_loss

log = logging.getLogger(__name__)

LOSS_HEADER = ["epoch", "loss_total", "loss_cls", "loss_loc", "lr"]


@dataclass
class TrainConfig:
    initial_lr: float = 0.01
    epochs: int = 100
    lr_drop_epochs: Tuple[int, ...] = (50, 80)
    lr_drop_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 1
    crops_per_epoch: int = 16
    rng_seed: int = 0
    checkpoint_every: int = 10
    positive_fraction: float = 0.7

    def __post_init__(self):
        self.lr_drop_epochs = tuple(int(e) for e in self.lr_drop_epochs)

    def validate(self) -> "TrainConfig":
        if self.initial_lr < 0:
            raise ConfigError("initial_lr must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        drops = self.lr_drop_epochs
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ConfigError("lr_drop_epochs must be strictly increasing")
        if self.batch_size < 1 or self.crops_per_epoch < self.batch_size:
            raise ConfigError("need batch_size >= 1 and crops_per_epoch >= batch_size")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class LossRecord:
    epoch: int
    loss_total: float
    loss_cls: float
    loss_loc: float
    lr: float


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: ``initial_lr * factor ** (number of drop epochs <= epoch)``.

    Evaluated in decimal so that 0.01 * 0.1 is exactly the double nearest 0.001.
    """
    k = sum(1 for e in cfg.lr_drop_epochs if e <= epoch)
    return float(Decimal(repr(cfg.initial_lr)) * Decimal(repr(cfg.lr_drop_factor)) ** k)


class SGD:
    """Momentum SGD with L2 weight decay over every parameter of a store."""

    def __init__(self, store: ParamStore, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.store = store
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in store.params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.store.params.items():
            v = self.velocity[name]
            g = self.store.grads[name]
            v *= self.momentum
            v -= lr * (g + self.weight_decay * p)
            p += v
        self.store.zero_grad()

    def state(self) -> List[Tuple[str, np.ndarray]]:
        return [(f"velocity/{k}", v) for k, v in self.velocity.items()]

    def load_state(self, arrays: Dict[str, np.ndarray]) -> None:
        for k in self.velocity:
            key = f"velocity/{k}"
            if key in arrays:
                self.velocity[k][...] = arrays[key]


def sgd_step(store: ParamStore, lr: float, velocity: Optional[Dict[str, np.ndarray]] = None,
             momentum: float = 0.9, weight_decay: float = 1e-4) -> Dict[str, np.ndarray]:
    """One in-place update; returns the (possibly new) velocity map."""
    opt = SGD(store, momentum, weight_decay)
    if velocity is not None:
        opt.velocity = velocity
    opt.step(lr)
    return opt.velocity


class CropStream:
    """Random training batches drawn from several volumes.

    Each crop picks a volume uniformly, then a placement from that volume's
    nodule-biased sampler. Deterministic for a given generator.
    """

    def __init__(self, volumes: Sequence[CtVolume], nodules_vox: Sequence[Sequence[Tuple[np.ndarray, float]]],
                 side: int, anchors: AnchorSpec, rng: np.random.Generator, positive_fraction: float = 0.7):
        if not volumes:
            raise ConfigError("crop stream needs at least one volume")
        self.volumes = list(volumes)
        self.nodules = [list(n) for n in nodules_vox]
        self.side = side
        self.anchors = anchors
        self.rng = rng
        self._samplers = [sample_training_crops(v.shape, n, side, rng, positive_fraction)
                          for v, n in zip(self.volumes, self.nodules)]

    def next_batch(self, batch_size: int) -> Tuple[np.ndarray, TargetAssignment]:
        crops, targets = [], []
        for _ in range(batch_size):
            i = int(self.rng.integers(len(self.volumes)))
            spec = next(self._samplers[i])
            crop, local = extract_crop(self.volumes[i], spec, self.nodules[i])
            crops.append(crop[0])
            targets.append(assign_targets(local, self.anchors, self.side // 4))
        return np.stack(crops), TargetAssignment.stack(targets)


def write_loss_csv(path, records: Sequence[LossRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_HEADER)
        for r in records:
            w.writerow([r.epoch, repr(r.loss_total), repr(r.loss_cls), repr(r.loss_loc), repr(r.lr)])


def read_loss_csv(path) -> List[LossRecord]:
    with open(path, newline="") as fh:
        return [LossRecord(int(r["epoch"]), float(r["loss_total"]), float(r["loss_cls"]),
                           float(r["loss_loc"]), float(r["lr"])) for r in csv.DictReader(fh)]


def train(net: ProposalNetwork, store: ParamStore, cfg: TrainConfig, stream: CropStream,
          out_dir: Optional[Path] = None, start_epoch: int = 0, optimizer: Optional[SGD] = None,
          on_epoch: Optional[Callable[[LossRecord], None]] = None) -> Tuple[ParamStore, List[LossRecord]]:
    """Run epochs ``start_epoch .. cfg.epochs - 1``; checkpoints go to ``out_dir`` when given."""
    cfg.validate()
    opt = optimizer or SGD(store, cfg.momentum, cfg.weight_decay)
    store.zero_grad()
    records: List[LossRecord] = []
    batches = cfg.crops_per_epoch // cfg.batch_size
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at(cfg, epoch)
        sums = np.zeros(3)
        for b in range(batches):
            x, ta = stream.next_batch(cfg.batch_size)
            head = net.forward(x, mode="train")
            loss, l_cls, l_loc, grad = multitask_loss(head.grid, ta)
            if not all(math.isfinite(v) for v in (loss, l_cls, l_loc)):
                raise NonFiniteLossError(epoch, b, loss, l_cls, l_loc)
            net.backward(grad)
            opt.step(lr)
            sums += (loss, l_cls, l_loc)
        mean = sums / batches
        rec = LossRecord(epoch, float(mean[0]), float(mean[1]), float(mean[2]), lr)
        records.append(rec)
        log.info("epoch %d loss %.4f (cls %.4f loc %.4f) lr %g", epoch, *mean, lr)
        if on_epoch is not None:
            on_epoch(rec)
        if out_dir is not None:
            last = epoch == cfg.epochs - 1
            if last or (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0):
                save_checkpoint(out_dir, store, opt, epoch, last)
    return store, records


def save_checkpoint(out_dir: Path, store: ParamStore, opt: SGD, epoch: int, final: bool = False) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    extra = opt.state() + [("meta/epoch", np.array([epoch], np.float32))]
    path = out_dir / f"checkpoint_{epoch + 1:04d}.vpck"
    save_store(path, store, extra)
    if final:
        save_store(out_dir / "final.vpck", store, extra)
    return path


def latest_checkpoint(out_dir: Path) -> Optional[Path]:
    found = sorted(Path(out_dir).glob("checkpoint_*.vpck"))
    return found[-1] if found else None
