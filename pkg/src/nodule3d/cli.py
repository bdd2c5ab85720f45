"""``nodule3d`` command line: synth, preprocess, train, eval, bench, mem.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (non-finite loss, failed correctness gate).
"""
from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from . import __version__
from .config import RunConfig, load_config
from .ctio import (CtVolume, NoduleAnnotation, generate_synthetic_dataset, read_annotations, read_nvol,
                   write_annotations, write_nvol)
from .estimators import IntensityNormalizer, IsotropicResampler, NoduleProposer
from .evaluation import format_mean_score, write_candidates, write_froc, froc
from .exceptions import ConfigError, DataError, NonFiniteLossError, ShapeError
from .perflab import GateError, bench_batchnorm, bench_conv, estimate_memory, max_feasible_input, network_workload
from .trainer import LossRecord, latest_checkpoint, read_loss_csv, write_loss_csv

log = logging.getLogger("nodule3d")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST = "manifest.json"
ANNOTATIONS = "annotations.csv"
VOLUME_DIR = "volumes"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# datasets and manifests
# ---------------------------------------------------------------------------

def write_manifest(out_dir: Path, command: str, cfg: Optional[RunConfig], args: argparse.Namespace,
                   config_file=None, **extra) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    arg_view = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    manifest = {
        "tool": "nodule3d", "version": __version__, "command": command,
        "config_file": str(config_file) if config_file else None,
        "config": cfg.to_dict() if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else arg_view.get("seed"),
        "out_dir": str(out_dir), "arguments": arg_view,
    }
    manifest.update(extra)
    path = out_dir / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc


def load_dataset(data_dir) -> Tuple[List[str], List[CtVolume], List[NoduleAnnotation], dict]:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"data directory {data_dir} does not exist")
    vol_dir = data_dir / VOLUME_DIR
    if not (data_dir / ANNOTATIONS).is_file():
        raise DataError(f"{data_dir} has no {ANNOTATIONS}")
    paths = sorted(vol_dir.glob("*.nvol")) if vol_dir.is_dir() else []
    ids = [p.stem for p in paths]
    vols = [read_nvol(p) for p in paths]
    anns = read_annotations(data_dir / ANNOTATIONS)
    meta = read_manifest(data_dir / MANIFEST) if (data_dir / MANIFEST).is_file() else {}
    return ids, vols, anns, meta


def save_dataset(out_dir: Path, ids: Sequence[str], vols: Sequence[CtVolume],
                 anns: Sequence[NoduleAnnotation]) -> None:
    (out_dir / VOLUME_DIR).mkdir(parents=True, exist_ok=True)
    for sid, v in zip(ids, vols):
        write_nvol(out_dir / VOLUME_DIR / f"{sid}.nvol", v)
    write_annotations(out_dir / ANNOTATIONS, anns)


def _resolve_config(args) -> RunConfig:
    return load_config(getattr(args, "config", None), getattr(args, "set", None) or ())


def _prepare(vols, meta: dict, cfg: RunConfig) -> List[CtVolume]:
    """Volumes ready for the network: preprocessed datasets pass through untouched."""
    if meta.get("normalized"):
        return list(vols)
    log.info("dataset is not preprocessed; resampling to %g mm and normalising", cfg.data.spacing_mm)
    return IntensityNormalizer().fit_transform(IsotropicResampler(cfg.data.spacing_mm).fit_transform(vols))


def _proposer(cfg: RunConfig, **over) -> NoduleProposer:
    n, t, e = cfg.network, cfg.train, cfg.eval
    kw = dict(group_channels=n.group_channels, blocks_per_group=n.blocks_per_group, anchors_mm=n.anchors_mm,
              crop_side=n.crop_side, engine=n.engine, initial_lr=t.initial_lr, epochs=t.epochs,
              lr_drop_epochs=t.lr_drop_epochs, lr_drop_factor=t.lr_drop_factor, momentum=t.momentum,
              weight_decay=t.weight_decay, batch_size=t.batch_size, crops_per_epoch=t.crops_per_epoch,
              positive_fraction=t.positive_fraction, checkpoint_every=t.checkpoint_every,
              score_threshold=e.score_threshold,
              nms_threshold=e.nms_threshold, use_nms=e.use_nms, max_candidates=e.max_candidates,
              random_state=cfg.seed)
    kw.update(over)
    return NoduleProposer(**kw)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.volumes < 0 or args.nodules_per_volume < 0:
        raise UsageError("--volumes and --nodules-per-volume must be >= 0")
    if not args.spacing > 0 or not args.side_mm > 0:
        raise UsageError("--spacing and --side-mm must be positive")
    out = Path(args.out)
    write_manifest(out, "synth", None, args, normalized=False, spacing_mm=args.spacing)
    ids, vols, anns = generate_synthetic_dataset(args.seed, args.volumes, args.nodules_per_volume,
                                                 args.side_mm, args.spacing)
    save_dataset(out, ids, vols, anns)
    print(f"wrote {len(vols)} volumes and {len(anns)} annotations to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    if not args.spacing_mm > 0:
        raise UsageError("--spacing-mm must be positive")
    ids, vols, anns, meta = load_dataset(args.input)
    out = Path(args.out)
    write_manifest(out, "preprocess", None, args, normalized=True, spacing_mm=args.spacing_mm,
                   source=str(args.input))
    resampler = IsotropicResampler(args.spacing_mm).fit(vols)
    normalizer = IntensityNormalizer().fit(vols)
    already = bool(meta.get("normalized"))

    def one(v):
        v = resampler.transform([v])[0]
        return v if already else normalizer.transform([v])[0]

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        done = list(pool.map(one, vols))
    save_dataset(out, ids, done, anns)
    print(f"preprocessed {len(done)} volumes to {args.spacing_mm} mm in {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.epochs is not None:
        args.set = list(args.set or []) + [f"train.epochs={args.epochs}"]
    cfg = _resolve_config(args)
    ids, vols, anns, meta = load_dataset(args.data)
    if not vols:
        raise DataError(f"{args.data} contains no volumes")
    out = Path(args.out)
    resume_from = latest_checkpoint(out) if args.resume and out.is_dir() else None
    write_manifest(out, "train", cfg, args, config_file=args.config, data=str(args.data),
                   resumed_from=str(resume_from) if resume_from else None)
    vols = _prepare(vols, meta, cfg)
    est = _proposer(cfg, warm_start=True)
    records: List[LossRecord] = []
    if resume_from is not None:
        est.load(resume_from, vols[0].spacing_mm[0])
        if (out / "loss.csv").is_file():
            records = [r for r in read_loss_csv(out / "loss.csv") if r.epoch < est.n_epochs_trained_]
        log.info("resuming from %s at epoch %d", resume_from, est.n_epochs_trained_)

    def on_epoch(rec: LossRecord):
        records.append(rec)
        write_loss_csv(out / "loss.csv", records)
        print(f"epoch {rec.epoch} loss {rec.loss_total:.4f} cls {rec.loss_cls:.4f} "
              f"loc {rec.loss_loc:.4f} lr {rec.lr:g}", flush=True)

    est.fit(vols, anns, series_ids=ids, out_dir=out, on_epoch=on_epoch)
    write_loss_csv(out / "loss.csv", records)
    print(f"trained {est.n_epochs_trained_} epochs; checkpoints in {out}")
    return EXIT_OK


def _eval_config(args) -> Tuple[RunConfig, Optional[str]]:
    if args.config is not None:
        return _resolve_config(args), args.config
    sibling = Path(args.checkpoint).parent / MANIFEST
    if sibling.is_file() and read_manifest(sibling).get("config"):
        from .config import apply_overrides
        cfg = RunConfig.from_dict(apply_overrides(read_manifest(sibling)["config"], args.set or ()))
        return cfg, str(sibling)
    return _resolve_config(args), None


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint must name a checkpoint file")
    if not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint {args.checkpoint} does not exist")
    cfg, cfg_source = _eval_config(args)
    ids, vols, anns, meta = load_dataset(args.data)
    if not vols:
        raise DataError(f"{args.data} contains no volumes")
    out = Path(args.out)
    write_manifest(out, "eval", cfg, args, config_file=cfg_source, data=str(args.data),
                   checkpoint=str(args.checkpoint))
    vols = _prepare(vols, meta, cfg)
    est = _proposer(cfg, use_nms=cfg.eval.use_nms and not args.no_nms)
    est.load(args.checkpoint, vols[0].spacing_mm[0])
    cands = est.predict(vols, ids)
    write_candidates(out / "candidates.csv", cands)
    print(f"{len(cands)} candidates over {len(vols)} volumes")
    known = set(ids)
    anns = [a for a in anns if a.series_id in known]
    if anns:
        curve = froc(cands, anns, len(vols))
        write_froc(out / "froc.csv", curve)
        for fp, s in zip(curve.operating_points, curve.operating_sensitivity):
            print(f"sensitivity@{fp:g}FP/scan={s:.4f}")
        print(format_mean_score(curve))
    else:
        print("no annotations for these volumes; FROC skipped")
    return EXIT_OK


def _bench_cfg(args) -> RunConfig:
    cfg = _resolve_config(args)
    if args.crop_side is not None:
        cfg.network.crop_side = args.crop_side
    cfg.network.validate()
    return cfg


def _emit(report, args) -> None:
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        print(report.to_text())
    if getattr(args, "csv", None):
        Path(args.csv).write_text(report.to_csv())


def cmd_bench(args) -> int:
    cfg = _bench_cfg(args)
    convs, bns = network_workload(cfg.network, cfg.network.crop_side, args.batch)
    if args.out:
        write_manifest(Path(args.out), "bench", cfg, args, config_file=args.config)
    if args.suite == "conv":
        report = bench_conv(convs, ("gemm", "slice"), args.reps, args.warmup, args.threads, cfg.seed)
    else:
        report = bench_batchnorm(bns, args.reps, args.warmup, args.threads, cfg.seed)
    report.metadata["crop_side"] = cfg.network.crop_side
    report.metadata["batch"] = args.batch
    _emit(report, args)
    if args.out:
        Path(args.out, f"bench_{args.suite}.csv").write_text(report.to_csv())
        Path(args.out, f"bench_{args.suite}.json").write_text(report.to_json())
    return EXIT_OK


_UNITS = {"": 1, "b": 1, "kb": 1e3, "mb": 1e6, "gb": 1e9, "tb": 1e12,
          "kib": 2 ** 10, "mib": 2 ** 20, "gib": 2 ** 30, "tib": 2 ** 40}


def parse_bytes(text: str) -> float:
    """``"12GB"`` -> 12e9, ``"1.5GiB"`` -> 1.5 * 2**30, plain numbers are bytes."""
    m = re.fullmatch(r"\s*([0-9.eE+-]+)\s*([a-zA-Z]*)\s*", text)
    if not m or m.group(2).lower() not in _UNITS:
        raise argparse.ArgumentTypeError(f"cannot parse byte count {text!r}")
    try:
        return float(m.group(1)) * _UNITS[m.group(2).lower()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse byte count {text!r}") from None


def cmd_mem(args) -> int:
    cfg = _bench_cfg(args)
    if args.batch < 1:
        raise UsageError("--batch must be >= 1")
    engine = args.engine or cfg.network.engine
    est = estimate_memory(cfg.network, cfg.network.crop_side, args.batch, engine)
    if args.out:
        write_manifest(Path(args.out), "mem", cfg, args, config_file=args.config)
    feasible = None
    if args.budget is not None:
        feasible = max_feasible_input(cfg.network, args.budget, args.batch, engine)
    if args.json:
        d = est.to_dict()
        if feasible is not None:
            d["budget_bytes"] = args.budget
            d["max_feasible_input"] = feasible
        print(json.dumps(d, indent=2))
    else:
        print(est.to_text())
        if feasible is not None:
            print(f"max_feasible_input={feasible} (budget {args.budget / 1e9:.3f} GB, batch {args.batch})")
    if args.out:
        Path(args.out, "memory.csv").write_text(est.to_csv())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _config_args(p) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nodule3d", description="3-D lung nodule proposal pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic CT dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--volumes", type=int, required=True)
    p.add_argument("--nodules-per-volume", type=int, default=3)
    p.add_argument("--spacing", type=float, default=1.0, help="voxel spacing in mm")
    p.add_argument("--side-mm", type=float, default=128.0, help="cube side in mm")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="resample and normalise a dataset")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--spacing-mm", type=float, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--jobs", type=int, default=1, help="volumes processed in parallel")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the proposal network")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int, help="shorthand for --set train.epochs=N")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    _config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="sliding-window inference and FROC")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-nms", action="store_true", help="emit raw decoded candidates")
    _config_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time conv engines or batch-norm variants")
    p.add_argument("--suite", choices=("conv", "bn"), required=True)
    p.add_argument("--crop-side", type=int)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--threads", type=int)
    p.add_argument("--json", action="store_true")
    p.add_argument("--csv", type=Path, help="also write the report as CSV")
    p.add_argument("--out", type=Path, help="directory for manifest and reports")
    _config_args(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("mem", help="analytic training memory estimate")
    p.add_argument("--crop-side", type=int)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--engine", choices=("gemm", "slice", "naive"))
    p.add_argument("--budget", type=parse_bytes, help="bytes (suffixes KB/MB/GB/GiB...) for max_feasible_input")
    p.add_argument("--json", action="store_true")
    p.add_argument("--out", type=Path)
    _config_args(p)
    p.set_defaults(func=cmd_mem)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ShapeError) as exc:
        print(f"nodule3d {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"nodule3d {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLossError, GateError) as exc:
        print(f"nodule3d {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
