"""Command-line interface: ``segtrack {track,train,eval,ablate,synth}``.

Exit codes: 0 success, 1 other error, 2 usage or configuration error,
3 missing file, 4 malformed ground truth or predictions, 5 checkpoint
mismatch.
"""
from __future__ import annotations

import argparse
import dataclasses
import functools
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import evaluation as ev
from . import model, nn, synthetic, train
from .features import PrecomputedBackbone
from .tracker import Tracker

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_MISSING, EXIT_GROUNDTRUTH, EXIT_CHECKPOINT = range(6)
log = logging.getLogger("segtrack")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for i, line in enumerate(Path(path).read_text().splitlines()):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{i + 1}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def gather_settings(args) -> dict:
    settings = read_config(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        settings[k.strip()] = v.strip()
    return settings


def _convert(value: str, current):
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(current, tuple):
        return tuple(v.strip() for v in value.split(",") if v.strip())
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def apply_settings(obj, settings: dict, strict=True):
    """Copy of dataclass ``obj`` with matching ``settings`` applied; returns (obj, unused keys)."""
    names = {f.name for f in dataclasses.fields(obj)}
    changes, unused = {}, {}
    for k, v in settings.items():
        if k in names and not dataclasses.is_dataclass(getattr(obj, k)):
            try:
                changes[k] = _convert(v, getattr(obj, k))
            except ValueError as exc:
                raise ConfigError(f"bad value for {k}: {exc}") from exc
        else:
            unused[k] = v
    if strict and unused:
        raise ConfigError(f"unknown configuration keys: {', '.join(sorted(unused))}")
    try:
        return dataclasses.replace(obj, **changes), unused
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def tracker_config(base: model.TrackerConfig, settings: dict) -> model.TrackerConfig:
    cfg, _ = apply_settings(base, settings)
    return cfg


def training_config(settings: dict) -> train.TrainingConfig:
    settings = dict(settings)
    name = settings.pop("preset", "desk")
    try:
        cfg = train.training_preset(name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg, rest = apply_settings(cfg, settings, strict=False)
    mcfg, rest = apply_settings(cfg.model, rest, strict=False)
    rest.pop("workers", None)
    if rest:
        raise ConfigError(f"unknown configuration keys: {', '.join(sorted(rest))}")
    return cfg.replace(model=mcfg)


def workers_from(args) -> int:
    if getattr(args, "workers", None):
        return args.workers
    return int(os.environ.get("SEGTRACK_WORKERS", "1"))


def load_network(path, settings=None) -> model.SegmentationNetwork:
    net = model.SegmentationNetwork.load(path)
    if settings:
        net.config = tracker_config(net.config, settings)
    return net


# ---------------------------------------------------------------------------
# track


class _Recorder:
    def __init__(self, n):
        self.masks = [None] * n
        self.boxes = [None] * n

    def __call__(self, f, tracker):
        self.masks[f] = tracker.last.mask
        self.boxes[f] = tracker.last.box


def track_sequence(seq: ds.SequenceDataset, net, config, protocol="noreset", backbone_dir=None):
    """Run one sequence; returns ``(records, masks, boxes)`` per frame (``None`` where not tracked)."""
    frames = seq.frames()
    rec = _Recorder(len(seq))

    def factory():
        backbone = PrecomputedBackbone(backbone_dir) if backbone_dir else None
        return Tracker(net, config, backbone=backbone)

    if protocol == "reset":
        if seq.first_frame_only:
            raise ds.DatasetError(f"{seq.root}: the reset protocol needs ground truth on every frame")
        init = seq.masks() if seq.mask_files is not None else None
        sequence = ev.Sequence(seq.name, frames, seq.box_ground_truth(), init)
        _, _, run = ev.run_reset_protocol(factory, sequence, observer=rec)
        records = ev.reset_records(run)
    else:
        tracker = factory()
        tracker.initialize(frames[0], seq.initial_region())
        rec(0, tracker)
        for f in range(1, len(seq)):
            tracker.update(frames[f])
            rec(f, tracker)
        records = list(rec.boxes)
    return records, rec.masks, rec.boxes


def cmd_track(args) -> int:
    settings = gather_settings(args)
    net = load_network(args.weights, settings)
    config = model.ablation_config(net.config, args.ablation) if args.ablation else net.config
    seq = ds.load_sequence(args.sequence)
    records, masks, boxes = track_sequence(seq, net, config, args.protocol, args.features)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds.write_boxes(out / ds.BOXES_FILE, records)
    if not args.no_masks:
        (out / "masks").mkdir(exist_ok=True)
        shape = ds.read_image(seq.frame_files[0]).shape[:2]
        for f, m in enumerate(masks):
            ds.write_mask(out / "masks" / f"{f:05d}.png", m if m is not None else np.zeros(shape, bool))
    if args.overlays:
        (out / "overlays").mkdir(exist_ok=True)
        frames = seq.frames()
        for f in range(len(seq)):
            ds.write_image(out / "overlays" / f"{f:05d}.png", ds.overlay(frames[f], masks[f], boxes[f]))
    print(f"{seq.name}: {len(records)} frames -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    settings = gather_settings(args)
    init = settings.pop("init", None)
    cfg = training_config(settings)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    def progress(epoch, loss, val):
        print(f"epoch {epoch + 1}/{cfg.epochs}  loss {loss:.4f}  validation {val:.4f}", flush=True)

    if init:
        base = model.SegmentationNetwork.load(init)
        result = train.continue_training(base, cfg, progress=progress, workers=workers_from(args))
    else:
        result = train.train_network(cfg, progress=progress, workers=workers_from(args))
    result.net.save(out)
    loss_path = Path(args.loss) if args.loss else out.with_suffix(".loss.csv")
    train.write_loss_csv(loss_path, result.losses)
    train.write_loss_csv(loss_path.with_name(loss_path.stem + ".validation.csv"), result.validation)
    print(f"saved {out} ({result.seconds:.0f} s; validation {result.initial_validation:.4f} -> "
          f"{result.final_validation:.4f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


PROTOCOL_KEYS = {
    "reset": ["accuracy", "failures"],
    "noreset": ["AO", "SR0.5", "SR0.75", "precision"],
    "davis": ["J", "F"],
}


def _prediction_dir(pred_root: Path, seq: ds.SequenceDataset, single: bool) -> Path:
    d = pred_root / seq.name
    if d.is_dir():
        return d
    if single and ((pred_root / ds.BOXES_FILE).exists() or (pred_root / "masks").is_dir()):
        return pred_root
    raise FileNotFoundError(f"no predictions for sequence {seq.name} under {pred_root}")


def evaluate_sequence(seq: ds.SequenceDataset, pred_dir: Path, protocol: str, burn_in=ev.BURN_IN) -> dict:
    row = {"sequence": seq.name}
    if protocol == "davis":
        files = sorted((pred_dir / "masks").glob("*.png"))
        if not files:
            raise FileNotFoundError(f"{pred_dir}/masks: no mask images")
        pred = [ds.read_mask(p) for p in files]
        gt = seq.masks()
        if len(pred) != len(gt):
            raise ds.DatasetError(f"{pred_dir}/masks: {len(pred)} masks for {len(gt)} frames")
        row["J"], row["F"] = ev.davis_measures(pred[1:], gt[1:])
        return row
    path = pred_dir / ds.BOXES_FILE
    if not path.exists():
        raise FileNotFoundError(f"missing prediction file {path}")
    records = ds.read_boxes(path)
    has_codes = any(isinstance(r, int) for r in records)
    if protocol == "reset" and not has_codes:
        raise ds.DatasetError(f"{path}: no reset-protocol records (track with --protocol reset)")
    if protocol == "noreset" and has_codes:
        raise ds.DatasetError(f"{path}: holds reset-protocol records")
    run = ev.run_from_records(records, seq.box_ground_truth(), seq.name)
    if protocol == "reset":
        row["accuracy"] = ev.reset_accuracy(run, burn_in)
        row["failures"] = run.failures
    else:
        row.update(ev.average_overlap_sr(run))
    return row


def cmd_eval(args) -> int:
    settings = gather_settings(args)
    burn_in = int(settings.pop("burn_in", ev.BURN_IN))
    if settings:
        raise ConfigError(f"unknown configuration keys: {', '.join(sorted(settings))}")
    seqs = ds.load_dataset(args.dataset)
    pred_root = Path(args.predictions)
    if not pred_root.is_dir():
        raise FileNotFoundError(f"predictions directory not found: {pred_root}")
    jobs = [(s, _prediction_dir(pred_root, s, len(seqs) == 1)) for s in seqs]
    fn = functools.partial(_eval_job, protocol=args.protocol, burn_in=burn_in)
    rows = ev.parallel_map(fn, jobs, workers_from(args))
    keys = PROTOCOL_KEYS[args.protocol]
    rows.append(ev.aggregate(rows, keys))
    emit_report(rows, keys, args.report)
    return EXIT_OK


def _eval_job(job, protocol, burn_in):
    seq, pred_dir = job
    return evaluate_sequence(seq, pred_dir, protocol, burn_in)


def emit_report(rows, keys, report_path=None, label="sequence"):
    print(ev.report_table(rows, keys, label), end="")
    if report_path:
        Path(report_path).write_text(ev.report_csv(rows, keys, label))


# ---------------------------------------------------------------------------
# ablate


ABLATE_KEYS = ["accuracy", "failures", "AO", "J"]


def _parse_variant_weights(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--variant-weights expects NAME=FILE, got {item!r}")
        k, v = item.split("=", 1)
        if k not in model.ABLATIONS:
            raise ConfigError(f"unknown ablation {k!r}")
        out[k] = v
    return out


def ablation_job(job):
    """Reset and no-reset runs of one variant on one sequence."""
    variant, weights, settings, seq_root = job
    net = load_network(weights, settings)
    config = model.ablation_config(net.config, variant)
    seq = ds.load_sequence(seq_root)
    frames = seq.frames()
    masks = seq.masks() if seq.mask_files is not None else None
    sequence = ev.Sequence(seq.name, frames, seq.box_ground_truth(), masks)
    acc, failures, _ = ev.run_reset_protocol(lambda: Tracker(net, config), sequence)
    rec = _Recorder(len(seq))
    run = ev.run_no_reset(lambda: Tracker(net, config), sequence, observer=rec)
    row = {"variant": variant, "sequence": seq.name, "accuracy": acc, "failures": failures,
           "AO": ev.average_overlap_sr(run)["AO"], "J": float("nan")}
    if masks is not None:
        row["J"] = ev.davis_measures(rec.masks[1:], masks[1:])[0]
    return row


def run_ablation(seq_roots, weights, variants, variant_weights=None, settings=None, workers=1):
    """Rows (one per variant, averaged over sequences) of the ablation table."""
    variant_weights = variant_weights or {}
    jobs = [(v, variant_weights.get(v, weights), settings or {}, str(r)) for v in variants for r in seq_roots]
    per_seq = ev.parallel_map(ablation_job, jobs, workers)
    rows = []
    for v in variants:
        mine = [r for r in per_seq if r["variant"] == v]
        rows.append(ev.aggregate(mine, ABLATE_KEYS, label="variant", name=v))
    return rows, per_seq


def cmd_ablate(args) -> int:
    settings = gather_settings(args)
    variants = [v.strip() for v in args.variants.split(",")] if args.variants else list(model.ABLATIONS)
    for v in variants:
        if v not in model.ABLATIONS:
            raise ConfigError(f"unknown ablation {v!r}; choose from {sorted(model.ABLATIONS)}")
    seqs = ds.load_dataset(args.dataset)
    vw = _parse_variant_weights(args.variant_weights)
    for path in [args.weights, *vw.values()]:
        load_network(path, settings)  # fail early on missing or mismatched checkpoints
    rows, _ = run_ablation([s.root for s in seqs], args.weights, variants, vw, settings, workers_from(args))
    emit_report(rows, ABLATE_KEYS, args.report, label="variant")
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth


def parse_seeds(text: str) -> list:
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            a, b = part.split("-", 1)
            seeds.extend(range(int(a), int(b) + 1))
        elif part:
            seeds.append(int(part))
    return seeds


def cmd_synth(args) -> int:
    out = Path(args.out)
    for seed in parse_seeds(args.seeds):
        seq = synthetic.generate_sequence(seed, n_frames=args.frames)
        frames, masks = zip(*seq.frames())
        boxes = [synthetic.mask_box(m) for m in masks]
        ds.write_sequence(out / f"synth{seed:05d}", frames, masks, boxes)
        print(f"wrote {out / f'synth{seed:05d}'}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segtrack", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="flat key = value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a configuration value")

    t = sub.add_parser("track", help="track one sequence and write boxes and masks")
    t.add_argument("--sequence", required=True)
    t.add_argument("--weights", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--ablation", choices=sorted(model.ABLATIONS))
    t.add_argument("--protocol", choices=["noreset", "reset"], default="noreset")
    t.add_argument("--features", help="directory of precomputed feature pyramids")
    t.add_argument("--no-masks", action="store_true")
    t.add_argument("--overlays", action="store_true")
    common(t)
    t.set_defaults(func=cmd_track)

    tr = sub.add_parser("train", help="train on synthetic pairs")
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--loss", help="loss CSV path (default: next to the checkpoint)")
    tr.add_argument("--workers", type=int)
    common(tr)
    tr.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score stored predictions")
    e.add_argument("--predictions", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--protocol", required=True, choices=sorted(PROTOCOL_KEYS))
    e.add_argument("--report", help="write the report as CSV")
    e.add_argument("--workers", type=int)
    common(e)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="compare tracker variants on a dataset")
    a.add_argument("--dataset", required=True)
    a.add_argument("--weights", required=True)
    a.add_argument("--variants", help=f"comma list from {','.join(model.ABLATIONS)}")
    a.add_argument("--variant-weights", action="append", metavar="NAME=FILE",
                   help="weights retrained for one variant")
    a.add_argument("--report")
    a.add_argument("--workers", type=int)
    common(a)
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("synth", help="write synthetic sequences as a dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", required=True, help="e.g. 900001-900010 or 1,5,9")
    s.add_argument("--frames", type=int, default=100)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"segtrack: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"segtrack: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ds.DatasetError as exc:
        print(f"segtrack: malformed data: {exc}", file=sys.stderr)
        return EXIT_GROUNDTRUTH
    except nn.CheckpointError as exc:
        print(f"segtrack: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled error", exc_info=True)
        print(f"segtrack: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
