"""Command line entry points.

Subcommands: synth (phantom dataset), train, eval, segment, gradcheck.
Values come from flags, falling back to an optional `key = value` config
file (# comments allowed), falling back to built-in defaults; flags win.
Unknown config keys are usage errors.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric-check failure.

The CARDIOSEQ_THREADS environment variable caps numeric worker threads
(default 1, for determinism); it must take effect before the math library
loads, which is why this module touches the environment first.
"""

import os


def _cap_threads() -> None:
    n = os.environ.get("CARDIOSEQ_THREADS", "1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, n)


_cap_threads()

import argparse  # noqa: E402
import sys  # noqa: E402

import numpy as np  # noqa: E402

from . import data as datamod  # noqa: E402
from . import figures, gradcheck, metrics, tensorio, train as trainmod  # noqa: E402
from .data import DataError  # noqa: E402
from .model import (ConfigError, ModelConfig, SegModel,  # noqa: E402
                    segment_sequence)
from .layers import init_parameters  # noqa: E402
from .tensor import ShapeError, no_grad  # noqa: E402


class UsageError(Exception):
    pass


# -- option plumbing -------------------------------------------------------

def parse_size(text: str) -> tuple[int, int, int]:
    """'96x96x24' -> (D,H,W) extents; written order is height x width x depth."""
    parts = str(text).lower().replace("×", "x").split("x")
    if len(parts) != 3:
        raise UsageError(f"--size wants three extents like 96x96x24, got {text!r}")
    try:
        h, w, d = (int(p) for p in parts)
    except ValueError as exc:
        raise UsageError(f"bad --size {text!r}: {exc}") from exc
    if min(h, w, d) < 1:
        raise UsageError(f"--size extents must be positive, got {text!r}")
    return (d, h, w)


def parse_channels(text: str) -> tuple[int, ...]:
    try:
        channels = tuple(int(p) for p in str(text).split(","))
    except ValueError as exc:
        raise UsageError(f"bad --channels {text!r}: {exc}") from exc
    return channels


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


def read_config_file(path) -> dict[str, str]:
    values = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, value = line.partition("=")
                if not sep:
                    raise UsageError(f"{path}:{lineno}: expected 'key = value', "
                                     f"got {line!r}")
                values[key.strip()] = value.strip()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    return values


class Options:
    """Merged view of defaults, config-file values, and explicit flags."""

    def __init__(self, defaults: dict, ns: argparse.Namespace):
        self.values = dict(defaults)
        given = vars(ns)
        config_path = given.pop("config", None)
        if config_path:
            for key, value in read_config_file(config_path).items():
                if key not in defaults:
                    raise UsageError(f"unknown config key {key!r} "
                                     f"(known: {', '.join(sorted(defaults))})")
                self.values[key] = value
        self.values.update(given)  # flags win

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None


def _add_config_flag(sub) -> None:
    sub.add_argument("--config", metavar="FILE",
                     help="plain-text 'key = value' option file; "
                          "explicit flags override it (default: none)")


# -- shared builders ---------------------------------------------------------

TRAIN_DEFAULTS = {
    "data": None, "out": None, "mode": "bidirectional",
    "size": "96x96x24", "channels": "8,16,32,64",
    "epochs1": 10, "epochs2": 10, "lr1": 1e-4, "lr2": 1e-4, "decay": 0.7,
    "loss": "cross_entropy", "fusion": "average", "normalize": True,
    "augment": True, "grad_clip": 0.0, "seed": 0, "log": None,
    "figures": True,
}

MODE_TO_DIRECTION = {"baseline": "baseline", "forward": "forward_only",
                     "bidirectional": "bidirectional"}


def build_model_config(opts) -> ModelConfig:
    channels = parse_channels(opts.channels)
    config = ModelConfig(
        levels=len(channels), channels=channels,
        direction=MODE_TO_DIRECTION[str(opts.mode)],
        normalize=parse_bool(opts.normalize),
        fusion=str(opts.fusion),
    )
    try:
        config.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    return config


def build_train_config(opts) -> trainmod.TrainConfig:
    clip = float(opts.grad_clip)
    config = trainmod.TrainConfig(
        stage1_epochs=int(opts.epochs1), stage1_lr=float(opts.lr1),
        stage2_epochs=int(opts.epochs2), stage2_lr=float(opts.lr2),
        lr_decay_per_epoch=float(opts.decay), loss_mode=str(opts.loss),
        grad_clip=None if clip == 0.0 else clip,
        augment=parse_bool(opts.augment), seed=int(opts.seed),
    )
    try:
        config.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return config


def _require(opts, names) -> None:
    for name in names:
        if getattr(opts, name) in (None, ""):
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _load_prepared(data_dir, ids, extents, require_labels: bool):
    samples = []
    for pid in ids:
        sample = datamod.load_sequence(os.path.join(data_dir, pid))
        if require_labels and sample.labels is None:
            raise DataError(f"{pid}: no ground-truth label frames found")
        samples.append(datamod.prepare_sample(sample, extents))
    return samples


# -- subcommands --------------------------------------------------------------

def cmd_synth(opts) -> int:
    _require(opts, ("out",))
    extents = parse_size(opts.size)
    base = datamod.PhantomConfig(
        frames=int(opts.frames), extents=extents,
        amplitude=float(opts.amplitude), noise_std=float(opts.noise),
        seed=int(opts.seed),
    )
    ids = datamod.write_phantom_dataset(opts.out, int(opts.patients), base)
    print(f"wrote {len(ids)} phantom patients under {opts.out}")
    return 0


def cmd_train(opts) -> int:
    _require(opts, ("data", "out"))
    if str(opts.mode) not in MODE_TO_DIRECTION:
        raise UsageError(f"--mode must be one of {sorted(MODE_TO_DIRECTION)}, "
                         f"got {opts.mode!r}")
    extents = parse_size(opts.size)
    model_config = build_model_config(opts)
    train_config = build_train_config(opts)

    ids = datamod.list_patients(opts.data)
    train_ids, _, _ = datamod.split_patients(ids, train_config.seed)
    dataset = _load_prepared(opts.data, train_ids, extents, require_labels=True)

    model = SegModel(model_config)
    init_parameters(model, train_config.seed)
    state = trainmod.AdamState()
    records = trainmod.train_stage1(model, dataset, train_config)
    if model_config.direction != "baseline":
        records += trainmod.train_stage2(model, dataset, train_config,
                                         state=state)
    epochs = train_config.stage1_epochs + (
        0 if model_config.direction == "baseline" else train_config.stage2_epochs)
    trainmod.save_checkpoint(model, state, opts.out, epoch=epochs,
                             extra={"size": list(extents),
                                    "seed": train_config.seed,
                                    "mode": str(opts.mode)})

    log_path = opts.log or (str(opts.out) + ".log.jsonl")
    trainmod.write_log(records, log_path)
    if parse_bool(opts.figures) and records:
        figures.save_loss_curve(records, str(opts.out) + ".loss.png")
    final = records[-1]["loss"] if records else float("nan")
    print(f"trained {len(train_ids)} patients, {len(records)} iterations, "
          f"final loss {final:.6f}")
    print(f"checkpoint: {opts.out}")
    print(f"log: {log_path}")
    return 0


def cmd_eval(opts) -> int:
    _require(opts, ("data", "ckpt", "report"))
    model, _, meta = trainmod.load_checkpoint(opts.ckpt)
    _check_model_flags(opts, meta)
    extents = tuple(meta.get("extra", {}).get("size") or parse_size(opts.size))
    ids = datamod.list_patients(opts.data)
    train_ids, val_ids, test_ids = datamod.split_patients(ids, int(opts.seed))
    chosen = {"val": val_ids, "test": test_ids}[str(opts.split)]
    if not chosen:
        raise DataError(f"split {opts.split!r} is empty for {len(ids)} patients")

    reports = []
    for sample in _load_prepared(opts.data, chosen, extents, require_labels=True):
        with no_grad():
            pred = segment_sequence(sample, model)
        reports.append(metrics.evaluate_sequence(
            pred, sample.labels, sample.ed_index, sample.es_index,
            patient_id=sample.patient_id, overall=str(opts.overall)))

    metrics.write_report_csv(reports, opts.report)
    stem = str(opts.report)
    stem = stem[:-4] if stem.endswith(".csv") else stem
    metrics.write_consistency_jsonl(reports, stem + "_consistency.jsonl")
    if parse_bool(opts.figures):
        figures.save_dice_bars(reports, stem + "_dice.png")
        figures.save_consistency_series(reports, stem + "_consistency.png")

    mean_dice = float(np.mean([r.mean_foreground_dice() for r in reports]))
    mean_cons = float(np.mean([np.mean(r.consistency) for r in reports]))
    print(f"evaluated {len(reports)} patients ({opts.split} split): "
          f"mean foreground Dice {mean_dice:.4f}, "
          f"mean consistency {mean_cons:.4f}")
    print(f"report: {opts.report}")
    return 0


def _check_model_flags(opts, meta) -> None:
    """Any model-describing flag given to eval must agree with the checkpoint."""
    given = {k: opts.values[k] for k in MODEL_FLAG_KEYS
             if opts.values.get(k) is not None}
    if not given:
        return
    ck = meta["model_config"]
    direction_to_mode = {v: k for k, v in MODE_TO_DIRECTION.items()}
    merged = {
        "mode": direction_to_mode[ck["direction"]],
        "channels": ",".join(str(c) for c in ck["channels"]),
        "fusion": ck["fusion"],
        "normalize": ck["normalize"],
    }
    merged.update(given)
    channels = parse_channels(merged["channels"])
    flags_config = ModelConfig(
        levels=len(channels), channels=channels,
        direction=MODE_TO_DIRECTION[str(merged["mode"])],
        normalize=parse_bool(merged["normalize"]),
        fusion=str(merged["fusion"]),
    )
    try:
        flags_config.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    if trainmod.config_digest(flags_config) != meta["config_digest"]:
        raise DataError("config digest mismatch between checkpoint and flags; "
                        "drop the model flags or point at a matching checkpoint")


def cmd_segment(opts) -> int:
    _require(opts, ("ckpt", "in_dir", "out"))
    model, _, meta = trainmod.load_checkpoint(opts.ckpt)
    extents = tuple(meta.get("extra", {}).get("size") or parse_size(opts.size))
    sample = datamod.load_sequence(opts.in_dir)
    sample = datamod.prepare_sample(sample, extents)
    with no_grad():
        pred = segment_sequence(sample, model)
    os.makedirs(opts.out, exist_ok=True)
    for t, labels in enumerate(pred):
        tensorio.write_tensor(labels.astype(np.uint8),
                              os.path.join(opts.out, f"frame{t + 1:02d}.seg"))
        if opts.slices:
            _write_pgm_slice(labels,
                             os.path.join(opts.out, f"frame{t + 1:02d}.pgm"))
    print(f"segmented {len(pred)} frames into {opts.out}")
    return 0


def _write_pgm_slice(labels: np.ndarray, path) -> None:
    """Mid-depth slice as binary PGM; classes map to {0, 85, 170, 255}."""
    mid = labels[labels.shape[0] // 2]
    h, w = mid.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write((mid.astype(np.uint16) * 85).astype(np.uint8).tobytes())


def cmd_gradcheck(opts) -> int:
    results = gradcheck.run_suite(int(opts.seed))
    print(gradcheck.format_report(results))
    return 0 if gradcheck.suite_passed(results) else 4


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cardioseq",
        description="Temporally consistent myocardial segmentation of cine "
                    "volume sequences (NIfTI-1, uncompressed; decompress "
                    ".nii.gz inputs first).")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", argument_default=argparse.SUPPRESS,
                       help="generate a synthetic phantom dataset")
    p.add_argument("--out", metavar="DIR", help="output dataset directory")
    p.add_argument("--patients", type=int,
                   help="number of phantom patients (default: 10)")
    p.add_argument("--frames", type=int,
                   help="frames per cardiac cycle (default: 8)")
    p.add_argument("--size", metavar="HxWxD",
                   help="volume extents, in-plane height x width x slices "
                        "(default: 96x96x24)")
    p.add_argument("--amplitude", type=float,
                   help="contraction amplitude in [0,1) (default: 0.3)")
    p.add_argument("--noise", type=float,
                   help="Gaussian noise std (default: 0.05)")
    p.add_argument("--seed", type=int, help="generator seed (default: 0)")
    _add_config_flag(p)

    p = sub.add_parser("train", argument_default=argparse.SUPPRESS,
                       help="train on the 7:2:1 training split")
    p.add_argument("--data", metavar="DIR", help="dataset directory")
    p.add_argument("--out", metavar="CKPT", help="checkpoint output path")
    p.add_argument("--mode", choices=sorted(MODE_TO_DIRECTION),
                   help="decoder mode (default: bidirectional)")
    p.add_argument("--size", metavar="HxWxD",
                   help="resample target, height x width x slices "
                        "(default: 96x96x24)")
    p.add_argument("--channels", metavar="C1,C2,...",
                   help="encoder widths per level (default: 8,16,32,64)")
    p.add_argument("--epochs1", type=int,
                   help="encoder pretraining epochs (default: 10)")
    p.add_argument("--epochs2", type=int,
                   help="joint training epochs (default: 10)")
    p.add_argument("--lr1", type=float,
                   help="stage-1 learning rate (default: 0.0001)")
    p.add_argument("--lr2", type=float,
                   help="stage-2 learning rate (default: 0.0001)")
    p.add_argument("--decay", type=float,
                   help="stage-2 lr decay per epoch (default: 0.7)")
    p.add_argument("--loss", choices=trainmod.LOSS_MODES,
                   help="training loss (default: cross_entropy)")
    p.add_argument("--fusion", choices=("average", "learned"),
                   help="bidirectional fusion rule (default: average)")
    p.add_argument("--normalize", metavar="BOOL",
                   help="instance normalization in blocks (default: true)")
    p.add_argument("--augment", metavar="BOOL",
                   help="sequence-coherent augmentation (default: true)")
    p.add_argument("--grad-clip", dest="grad_clip", type=float,
                   help="global gradient-norm cap, 0 disables (default: 0)")
    p.add_argument("--seed", type=int,
                   help="seed for init, 7:2:1 split, and augmentation "
                        "(default: 0)")
    p.add_argument("--log", metavar="PATH",
                   help="JSON-lines training log (default: <CKPT>.log.jsonl)")
    p.add_argument("--figures", metavar="BOOL",
                   help="render the loss-curve PNG (default: true)")
    _add_config_flag(p)

    p = sub.add_parser("eval", argument_default=argparse.SUPPRESS,
                       help="evaluate a checkpoint on the val or test split")
    p.add_argument("--data", metavar="DIR", help="dataset directory")
    p.add_argument("--ckpt", metavar="CKPT", help="checkpoint path")
    p.add_argument("--split", choices=("val", "test"),
                   help="which 7:2:1 split to score (default: test)")
    p.add_argument("--report", metavar="OUT.csv", help="metrics CSV path")
    p.add_argument("--overall", choices=metrics.OVERALL_MODES,
                   help="aggregate IoU flavor (default: foreground_union)")
    p.add_argument("--size", metavar="HxWxD",
                   help="resample target when the checkpoint lacks one "
                        "(default: 96x96x24)")
    p.add_argument("--seed", type=int,
                   help="split seed; must match training (default: 0)")
    p.add_argument("--mode", choices=sorted(MODE_TO_DIRECTION),
                   help="model check: decoder mode (default: from checkpoint)")
    p.add_argument("--channels", metavar="C1,C2,...",
                   help="model check: encoder widths (default: from checkpoint)")
    p.add_argument("--fusion", choices=("average", "learned"),
                   help="model check: fusion rule (default: from checkpoint)")
    p.add_argument("--normalize", metavar="BOOL",
                   help="model check: normalization (default: from checkpoint)")
    p.add_argument("--figures", metavar="BOOL",
                   help="render Dice/consistency PNGs (default: true)")
    _add_config_flag(p)

    p = sub.add_parser("segment", argument_default=argparse.SUPPRESS,
                       help="segment one patient directory")
    p.add_argument("--ckpt", metavar="CKPT", help="checkpoint path")
    p.add_argument("--in", dest="in_dir", metavar="DIR",
                   help="patient directory with frameNN.nii files")
    p.add_argument("--out", metavar="DIR", help="output directory for .seg files")
    p.add_argument("--slices", action="store_true",
                   help="also write mid-depth PGM slice images (default: off)")
    p.add_argument("--size", metavar="HxWxD",
                   help="resample target when the checkpoint lacks one "
                        "(default: 96x96x24)")
    _add_config_flag(p)

    p = sub.add_parser("gradcheck", argument_default=argparse.SUPPRESS,
                       help="run the 64-bit finite-difference suite")
    p.add_argument("--seed", type=int, help="evaluation-point seed (default: 0)")
    _add_config_flag(p)

    return parser


SYNTH_DEFAULTS = {
    "out": None, "patients": 10, "frames": 8, "size": "96x96x24",
    "amplitude": 0.3, "noise": 0.05, "seed": 0,
}

EVAL_DEFAULTS = {
    "data": None, "ckpt": None, "split": "test", "report": None,
    "overall": "foreground_union", "size": "96x96x24", "seed": 0,
    "mode": None, "channels": None, "fusion": None, "normalize": None,
    "figures": True,
}

SEGMENT_DEFAULTS = {
    "ckpt": None, "in_dir": None, "out": None, "slices": False,
    "size": "96x96x24",
}

GRADCHECK_DEFAULTS = {"seed": 0}

MODEL_FLAG_KEYS = ("mode", "channels", "fusion", "normalize")


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    command = ns.command
    del ns.command
    try:
        if command == "synth":
            return cmd_synth(Options(SYNTH_DEFAULTS, ns))
        if command == "train":
            return cmd_train(Options(TRAIN_DEFAULTS, ns))
        if command == "eval":
            return cmd_eval(Options(EVAL_DEFAULTS, ns))
        if command == "segment":
            return cmd_segment(Options(SEGMENT_DEFAULTS, ns))
        if command == "gradcheck":
            return cmd_gradcheck(Options(GRADCHECK_DEFAULTS, ns))
        raise UsageError(f"unknown command {command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (DataError, trainmod.CheckpointError, tensorio.TensorFormatError,
            ShapeError, ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
