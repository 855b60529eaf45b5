"""Command-line interface: ``aspcnet <command> [flags]``.

Exit codes: 0 success, 1 validation error, 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import capsules, dataio
from .checkpoint import CheckpointError, load_checkpoint, restore_optimizer, save_checkpoint
from .config import RunConfig, resolve_config, thread_limit
from .metrics import ConfusionMatrix
from .model import AspcNet, EpochRecord, classify, fit, saliency
from .selftest import run_selftest
from .tensor import precision

log = logging.getLogger("aspcnet")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
LOG_FIELDS = ("epoch", "loss", "train_oa", "wall_time")
# value a fault-injected squash uses in place of the 1 in |s|^2 / (1 + |s|^2)
FAULT_SQUASH_ONE = -0.25


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _require(run: RunConfig, *keys: str) -> None:
    missing = [k for k in keys if getattr(run, k) is None]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _load_scene(run: RunConfig, need_labels: bool = True):
    cube = dataio.load_cube(run.cube)
    labels = None
    if run.labels is not None or need_labels:
        labels = dataio.load_labels(run.labels)
        dataio.check_compatible(cube, labels)
    return cube, labels


def _reduced_image(cube: dataio.HsiCube, pca: dataio.PcaModel) -> np.ndarray:
    return dataio.apply_pca(pca, cube).channels_last()


def _load_model(run: RunConfig, classes: Optional[int] = None):
    _require(run, "checkpoint")
    net = load_checkpoint(run.checkpoint)
    if classes is not None and net.cfg.classes != classes:
        raise CheckpointError(f"checkpoint has {net.cfg.classes} classes, labels have {classes}")
    pca = net.checkpoint.pca()
    if pca is None:
        raise CheckpointError(f"{run.checkpoint}: checkpoint carries no PCA model")
    return net, pca


def predict_positions(net: AspcNet, image: np.ndarray, positions: np.ndarray, batch: int = 256) -> np.ndarray:
    """0-based predicted classes at ``positions`` (rows of (row, col))."""
    ex = dataio.PatchExtractor(image, net.cfg.patch)
    out = np.zeros(len(positions), dtype=np.int64)
    for start in range(0, len(positions), batch):
        pos = positions[start:start + batch]
        out[start:start + batch] = classify(net, ex.patches(pos[:, 0], pos[:, 1]), batch)
    return out


def _fmt(value: float) -> str:
    return f"{value:.8f}"


def _write_log_row(path: str, rec: EpochRecord) -> None:
    with open(path, "a", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(
            [rec.epoch, _fmt(rec.loss), _fmt(rec.train_oa), f"{rec.wall_time:.3f}"])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(run: RunConfig, args) -> int:
    _require(run, "out")
    os.makedirs(run.out, exist_ok=True)
    cube, labels = dataio.make_synthetic_scene(args.height, args.width, args.bands, args.classes,
                                               args.snr_db, args.block, run.seed)
    dataio.save_cube(cube, os.path.join(run.out, "cube.hsi"))
    dataio.save_labels(labels, os.path.join(run.out, "labels.gt"))
    dataio.save_palette(dataio.default_palette(labels.classes), os.path.join(run.out, "palette.txt"))
    print(f"wrote {cube.height}x{cube.width}x{cube.bands} cube with {labels.classes} classes to {run.out}")
    return EXIT_OK


def cmd_split(run: RunConfig, args) -> int:
    _require(run, "labels", "out")
    if run.per_class is None and run.fraction is None:
        raise UsageError("give --per-class N or --fraction F")
    labels = dataio.load_labels(run.labels)
    split = dataio.stratified_split(labels, run.per_class, run.fraction, run.seed)
    dataio.save_split(split, run.out)
    print(f"{split.n_train} training pixels, {len(split.test)} test pixels -> {run.out}")
    return EXIT_OK


def cmd_train(run: RunConfig, args) -> int:
    _require(run, "cube", "labels", "split", "out")
    cube, labels = _load_scene(run)
    split = dataio.load_split(run.split, labels)
    os.makedirs(run.out, exist_ok=True)
    log_path = os.path.join(run.out, "train_log.csv")
    start_epoch, optimizer = 0, None
    if run.checkpoint is not None:
        net, pca = _load_model(run, labels.classes)
        # flags may extend the schedule of a resumed run
        net.cfg.epochs = run.epochs
        optimizer = restore_optimizer(net, net.checkpoint)
        start_epoch = int(net.checkpoint.meta.get("epoch", 0))
        log.info("resuming after epoch %d", start_epoch)
    else:
        cfg = run.network_config(labels.classes)
        mask = labels.labels > 0 if run.pca_labeled_only else None
        pca = dataio.fit_pca(cube, cfg.bands, mask)
        net = AspcNet(cfg)
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(LOG_FIELDS)
    image = _reduced_image(cube, pca)
    train = dataio.PatchDataset.from_split(image, labels, split.train, net.cfg.patch)

    def save(name: str, rec: EpochRecord, opt=None) -> None:
        save_checkpoint(net, os.path.join(run.out, name), opt, pca, {"epoch": rec.epoch})

    def on_epoch(rec: EpochRecord) -> None:
        _write_log_row(log_path, rec)
        if not np.isfinite(rec.loss):
            raise FloatingPointError(f"loss became non-finite at epoch {rec.epoch}")
        print(f"epoch {rec.epoch}: loss {rec.loss:.5f} train OA {rec.train_oa:.4f}", flush=True)

    history = fit(net, train, net.cfg, callbacks=[on_epoch], optimizer=optimizer, start_epoch=start_epoch,
                  deterministic=run.deterministic, on_best=lambda rec: save("best.ckpt", rec))
    if history:
        save("final.ckpt", history[-1], net.optimizer)
    return EXIT_OK


def cmd_eval(run: RunConfig, args) -> int:
    _require(run, "cube", "labels", "split", "checkpoint")
    cube, labels = _load_scene(run)
    split = dataio.load_split(run.split, labels)
    net, pca = _load_model(run, labels.classes)
    image = _reduced_image(cube, pca)
    pred = predict_positions(net, image, split.test)
    truth = labels.labels[split.test[:, 0], split.test[:, 1]] - 1
    report = ConfusionMatrix(labels.classes).accumulate(truth, pred).report()
    sys.stdout.write(report)
    if run.out is not None:
        with open(run.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(report)
    return EXIT_OK


def cmd_map(run: RunConfig, args) -> int:
    _require(run, "cube", "checkpoint", "palette", "out")
    if not args.all_pixels and run.labels is None:
        raise UsageError("labeled-only maps need --labels (or pass --all-pixels)")
    cube, labels = _load_scene(run, need_labels=False)
    net, pca = _load_model(run, labels.classes if labels is not None else None)
    palette = dataio.load_palette(run.palette)
    missing = sorted(set(range(1, net.cfg.classes + 1)) - set(palette))
    if missing:
        raise UsageError(f"palette has no color for classes {missing}")
    image = _reduced_image(cube, pca)
    if args.all_pixels:
        rr, cc = np.meshgrid(np.arange(cube.height), np.arange(cube.width), indexing="ij")
        positions = np.stack([rr.ravel(), cc.ravel()], axis=1)
    else:
        positions = labels.labeled_positions()
    raster = np.zeros((cube.height, cube.width), dtype=np.int64)
    raster[positions[:, 0], positions[:, 1]] = predict_positions(net, image, positions) + 1
    dataio.export_map(raster, palette, run.out)
    print(f"{len(positions)} pixels mapped -> {run.out}")
    return EXIT_OK


def cmd_saliency(run: RunConfig, args) -> int:
    _require(run, "cube", "checkpoint", "out")
    cube, _ = _load_scene(run, need_labels=False)
    net, pca = _load_model(run)
    if not (0 <= args.row < cube.height and 0 <= args.col < cube.width):
        raise UsageError(f"pixel ({args.row}, {args.col}) outside the {cube.height}x{cube.width} image")
    if not 1 <= args.target <= net.cfg.classes:
        raise UsageError(f"--class must lie in 1..{net.cfg.classes}")
    image = _reduced_image(cube, pca)
    patch = dataio.PatchExtractor(image, net.cfg.patch).patch(args.row, args.col)
    heat = saliency(net, patch, args.target - 1)
    dataio.write_ppm(dataio.ramp_colors(heat), run.out)
    print(f"{heat.shape[0]}x{heat.shape[1]} saliency map -> {run.out}")
    return EXIT_OK


def cmd_selftest(run: RunConfig, args) -> int:
    saved = capsules.SQUASH_ONE
    if args.inject_fault == "squash":
        capsules.SQUASH_ONE = FAULT_SQUASH_ONE
    try:
        ok = run_selftest()
    finally:
        capsules.SQUASH_ONE = saved
    print("selftest passed" if ok else "selftest FAILED")
    return EXIT_OK if ok else EXIT_INVALID


COMMANDS = {
    "synth": (cmd_synth, "write a synthetic cube, labels and palette"),
    "split": (cmd_split, "draw a stratified train/test split"),
    "train": (cmd_train, "train a network (writes log and checkpoints)"),
    "eval": (cmd_eval, "report accuracy on the test partition"),
    "map": (cmd_map, "export a classification map (PPM)"),
    "saliency": (cmd_saliency, "export a saliency heat map (PPM)"),
    "selftest": (cmd_selftest, "run the embedded invariant suite"),
}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run configuration (flags > --config file > defaults)")
    g.add_argument("--config", help="key=value config file")
    for flag in ("cube", "labels", "palette", "split", "checkpoint", "out"):
        g.add_argument(f"--{flag}", metavar="PATH")
    g.add_argument("--seed", type=int)
    split = g.add_mutually_exclusive_group()
    split.add_argument("--per-class", type=int, metavar="N")
    split.add_argument("--fraction", type=float, metavar="F")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--dilation", type=int)
    g.add_argument("--patch", type=int)
    g.add_argument("--pca-dims", type=int)
    g.add_argument("--width-scale", type=float)
    g.add_argument("--early-stopping", type=int, metavar="PATIENCE")
    g.add_argument("--deterministic", action="store_const", const=True)
    g.add_argument("--precision", choices=("f32", "f64"))
    g.add_argument("--threads", type=int, metavar="N")
    return p


OVERRIDE_KEYS = ("cube", "labels", "palette", "split", "checkpoint", "out", "seed", "per_class", "fraction",
                 "epochs", "batch", "lr", "dilation", "patch", "pca_dims", "width_scale", "early_stopping",
                 "deterministic", "precision", "threads")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aspcnet", description="ASPCNet hyperspectral classification")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _common_flags()
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help_text)
        if name == "synth":
            sp.add_argument("--height", type=int, default=48)
            sp.add_argument("--width", type=int, default=48)
            sp.add_argument("--bands", type=int, default=10)
            sp.add_argument("--classes", type=int, default=4)
            sp.add_argument("--block", type=int, default=24)
            sp.add_argument("--snr-db", type=float, default=20.0)
        elif name == "map":
            sp.add_argument("--all-pixels", action="store_true", help="classify every pixel, not only labeled ones")
        elif name == "saliency":
            sp.add_argument("--row", type=int, required=True)
            sp.add_argument("--col", type=int, required=True)
            sp.add_argument("--class", dest="target", type=int, required=True, metavar="LABEL",
                            help="class label (1..T) whose score is explained")
        elif name == "selftest":
            sp.add_argument("--inject-fault", choices=("squash",), help=argparse.SUPPRESS)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    fn = COMMANDS[args.command][0]
    try:
        run = resolve_config(args.config, {k: getattr(args, k) for k in OVERRIDE_KEYS})
        with thread_limit(run.threads, run.deterministic), precision(run.precision):
            return fn(run, args)
    except (ValueError, FileNotFoundError, IsADirectoryError, PermissionError, IndexError) as exc:
        print(f"aspcnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # numeric blow-ups, out-of-memory, bugs
        print(f"aspcnet {args.command}: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
