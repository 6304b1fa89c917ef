"""Command-line entry points.

    mscloudcam <train|eval|infer|gradcheck|summary> --config PATH
               [--seed N] [--out DIR] [--threads N]

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure. Errors
print one machine-parseable line ``error <code>: <message>`` on stderr.
"""
from __future__ import annotations

import argparse
import contextlib
import sys
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from . import gradcheck as gradcheck_mod
from .checkpoint import load_checkpoint
from .config import RunConfig, dump_flat, load_run_config
from .data import load_mst, save_labels_mst
from .errors import ConfigError, DataError, MscError, NumericError
from .metrics import ConfusionMatrix, csv_rows, emit_table
from .model import (MSCloudCAM, REFERENCE_GFLOPS, REFERENCE_PARAMS_M,
                    count_params, estimate_flops)
from .tensor import Tensor, no_grad
from .train import Trainer, batch_tensor, load_dataset

# Fig-style class colors: clear sky light blue, thick cloud white,
# thin cloud light gray, cloud shadow dark gray.
CLASS_COLORS = {
    0: (173, 216, 230),
    1: (255, 255, 255),
    2: (211, 211, 211),
    3: (105, 105, 105),
}


def colorize(labels: np.ndarray) -> np.ndarray:
    """(H, W) class indices -> (H, W, 3) uint8 per the class color map."""
    rgb = np.zeros(labels.shape + (3,), dtype=np.uint8)
    for cls, color in CLASS_COLORS.items():
        rgb[labels == cls] = color
    return rgb


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary PPM (P6), no compression."""
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def _thread_limit(threads: int):
    if threads and threads > 0:
        try:
            from threadpoolctl import threadpool_limits
            return threadpool_limits(limits=threads)
        except ImportError:
            pass
    return contextlib.nullcontext()


def _load_run(args) -> RunConfig:
    overrides: Dict[str, str] = {}
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    if args.out is not None:
        overrides["run.out_dir"] = args.out
    if args.threads is not None:
        overrides["run.threads"] = str(args.threads)
    return load_run_config(args.config, overrides)


def _prepare_out(run: RunConfig) -> Path:
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(dump_flat(run))
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    run = _load_run(args)
    out = _prepare_out(run)
    trainer = Trainer(run, out)
    summary = trainer.train()
    print(f"train: steps={int(summary['steps'])} loss={summary['loss']:.6g} "
          f"val_miou={summary['val_miou']:.6g} checkpoint={trainer.final_path} "
          f"log={trainer.log_path}")
    return 0


def cmd_eval(args) -> int:
    run = _load_run(args)
    out = _prepare_out(run)
    if run.data.source == "synthetic":
        train_set, val_set = load_dataset(run)
        by_split = {"train": train_set, "val": val_set, "test": val_set}
        if run.eval.split not in by_split:
            raise DataError(f"eval: split {run.eval.split!r} unavailable for "
                            "synthetic data")
        samples = by_split[run.eval.split]
    else:
        samples = _mst_split(run)
    ignore = run.model.loss.ignore_index
    cm = ConfusionMatrix(run.model.decoder.num_classes)
    if run.eval.oracle:
        name = f"oracle/{run.eval.split}"
        for s in samples:
            pred = np.where(s.labels == ignore, 0, s.labels)
            cm.accumulate(pred, s.labels, ignore=ignore)
    else:
        if not run.eval.checkpoint:
            raise ConfigError("eval: eval.checkpoint is required unless eval.oracle=true")
        model, _, _ = load_checkpoint(run.eval.checkpoint, expect_config=run.model)
        name = f"mscloudcam/{run.eval.split}"
        bs = run.train.batch_size
        with no_grad():
            for lo in range(0, len(samples), bs):
                chunk = samples[lo:lo + bs]
                x, labels = batch_tensor(chunk)
                pred = model(x).final.data.argmax(axis=1)
                cm.accumulate(pred, labels, ignore=ignore)
    reports = {name: cm.report()}
    table = emit_table(reports)
    print(table)
    if run.eval.csv:
        csv_path = Path(run.eval.csv)
        if not csv_path.is_absolute():
            csv_path = out / csv_path
        csv_path.write_text("\n".join(csv_rows(reports)) + "\n")
        print(f"csv written: {csv_path}")
    return 0


def _mst_split(run: RunConfig):
    from .data import SplitManifest
    manifest = SplitManifest.parse(run.data.manifest)
    root = Path(run.data.dir)
    out = []
    for sid in manifest.ids(run.eval.split):
        sample = load_mst(root / f"{sid}.mst")
        if sample.labels is None:
            raise DataError(f"{sid}: evaluation needs labels")
        out.append(sample)
    return out


def cmd_infer(args) -> int:
    run = _load_run(args)
    out = _prepare_out(run)
    if not run.infer.input or not run.infer.checkpoint:
        raise ConfigError("infer: infer.input and infer.checkpoint are required")
    sample = load_mst(run.infer.input)
    if sample.image is None:
        raise DataError(f"{run.infer.input}: no image payload")
    model, _, _ = load_checkpoint(run.infer.checkpoint, expect_config=run.model)
    want = model.cfg.encoder.in_channels
    if sample.image.shape[0] != want:
        raise DataError(f"infer: input has {sample.image.shape[0]} channels, "
                        f"checkpoint expects {want}")
    with no_grad():
        outs = model(Tensor(sample.image[None].astype(np.float32)))
    # ties pick the lowest class index (argmax returns the first maximum)
    pred = outs.final.data.argmax(axis=1)[0].astype(np.uint8)
    mst_path = out / f"{run.infer.out_prefix}.mst"
    ppm_path = out / f"{run.infer.out_prefix}.ppm"
    save_labels_mst(pred, mst_path, sensor=sample.sensor)
    write_ppm(ppm_path, colorize(pred))
    print(f"infer: labels={mst_path} image={ppm_path}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck_mod.run_suite(scope=args.scope)
    for r in results:
        print(r.line())
    failures = [r for r in results if not r.passed]
    if failures:
        raise NumericError("gradient check failed: "
                           + ", ".join(r.name for r in failures))
    print(f"gradcheck: {len(results)} checks passed")
    return 0


def cmd_summary(args) -> int:
    run = _load_run(args)
    counts = count_params(run.model)
    total = counts["total"]
    print("parameters by module:")
    for name, v in counts.items():
        if name != "total":
            print(f"  {name:<12} {v:>12,}")
    delta = 100.0 * (total - REFERENCE_PARAMS_M * 1e6) / (REFERENCE_PARAMS_M * 1e6)
    print(f"  {'total':<12} {total:>12,}  ({total / 1e6:.2f}M, "
          f"{delta:+.1f}% vs the published {REFERENCE_PARAMS_M}M)")
    print("flops sweep (per image, G-FLOPs = 2*MACs/1e9):")
    for hw in (256, 512):
        fl = estimate_flops(run.model, (hw, hw))
        print(f"  {hw}x{hw}: {fl['gflops']:.2f} GF")
    print(f"  published reference: {REFERENCE_GFLOPS} GF (input size unstated)")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
    "summary": cmd_summary,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mscloudcam",
        description="Multispectral cloud segmentation: train, evaluate, infer, "
                    "verify gradients, report complexity.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat config file (section.key = value)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=None)
        if name == "gradcheck":
            p.add_argument("--scope", choices=("all", "primitives", "composites"),
                           default="all")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = args.threads if args.threads is not None else 0
    try:
        with _thread_limit(threads):
            return COMMANDS[args.command](args)
    except MscError as e:
        msg = " ".join(str(e).split())
        sys.stderr.write(f"error {e.exit_code}: {msg}\n")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
