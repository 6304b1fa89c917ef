"""Training loop: Adam over the deeply supervised objective, per-step loss
logging, periodic validation mIoU, checkpointing with exact resumption.

Log lines are append-only ``epoch step loss_final loss_aux1 loss_aux2
val_miou``; the validation column repeats the most recent measurement
(nan before the first one).
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import SplitManifest, load_mst, synth_dataset
from .data.mst import RasterSample
from .decoder import supervised_loss
from .errors import DataError, NumericError
from .metrics import ConfusionMatrix
from .model import MSCloudCAM
from .optim import Adam
from .tensor import Tensor, no_grad


def load_dataset(run: RunConfig) -> Tuple[List[RasterSample], List[RasterSample]]:
    """(train, val) sample lists. Synthetic data validates on the training
    scenes themselves (desk-scale overfit runs)."""
    data = run.data
    if data.source == "synthetic":
        seed = data.synth_seed if data.synth_seed >= 0 else run.seed
        samples = synth_dataset(data.synth_n, data.synth_hw, data.in_channels,
                                seed=seed, sensor=data.sensor)
        return samples, samples
    manifest = SplitManifest.parse(data.manifest)
    root = Path(data.dir)

    def load_split(name: str) -> List[RasterSample]:
        out = []
        for sid in manifest.ids(name):
            path = root / f"{sid}.mst"
            sample = load_mst(path)
            if sample.image is None or sample.labels is None:
                raise DataError(f"{path}: training samples need image and labels")
            out.append(sample)
        return out

    return load_split("train"), load_split("val")


def batch_tensor(samples: List[RasterSample]) -> Tuple[Tensor, np.ndarray]:
    shapes = {s.image.shape for s in samples}
    if len(shapes) != 1:
        raise DataError(f"batch: mixed sample shapes {sorted(shapes)}")
    images = np.stack([s.image for s in samples]).astype(np.float32)
    labels = np.stack([s.labels for s in samples])
    return Tensor(images), labels


def evaluate_miou(model: MSCloudCAM, samples: List[RasterSample],
                  batch_size: int, ignore: int) -> float:
    cm = ConfusionMatrix(model.cfg.decoder.num_classes)
    with no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            x, labels = batch_tensor(chunk)
            outs = model(x)
            pred = outs.final.data.argmax(axis=1)
            cm.accumulate(pred, labels, ignore=ignore)
    return cm.report().miou


class Trainer:
    def __init__(self, run: RunConfig, out_dir: Path):
        self.run = run
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.out_dir / "train.log"
        self.last_path = self.out_dir / "last.ckpt"
        self.final_path = self.out_dir / "model.ckpt"

        self.train_set, self.val_set = load_dataset(run)
        if run.train.resume:
            self.model, self.step, optim_state = load_checkpoint(
                run.train.resume, expect_config=run.model)
            self.optim = self._make_optim()
            if optim_state is None:
                raise DataError(f"{run.train.resume}: checkpoint carries no optimizer "
                                "state; cannot resume exactly")
            self.optim.load_state_arrays(optim_state)
        else:
            self.model = MSCloudCAM(run.model)
            self.optim = self._make_optim()
            self.step = 0

    def _make_optim(self) -> Adam:
        t = self.run.train
        return Adam(self.model.named_parameters(), lr=t.lr, beta1=t.beta1,
                    beta2=t.beta2, eps=t.eps, weight_decay=t.weight_decay)

    def _epoch_order(self, epoch: int) -> np.ndarray:
        n = len(self.train_set)
        if not self.run.train.shuffle:
            return np.arange(n)
        return np.random.default_rng([self.run.seed, 9001, epoch]).permutation(n)

    def _log(self, fh, epoch: int, breakdown: Dict[str, float], val_miou: float):
        fh.write(f"{epoch} {self.step} {breakdown['final']:.9g} "
                 f"{breakdown['aux1']:.9g} {breakdown['aux2']:.9g} {val_miou:.9g}\n")
        fh.flush()

    def train(self) -> Dict[str, float]:
        t = self.run.train
        n = len(self.train_set)
        bs = min(t.batch_size, n)
        steps_per_epoch = math.ceil(n / bs)
        max_steps = t.max_steps or t.epochs * steps_per_epoch
        val_miou = float("nan")
        last_breakdown: Optional[Dict[str, float]] = None
        save_checkpoint(self.model, self.last_path, step=self.step, optimizer=self.optim)

        with open(self.log_path, "a") as fh:
            while self.step < max_steps:
                epoch = self.step // steps_per_epoch
                if epoch >= t.epochs:
                    break
                order = self._epoch_order(epoch)
                pos = self.step % steps_per_epoch
                for b in range(pos, steps_per_epoch):
                    idx = order[b * bs:(b + 1) * bs]
                    x, labels = batch_tensor([self.train_set[i] for i in idx])
                    outs = self.model(x)
                    loss, breakdown = supervised_loss(outs, labels, self.run.model.loss)
                    if not np.isfinite(breakdown["total"]):
                        raise NumericError(
                            f"training aborted at step {self.step}: non-finite loss "
                            f"{breakdown['total']}; last good checkpoint: {self.last_path}")
                    self.optim.zero_grad()
                    loss.backward()
                    self.optim.step()
                    self.step += 1
                    last_breakdown = breakdown
                    self._log(fh, epoch, breakdown, val_miou)
                    if self.step >= max_steps:
                        break
                epoch_done = (self.step % steps_per_epoch == 0)
                if epoch_done and ((epoch + 1) % t.val_interval == 0 or self.step >= max_steps):
                    val_miou = evaluate_miou(self.model, self.val_set, bs,
                                             self.run.model.loss.ignore_index)
                    save_checkpoint(self.model, self.last_path, step=self.step,
                                    optimizer=self.optim)
                    if t.target_miou and val_miou >= t.target_miou and \
                            (not t.target_loss or
                             (last_breakdown and last_breakdown["total"] <= t.target_loss)):
                        break

        if math.isnan(val_miou):
            val_miou = evaluate_miou(self.model, self.val_set, bs,
                                     self.run.model.loss.ignore_index)
        save_checkpoint(self.model, self.final_path, step=self.step, optimizer=self.optim)
        summary = {
            "steps": float(self.step),
            "val_miou": val_miou,
            "loss": last_breakdown["total"] if last_breakdown else float("nan"),
        }
        if last_breakdown:
            summary.update({f"loss_{k}": v for k, v in last_breakdown.items()
                            if k in ("final", "aux1", "aux2")})
        return summary
