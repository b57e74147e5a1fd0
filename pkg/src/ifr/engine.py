"""Iterative collaboration between the recognizer and the restorer.

Step 1 encodes the degraded input; every later step encodes the image
restored by the previous step. Both the recognizer and the fusion module
see the same image at a given step, so the restored image is the only
signal that couples consecutive steps.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import metrics
from .charset import DEFAULT_SYMBOLS, Charset
from .checkpoint import read_checkpoint, write_checkpoint
from .data_synth import DegradeConfig, augment, degrade, load_png, read_manifest
from .recognizer import LabelBatch, Recognition, Recognizer, encode_labels, recognition_loss
from .restorer import RRF_MODES, Restorer, pixel_loss, validate_stages

log = logging.getLogger(__name__)


class InvalidStateError(RuntimeError):
    pass


@dataclass
class EngineConfig:
    c_str: int = 64  # 512 at full scale
    c_ir: int = 64
    max_t: int = 16
    charset: str = DEFAULT_SYMBOLS
    fusion: tuple = (1, 3, 5)
    train_steps: int = 3
    test_steps: int = 3
    lam: float = 10.0
    detach_between_steps: bool = False
    pixel_norm: str = "l1"
    rrf: str = "on"
    long_skip: bool = True

    def __post_init__(self):
        self.fusion = validate_stages(self.fusion)
        if self.train_steps < 1 or self.test_steps < 1:
            raise ValueError("train_steps and test_steps must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.pixel_norm not in ("l1", "l2"):
            raise ValueError(f"pixel_norm must be 'l1' or 'l2', got {self.pixel_norm!r}")
        if self.rrf not in RRF_MODES:
            raise ValueError(f"rrf must be one of {RRF_MODES}, got {self.rrf!r}")
        if self.max_t < 2:
            raise ValueError("max_t must be >= 2")
        Charset(self.charset)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["fusion"] = list(self.fusion)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown engine config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainConfig:
    epochs: int = 6
    batch_size: int = 32
    lr: float = 1.0
    decay_epochs: tuple = (4, 5)
    decay_factor: float = 0.1
    seed: int = 0
    resample_degradation: bool = True
    checkpoint_every: int = 1
    eval_batch_size: int = 64
    # pair-consistent augmentation of clean images; zeros disable it
    max_shift: int = 12
    max_vshift: int = 2
    invert_prob: float = 0.5

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def lr_at(self, epoch):
        """Learning rate for 1-based ``epoch``: one decay per milestone already passed."""
        return self.lr * self.decay_factor ** sum(epoch > e for e in self.decay_epochs)


class IFR(nn.Module):
    def __init__(self, cfg: EngineConfig):
        super().__init__()
        self.cfg = cfg
        self.charset = Charset(cfg.charset)
        self.recognizer = Recognizer(cfg.c_str, cfg.max_t, self.charset.num_classes)
        self.restorer = Restorer(self.recognizer.stage_channels, cfg.c_ir, cfg.fusion, cfg.rrf,
                                 long_skip=cfg.long_skip)

    def encode_labels(self, texts):
        return encode_labels(texts, self.charset, self.cfg.max_t)


@dataclass
class StepRecord:
    p_lr: torch.Tensor
    p_rl: torch.Tensor
    restored: torch.Tensor
    recognitions: Optional[List[Recognition]] = None
    rec_loss: Optional[torch.Tensor] = None
    pix_residual: Optional[float] = None


@dataclass
class IterationTrace:
    steps: List[StepRecord]
    input_dq: torch.Tensor
    teacher_forced: bool = False

    @property
    def restored(self):
        return [s.restored for s in self.steps]


@dataclass
class LossBreakdown:
    rec: torch.Tensor
    pixel: torch.Tensor
    lam: float
    total: torch.Tensor


def iterate(model: IFR, dq, steps, teacher: LabelBatch | None = None, hq=None,
            detach_between_steps=None) -> IterationTrace:
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if detach_between_steps is None:
        detach_between_steps = model.cfg.detach_between_steps
    rec = model.recognizer
    x = dq
    records = []
    for _ in range(steps):
        feats = rec.feature_encode(x)
        attn_lr, attn_rl = rec.compute_attention(feats)
        if teacher is not None:
            p_lr, p_rl = rec.decode_both(feats, attn_lr, attn_rl, teacher)
            found, step_loss = None, recognition_loss(p_lr, p_rl, teacher)
        else:
            found, p_lr, p_rl = rec.recognize_bidirectional(feats, attn_lr, attn_rl, model.charset)
            step_loss = None
        restored = model.restorer(x, feats)
        residual = None
        if hq is not None:
            residual = float((hq - restored).abs().mean())
        records.append(StepRecord(p_lr, p_rl, restored, found, step_loss, residual))
        x = restored.detach() if detach_between_steps else restored
    return IterationTrace(records, dq, teacher is not None)


def total_loss(trace: IterationTrace, labels: LabelBatch, hq, cfg: EngineConfig) -> LossBreakdown:
    """Mean per-step recognition loss plus lambda times the step-averaged pixel loss."""
    if not trace.teacher_forced:
        raise InvalidStateError("total_loss needs a trace decoded with teacher forcing")
    rec = sum(recognition_loss(s.p_lr, s.p_rl, labels) for s in trace.steps) / len(trace.steps)
    pixel = pixel_loss(trace.restored, hq, cfg.pixel_norm)
    return LossBreakdown(rec, pixel, cfg.lam, rec + cfg.lam * pixel)


def save_checkpoint(model: IFR, cfg: EngineConfig, path):
    write_checkpoint(path, cfg.to_dict(), model.state_dict())
    return Path(path)


def load_checkpoint(path):
    config, state = read_checkpoint(path)
    cfg = EngineConfig.from_dict(config)
    model = IFR(cfg)
    current = model.state_dict()
    missing = set(current) - set(state)
    if missing:
        raise ValueError(f"{path}: checkpoint lacks parameters {sorted(missing)[:5]}")
    model.load_state_dict({k: v.to(current[k].dtype) for k, v in state.items()})
    return model, cfg


class PairedDataset:
    """HQ images and labels of a manifest, held in memory; degradation is lazy."""

    def __init__(self, manifest):
        self.manifest = Path(manifest)
        self.records = read_manifest(manifest)
        if not self.records:
            raise ValueError(f"{manifest}: manifest is empty")
        self.hq = np.stack([load_png(r["hq"]) for r in self.records])
        self.labels = [r["label"] for r in self.records]
        self.seeds = [r["seed"] for r in self.records]
        self.ids = [r["id"] for r in self.records]

    def __len__(self):
        return len(self.records)

    def degraded(self, indices, degrade_fn, epoch=None, images=None):
        """Degrade samples ``indices``; ``images`` substitutes for their clean images."""
        src = self.hq[indices] if images is None else images
        out = np.empty((len(indices),) + self.hq.shape[1:])
        for j, i in enumerate(indices):
            seed = self.seeds[i] if epoch is None else [self.seeds[i], epoch]
            out[j] = degrade_fn(src[j], seed)
        return out


def _as_degrade_fn(degrade_with):
    if isinstance(degrade_with, DegradeConfig):
        cfg = degrade_with
        return lambda hq, seed: degrade(hq, seed, cfg)
    return degrade_with


def _tensor(batch):
    return torch.from_numpy(np.asarray(batch, dtype=np.float32)[:, None])


@dataclass
class StepMetrics:
    step: int
    accuracy: float
    ssim: float
    psnr: float


@dataclass
class EvalReport:
    rows: List[StepMetrics]
    n: int
    input_psnr: float
    input_ssim: float
    predictions: List[List[Recognition]] = field(default_factory=list)
    labels: List[str] = field(default_factory=list)

    def final(self):
        return self.rows[-1]


EVAL_COLUMNS = ("step", "accuracy", "ssim", "psnr")


def write_eval_csv(report: EvalReport, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_COLUMNS)
        for r in report.rows:
            w.writerow([r.step, repr(r.accuracy), repr(r.ssim), repr(r.psnr)])
    return Path(path)


@torch.no_grad()
def evaluate(model: IFR, data, cfg: EngineConfig, max_steps, degrade_with=DegradeConfig(),
             batch_size=64) -> EvalReport:
    """Per-step word accuracy and mean PSNR/SSIM of the restored images.

    Images are quantized to 8 bits before measuring; PSNR is capped at
    ``metrics.PSNR_CAP`` per sample before averaging.
    """
    if max_steps < 1:
        raise ValueError(f"max_steps must be >= 1, got {max_steps}")
    if not isinstance(data, PairedDataset):
        data = PairedDataset(data)
    degrade_fn = _as_degrade_fn(degrade_with)
    was_training = model.training
    model.eval()
    n = len(data)
    # per-sample values summed with fsum, which is exact and hence order-free
    psnr_vals = [[] for _ in range(max_steps)]
    ssim_vals = [[] for _ in range(max_steps)]
    preds = [[] for _ in range(max_steps)]
    in_psnr, in_ssim = [], []
    try:
        for start in range(0, n, batch_size):
            idx = list(range(start, min(start + batch_size, n)))
            hq = data.hq[idx]
            dq = data.degraded(idx, degrade_fn)
            for a, b in zip(dq, hq):
                qa = metrics.quantize(a)
                in_psnr.append(metrics.capped(metrics.psnr(qa, b)))
                in_ssim.append(metrics.ssim(qa, b))
            trace = iterate(model, _tensor(dq), max_steps)
            for k, step in enumerate(trace.steps):
                preds[k].extend(step.recognitions)
                restored = step.restored.squeeze(1).double().numpy()
                for r, b in zip(restored, hq):
                    qr = metrics.quantize(r)
                    psnr_vals[k].append(metrics.capped(metrics.psnr(qr, b)))
                    ssim_vals[k].append(metrics.ssim(qr, b))
    finally:
        model.train(was_training)
    rows = [StepMetrics(k + 1, metrics.word_accuracy([p.text for p in preds[k]], data.labels),
                        math.fsum(ssim_vals[k]) / n, math.fsum(psnr_vals[k]) / n)
            for k in range(max_steps)]
    return EvalReport(rows, n, math.fsum(in_psnr) / n, math.fsum(in_ssim) / n, preds, list(data.labels))


def train_log_columns(test_steps):
    cols = ["epoch", "lr", "rec_loss", "pixel_loss", "total_loss"]
    for name in ("val_acc", "val_psnr", "val_ssim"):
        cols += [f"{name}_step{k}" for k in range(1, test_steps + 1)]
    return cols


@dataclass
class TrainResult:
    best: Path
    last: Path
    log: Path
    history: List[dict]
    model: IFR


def _check_writable(out_dir):
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    return out


def train(cfg: EngineConfig, sched: TrainConfig, train_manifest, val_manifest=None, out_dir=".",
          degrade_cfg=DegradeConfig(), val_degrade=None, model: IFR | None = None,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Adadelta on the joint objective with step-wise learning-rate decay."""
    out = _check_writable(out_dir)
    torch.manual_seed(sched.seed)
    model = model if model is not None else IFR(cfg)
    model.train()
    data = train_manifest if isinstance(train_manifest, PairedDataset) else PairedDataset(train_manifest)
    val = None
    if val_manifest is not None:
        val = val_manifest if isinstance(val_manifest, PairedDataset) else PairedDataset(val_manifest)
    degrade_fn = _as_degrade_fn(degrade_cfg)
    val_fn = degrade_fn if val_degrade is None else _as_degrade_fn(val_degrade)
    labels_all = model.encode_labels(data.labels)
    opt = torch.optim.Adadelta(model.parameters(), lr=sched.lr)
    rng = np.random.default_rng(sched.seed)
    augmenting = sched.max_shift > 0 or sched.max_vshift > 0 or sched.invert_prob > 0

    log_path = out / "train_log.csv"
    columns = train_log_columns(cfg.test_steps)
    best_path, last_path = out / "best.ckpt", out / "last.ckpt"
    best_acc = -1.0
    history = []
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for epoch in range(1, sched.epochs + 1):
            lr = sched.lr_at(epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            sums = np.zeros(3)
            order = rng.permutation(len(data))
            for start in range(0, len(data), sched.batch_size):
                idx = order[start:start + sched.batch_size]
                clean = data.hq[idx]
                if augmenting:
                    clean = np.stack([augment(img, rng, sched.max_shift, sched.max_vshift,
                                              sched.invert_prob) for img in clean])
                hq = _tensor(clean)
                dq = _tensor(data.degraded(idx, degrade_fn,
                                           epoch if sched.resample_degradation else None, clean))
                idx_t = torch.as_tensor(idx)
                labels = LabelBatch(labels_all.targets[idx_t], labels_all.lengths[idx_t])
                trace = iterate(model, dq, cfg.train_steps, teacher=labels)
                loss = total_loss(trace, labels, hq, cfg)
                opt.zero_grad()
                loss.total.backward()
                opt.step()
                sums += len(idx) * np.array([loss.rec.item(), loss.pixel.item(), loss.total.item()])
            rec, pix, tot = (float(v) for v in sums / len(data))
            row = {"epoch": epoch, "lr": lr, "rec_loss": rec, "pixel_loss": pix, "total_loss": tot}
            if val is not None:
                report = evaluate(model, val, cfg, cfg.test_steps, val_fn, sched.eval_batch_size)
                for r in report.rows:
                    row[f"val_acc_step{r.step}"] = r.accuracy
                    row[f"val_psnr_step{r.step}"] = r.psnr
                    row[f"val_ssim_step{r.step}"] = r.ssim
                acc = report.final().accuracy
            else:
                acc = -tot
            writer.writerow([repr(row[c]) if isinstance(row.get(c), float) else row.get(c, "")
                             for c in columns])
            fh.flush()
            history.append(row)
            if epoch % sched.checkpoint_every == 0 or epoch == sched.epochs:
                save_checkpoint(model, cfg, last_path)
            if acc > best_acc:
                best_acc = acc
                save_checkpoint(model, cfg, best_path)
            log.info("epoch %d lr %.4g rec %.4f pixel %.4f total %.4f", epoch, lr, rec, pix, tot)
            if progress is not None:
                progress(row)
    return TrainResult(best_path, last_path, log_path, history, model)
