"""Training loop, checkpoint plumbing and evaluation entry points."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .. import autograd as ag
from ..data import Sample, apply_augment, AugParams, load_dataset, stack, to_uint8
from ..losses import total_loss
from ..metrics import MetricReport, aggregate, evaluate_dataset, evaluate_pair, write_report
from ..model import DQNet
from ..nn import rng_stream
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig, diff, from_dict, to_dict
from .optim import AdamW, layer_decay_scales, poly_lr

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "lr", "l_bce_w", "l_iou_w", "l_sal", "l_total", "batch")


class TrainingDiverged(RuntimeError):
    pass


class ConfigMismatch(ValueError):
    pass


class BatchSampler:
    """Reshuffles the index set every epoch; the order depends only on the generator."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n, self.batch, self.rng = n, batch, rng
        self._queue: list[int] = []

    def next(self) -> list[int]:
        while len(self._queue) < self.batch:
            self._queue.extend(self.rng.permutation(self.n).tolist())
        out, self._queue = self._queue[: self.batch], self._queue[self.batch :]
        return out


@dataclass
class TrainResult:
    model: DQNet
    optimizer: AdamW
    log: list[dict]
    checkpoint: Path | None = None


def build_model(cfg: TrainConfig) -> DQNet:
    return DQNet(cfg.model, seed=cfg.seed)


def checkpoint_payload(model: DQNet, opt: AdamW, cfg: TrainConfig, step: int, rngs: dict) -> tuple[dict, dict]:
    tensors = model.state_dict()
    tensors.update(opt.state())
    meta = {
        "config": to_dict(cfg),
        "step": step,
        "adam_t": opt.t,
        "rng": {name: g.bit_generator.state for name, g in rngs.items()},
    }
    return tensors, meta


def train(cfg: TrainConfig, data: list[Sample], out=None) -> TrainResult:
    """Seeded AdamW/poly-lr optimisation of the total loss on ``data``.

    Writes ``train_log.csv`` and ``checkpoint.dqnt`` under ``out`` when given.
    A non-finite loss aborts the run after saving the last good state to
    ``last_good.dqnt``.
    """
    if not data:
        raise ValueError("training data is empty")
    out = Path(out) if out is not None else None
    model = build_model(cfg).train()
    named = list(model.named_parameters())
    opt = AdamW(named, cfg.betas, cfg.adam_eps, cfg.weight_decay, layer_decay_scales(model, cfg.layer_decay))
    rngs = {"data": rng_stream(cfg.seed, "data"), "augment": rng_stream(cfg.seed, "augment")}
    sampler = BatchSampler(len(data), cfg.batch_size, rngs["data"])
    rows: list[dict] = []
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "train_log.csv", "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
    try:
        for step in range(cfg.max_steps):
            idx = sampler.next()
            batch = [data[i] for i in idx]
            if cfg.augment:
                batch = [apply_augment(s, AugParams.draw(rngs["augment"])) for s in batch]
            images, masks = stack(batch)
            lr = poly_lr(step, cfg.max_steps, cfg.lr, cfg.power)
            model.zero_grad()
            result = model(images)
            stages = sorted(result.aux)
            losses = total_loss(
                result.logits, [result.aux[s] for s in stages], [result.enhanced[s] for s in stages], masks, cfg.loss
            )
            values = losses.as_floats()
            if not all(math.isfinite(v) for v in values.values()):
                msg = f"non-finite loss at step {step} (lr={lr:.3g}, batch={idx}): {values}"
                if out is not None:
                    save_checkpoint(out / "last_good.dqnt", *checkpoint_payload(model, opt, cfg, step, rngs))
                    msg += f"; last good state saved to {out / 'last_good.dqnt'}"
                raise TrainingDiverged(msg)
            losses.total.backward()
            opt.step(lr)
            row = {"step": step, "lr": lr, **values, "batch": " ".join(map(str, idx))}
            rows.append(row)
            if writer is not None:
                writer.writerow(row)
            if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"step_{step + 1:06d}.dqnt", *checkpoint_payload(model, opt, cfg, step + 1, rngs))
    finally:
        if fh is not None:
            fh.close()
    path = None
    if out is not None:
        path = save_checkpoint(out / "checkpoint.dqnt", *checkpoint_payload(model, opt, cfg, cfg.max_steps, rngs))
    return TrainResult(model, opt, rows, path)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[DQNet, TrainConfig]:
    cfg = from_dict(ckpt.config)
    model = build_model(cfg)
    model.load_state_dict({k: v for k, v in ckpt.tensors.items() if not k.startswith("adam.")})
    return model.eval(), cfg


def predict(model: DQNet, images: np.ndarray, batch: int = 8) -> np.ndarray:
    """Eval-mode foreground probabilities ``[N, H, W]``."""
    return np.concatenate([model.predict(images[i : i + batch]) for i in range(0, len(images), batch)])


def evaluate_samples(model: DQNet, samples: list[Sample], batch: int = 8) -> MetricReport:
    """Metrics of floating-point predictions against in-memory masks."""
    if not samples:
        raise ValueError("no samples to evaluate")
    images, masks = stack(samples)
    probs = predict(model, images, batch)
    rows = [{"name": s.name, **evaluate_pair(p, s.mask)} for s, p in zip(samples, probs)]
    return aggregate(rows)


def evaluate(checkpoint, data_dir, report, expect: TrainConfig | None = None) -> MetricReport:
    """Predict every image under ``data_dir``, write 8-bit prediction PNGs and the metric report.

    Refuses to run when ``expect`` is given and differs from the configuration
    stored in the checkpoint.
    """
    ckpt = load_checkpoint(checkpoint)
    if expect is not None:
        changes = diff(ckpt.config, to_dict(expect))
        if changes:
            raise ConfigMismatch("checkpoint/config mismatch:\n  " + "\n  ".join(changes))
    model, cfg = model_from_checkpoint(ckpt)
    samples = load_dataset(data_dir, cfg.model.vit.image_size)
    if not samples:
        raise FileNotFoundError(f"no image/mask pairs under {data_dir}")
    report = Path(report)
    base = report.with_suffix("") if report.suffix in (".json", ".csv") else report
    pred_dir = base.parent / f"{base.name}_predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    images, _ = stack(samples)
    with ag.no_grad():
        probs = predict(model, images)
    for s, p in zip(samples, probs):
        Image.fromarray(to_uint8(p)).save(pred_dir / f"{s.name}.png")
    result = evaluate_dataset(pred_dir, Path(data_dir) / "masks")
    write_report(result, base)
    return result
