"""Sweeps over one architectural axis with shared seeds, data and budget."""
from __future__ import annotations

import csv
import json
import logging
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .. import autograd as ag
from ..data import Sample, gen_synthetic
from ..errors import ConfigError
from ..fusion import FUSION_MODES
from .config import TrainConfig, _stages
from .train import evaluate_samples, train

log = logging.getLogger(__name__)

AXES = ("fusion_mode", "stage_mask", "window_size")
HELD_OUT_OFFSET = 10_000  # synthetic seeds for the held-out set never overlap the training seeds


@dataclass
class AblationRow:
    axis: str
    value: str
    s_measure: float
    e_measure: float
    weighted_f: float
    mae: float
    score_elements: int  # attention scores per image, summed over enhanced stages
    score_bytes: int  # largest single attention-score buffer in one forward pass
    final_loss: float
    batches: str  # digest of the data order, identical across rows of a sweep


def variant(base: TrainConfig, axis: str, value: str) -> TrainConfig:
    """``base`` with one axis changed; raises ``ConfigError`` for invalid values."""
    value = str(value).strip()
    m = base.model
    if axis == "fusion_mode":
        if value not in FUSION_MODES:
            raise ConfigError(f"fusion mode must be one of {FUSION_MODES}")
        model = replace(m, fusion=value)
    elif axis == "stage_mask":
        stages = _stages(value)
        if not stages:
            raise ConfigError("stage mask must name at least one of stages 2..5")
        model = replace(m, stages=stages)
    elif axis == "window_size":
        w = m.vit.grid if value.lower() == "full" else int(value)
        model = replace(m, window=w)
    else:
        raise ConfigError(f"axis must be one of {AXES}")
    return replace(base, model=model)


def attention_footprint(model, image: np.ndarray) -> tuple[int, int]:
    """Attention-score elements per image and peak score-buffer bytes from one eval forward."""
    with ag.no_grad():
        model.eval()
        model(image[None])
    probes = [f.rbq.last_probe for f in model.fusion.values() if f.mode == "rbq"]
    if not probes:
        return 0, 0
    return sum(p["score_elements"] for p in probes), max(p["score_bytes"] for p in probes)


def ablate(
    axis: str,
    values: list[str],
    base: TrainConfig,
    train_data: list[Sample] | None = None,
    held_out: list[Sample] | None = None,
    out=None,
    n_held_out: int = 16,
) -> list[AblationRow]:
    """Train and evaluate one variant per value; invalid values are skipped with a warning."""
    if axis not in AXES:
        raise ConfigError(f"axis must be one of {AXES}")
    train_data = train_data or gen_synthetic(base.synth(), base.n_train)
    held_out = held_out or gen_synthetic(base.synth(HELD_OUT_OFFSET), n_held_out)
    out = Path(out) if out is not None else None
    rows = []
    for value in values:
        try:
            cfg = variant(base, axis, value)
        except (ConfigError, ValueError) as exc:
            log.warning("skipping %s=%s: %s", axis, value, exc)
            continue
        run_dir = out / f"{axis}_{value}" if out is not None else None
        result = train(cfg, train_data, run_dir)
        report = evaluate_samples(result.model, held_out)
        elements, nbytes = attention_footprint(result.model, held_out[0].image)
        rows.append(
            AblationRow(
                axis, str(value), report.s_measure, report.e_measure, report.weighted_f, report.mae,
                elements, nbytes, result.log[-1]["l_total"],
                f"{zlib.crc32(';'.join(r['batch'] for r in result.log).encode()):08x}",
            )
        )
        log.info("%s=%s: mae %.4f", axis, value, report.mae)
    if out is not None and rows:
        write_table(rows, out / f"ablation_{axis}")
    return rows


def write_table(rows: list[AblationRow], base: Path) -> None:
    base.parent.mkdir(parents=True, exist_ok=True)
    names = list(AblationRow.__dataclass_fields__)
    with open(base.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names)
        writer.writeheader()
        writer.writerows(vars(r) for r in rows)
    base.with_suffix(".json").write_text(json.dumps([vars(r) for r in rows], indent=2))


def format_table(rows: list[AblationRow]) -> str:
    head = f"{'value':>8} {'S':>6} {'E':>6} {'wF':>6} {'MAE':>7} {'scores':>8} {'bytes':>9}"
    lines = [head]
    for r in rows:
        lines.append(
            f"{r.value:>8} {r.s_measure:6.3f} {r.e_measure:6.3f} {r.weighted_f:6.3f} {r.mae:7.4f}"
            f" {r.score_elements:8d} {r.score_bytes:9d}"
        )
    return "\n".join(lines)
