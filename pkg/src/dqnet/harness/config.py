"""Flat ``key = value`` run configuration and its mapping onto the model/loss/training records."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..cnn import CnnConfig
from ..data import SynthConfig
from ..errors import ConfigError
from ..losses import LossConfig
from ..model import ModelConfig
from ..vit import VitConfig


@dataclass(frozen=True)
class TrainConfig:
    max_steps: int
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 4
    lr: float = 1e-3
    power: float = 0.9
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    layer_decay: float | None = None  # e.g. 0.75; None disables per-depth ViT lr factors
    seed: int = 0
    augment: bool = True
    checkpoint_every: int = 0  # 0: final checkpoint only
    n_train: int = 8  # synthetic training scenes when no dataset directory is given
    delta: float = 0.5  # synthetic camouflage strength

    def __post_init__(self):
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.power <= 0:
            raise ConfigError("power must be > 0")
        if self.layer_decay is not None and not 0 < self.layer_decay <= 1:
            raise ConfigError("layer_decay must lie in (0, 1]")

    def synth(self, seed_offset: int = 0) -> SynthConfig:
        return SynthConfig(size=self.model.vit.image_size, delta=self.delta, seed=self.seed + seed_offset)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _stages(text: str) -> tuple[int, ...]:
    text = text.strip()
    if text in ("", "none"):
        return ()
    if "," in text or " " in text:
        return _ints(text)
    return tuple(int(ch) for ch in text)  # "2345"


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none", "off") else float(text)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (record, field, parser)
_KEYS = {
    "image_size": ("vit", "image_size", int),
    "patch_size": ("vit", "patch_size", int),
    "embed_dim": ("vit", "embed_dim", int),
    "depth": ("vit", "depth", int),
    "heads": ("vit", "heads", int),
    "mlp_ratio": ("vit", "mlp_ratio", float),
    "cnn_widths": ("cnn", "widths", _ints),
    "cnn_blocks": ("cnn", "blocks", _ints),
    "cnn_block": ("cnn", "block", str),
    "window": ("model", "window", str),  # integer or "full"
    "stages": ("model", "stages", _stages),
    "decoder_width": ("model", "decoder_width", int),
    "fusion": ("model", "fusion", str),
    "rbq_heads": ("model", "rbq_heads", int),
    "sal_beta": ("loss", "beta", float),
    "weight_lambda": ("loss", "lam", float),
    "weight_kernel": ("loss", "k", int),
    "max_steps": ("train", "max_steps", int),
    "batch_size": ("train", "batch_size", int),
    "lr": ("train", "lr", float),
    "power": ("train", "power", float),
    "weight_decay": ("train", "weight_decay", float),
    "betas": ("train", "betas", lambda t: tuple(float(x) for x in t.replace(",", " ").split())),
    "adam_eps": ("train", "adam_eps", float),
    "layer_decay": ("train", "layer_decay", _opt_float),
    "seed": ("train", "seed", int),
    "augment": ("train", "augment", _bool),
    "checkpoint_every": ("train", "checkpoint_every", int),
    "n_train": ("train", "n_train", int),
    "delta": ("train", "delta", float),
}


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def build(values: dict[str, str], overrides: dict | None = None) -> TrainConfig:
    """Turn raw string values (plus typed ``overrides``) into a validated :class:`TrainConfig`."""
    groups: dict[str, dict] = {"vit": {}, "cnn": {}, "model": {}, "loss": {}, "train": {}}
    for key, text in values.items():
        group, name, parse = _KEYS[key]
        try:
            groups[group][name] = parse(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    for key, value in (overrides or {}).items():
        if key not in _KEYS:
            raise ConfigError(f"unknown key {key!r}")
        group, name, _ = _KEYS[key]
        groups[group][name] = value
    if "max_steps" not in groups["train"]:
        raise ConfigError("max_steps is required (there is no default training length)")
    vit = VitConfig(**groups["vit"])
    model = groups["model"]
    if "window" in model:
        w = str(model["window"]).strip().lower()
        model["window"] = vit.grid if w == "full" else int(w)
    cfg_model = ModelConfig(vit=vit, cnn=CnnConfig(**groups["cnn"]), **model)
    return TrainConfig(model=cfg_model, loss=LossConfig(**groups["loss"]), **groups["train"])


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    return build(parse_text(Path(path).read_text(encoding="utf-8")), overrides)


def to_dict(cfg: TrainConfig) -> dict:
    """JSON-friendly echo of every setting (tuples become lists)."""
    return asdict(cfg)


def from_dict(d: dict) -> TrainConfig:
    def tup(x):
        return tuple(x) if isinstance(x, list) else x

    m = d["model"]
    model = ModelConfig(
        vit=VitConfig(**m["vit"]),
        cnn=CnnConfig(**{k: tup(v) for k, v in m["cnn"].items()}),
        **{k: tup(v) for k, v in m.items() if k not in ("vit", "cnn")},
    )
    rest = {k: tup(v) for k, v in d.items() if k not in ("model", "loss")}
    return TrainConfig(model=model, loss=LossConfig(**d["loss"]), **rest)


def diff(a: dict, b: dict, prefix: str = "") -> list[str]:
    """Human-readable list of settings that differ between two config echoes."""
    out = []
    for key in sorted(set(a) | set(b)):
        va, vb = a.get(key), b.get(key)
        va, vb = (list(v) if isinstance(v, tuple) else v for v in (va, vb))  # JSON echoes hold lists
        if isinstance(va, dict) and isinstance(vb, dict):
            out += diff(va, vb, f"{prefix}{key}.")
        elif va != vb:
            out.append(f"{prefix}{key}: {va!r} != {vb!r}")
    return out


def with_model(cfg: TrainConfig, **changes) -> TrainConfig:
    return replace(cfg, model=replace(cfg.model, **changes))


TRAIN_FIELDS = tuple(f.name for f in fields(TrainConfig))
