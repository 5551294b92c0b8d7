"""Synthetic camouflage scenes, image-folder datasets, and geometric augmentation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError
from .ops import interpolation_matrix

log = logging.getLogger(__name__)


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    mask: np.ndarray  # [H, W] float32 in {0, 1}
    name: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3 or self.image.shape[1:] != self.mask.shape:
            raise ValueError(f"{self.name}: image {self.image.shape} does not match mask {self.mask.shape}")


@dataclass(frozen=True)
class SynthConfig:
    size: int = 128
    band: tuple[float, float] = (3.0, 12.0)  # texture frequencies, cycles per image
    blobs: tuple[int, int] = (1, 1)
    area: tuple[float, float] = (0.08, 0.3)  # target foreground fraction per scene
    delta: float = 0.5
    seed: int = 0
    max_retries: int = 50

    def __post_init__(self):
        if not 0.0 < self.delta <= 1.0:
            raise ConfigError("camouflage strength delta must lie in (0, 1]")
        lo, hi = self.band
        if not 0.0 < lo < hi:
            raise ConfigError("texture band must satisfy 0 < low < high")
        if not 1 <= self.blobs[0] <= self.blobs[1]:
            raise ConfigError("blob count range must satisfy 1 <= low <= high")
        if not 0.0 < self.area[0] <= self.area[1] < 1.0:
            raise ConfigError("area range must satisfy 0 < low <= high < 1")


def band_noise(rng: np.random.Generator, size: int, band: tuple[float, float]) -> np.ndarray:
    """White noise restricted to an annulus of spatial frequencies, scaled to zero mean, unit std."""
    f = np.fft.fftfreq(size) * size
    radius = np.hypot(f[:, None], f[None, :])
    keep = (radius >= band[0]) & (radius <= band[1])
    spectrum = np.fft.fft2(rng.standard_normal((size, size))) * keep
    field = np.fft.ifft2(spectrum).real
    return (field - field.mean()) / (field.std() + 1e-12)


def texture(rng: np.random.Generator, size: int, band: tuple[float, float]) -> np.ndarray:
    """Colour texture ``[3, H, W]`` in ``[0, 1]``: two noise fields mixed through a random palette."""
    fields = np.stack([band_noise(rng, size, band) for _ in range(2)])
    base = rng.uniform(0.3, 0.7, size=(3, 1, 1))
    palette = rng.uniform(-0.12, 0.12, size=(3, 2))
    return np.clip(base + np.einsum("ck,khw->chw", palette, fields), 0.0, 1.0)


def blob_mask(rng: np.random.Generator, size: int, area: float, vertices: int = 24) -> np.ndarray | None:
    """Star-shaped blob from a circularly smoothed random polygon, or ``None`` if it leaves the frame."""
    radii = rng.uniform(0.55, 1.45, size=vertices)
    radii = ndimage.gaussian_filter1d(radii, sigma=1.5, mode="wrap")
    mean_r = np.sqrt(area * size * size / np.pi)
    # area of a star shape is 0.5 * integral r^2, so normalise the mean square radius
    radii *= mean_r / np.sqrt(np.mean(radii**2))
    reach = radii.max()
    if 2 * reach >= size - 2:
        return None
    cy, cx = rng.uniform(reach + 1, size - reach - 1, size=2)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    theta = np.arctan2(yy - cy, xx - cx) % (2 * np.pi)
    pos = theta / (2 * np.pi) * vertices
    lo = np.floor(pos).astype(int) % vertices
    frac = pos - np.floor(pos)
    r = (1 - frac) * radii[lo] + frac * radii[(lo + 1) % vertices]
    return np.hypot(yy - cy, xx - cx) < r


def synth_sample(cfg: SynthConfig, index: int) -> Sample:
    """One scene; depends only on ``(cfg, index)``."""
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.size
    tex = texture(rng, size, cfg.band)
    for _ in range(cfg.max_retries):
        count = int(rng.integers(cfg.blobs[0], cfg.blobs[1] + 1))
        target = rng.uniform(*cfg.area)
        parts = [blob_mask(rng, size, target / count) for _ in range(count)]
        if any(p is None for p in parts):
            continue
        mask = np.logical_or.reduce(parts)
        frac = mask.mean()
        if 0.05 <= frac <= 0.4:
            break
    else:
        raise RuntimeError(f"no valid blob layout after {cfg.max_retries} attempts (seed {cfg.seed}, item {index})")
    shift = rng.integers(size // 4, 3 * size // 4, size=2)
    shifted = np.roll(tex, tuple(shift), axis=(1, 2))
    mu = tex.mean(axis=(1, 2), keepdims=True)
    inside = (1.0 - cfg.delta) * tex + cfg.delta * (2.0 * mu - shifted)
    image = np.where(mask, np.clip(inside, 0.0, 1.0), tex)
    return Sample(image.astype(np.float32), mask.astype(np.float32), f"synth_{cfg.seed}_{index:05d}")


def gen_synthetic(cfg: SynthConfig, n: int, start: int = 0) -> list[Sample]:
    if n < 1:
        raise ValueError("need at least one sample")
    return [synth_sample(cfg, start + i) for i in range(n)]


# -- image folders ----------------------------------------------------------------
def resize_array(x: np.ndarray, size: tuple[int, int], mode: str = "bicubic") -> np.ndarray:
    """Resample the last two axes of a plain array."""
    if x.shape[-2:] == tuple(size):
        return x
    mh = interpolation_matrix(x.shape[-2], size[0], mode)
    mw = interpolation_matrix(x.shape[-1], size[1], mode)
    return mh @ x @ mw.T


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0


def read_mask(path) -> np.ndarray:
    """Binary mask: 8-bit values strictly above 127 are foreground."""
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.float32)


def load_dataset(root, size: int | None = None) -> list[Sample]:
    """Pairs ``images/<stem>.*`` with ``masks/<stem>.png``, resized bicubically to ``size``.

    Unmatched stems and unreadable files are logged and skipped.
    """
    root = Path(root)
    images = {p.stem: p for p in sorted((root / "images").glob("*")) if p.is_file()}
    masks = {p.stem: p for p in sorted((root / "masks").glob("*")) if p.is_file()}
    for stem in sorted(set(images) ^ set(masks)):
        log.warning("%s: no matching %s", stem, "mask" if stem in images else "image")
    samples = []
    for stem in sorted(set(images) & set(masks)):
        try:
            image, mask = read_image(images[stem]), read_mask(masks[stem])
        except OSError as exc:
            log.warning("%s: unreadable (%s)", stem, exc)
            continue
        if size is not None:
            image = np.clip(resize_array(image, (size, size)), 0.0, 1.0)
            mask = (resize_array(mask.astype(np.float64), (size, size)) > 0.5).astype(np.float32)
        if image.shape[1:] != mask.shape:
            log.warning("%s: image %s and mask %s differ in size", stem, image.shape[1:], mask.shape)
            continue
        samples.append(Sample(image.astype(np.float32), mask, stem))
    if not samples:
        log.warning("no image/mask pairs found under %s", root)
    return samples


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def save_dataset(samples: list[Sample], root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(to_uint8(s.image.transpose(1, 2, 0))).save(root / "images" / f"{s.name}.png")
        Image.fromarray(to_uint8(s.mask)).save(root / "masks" / f"{s.name}.png")
    return root


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


# -- augmentation -------------------------------------------------------------------
@dataclass(frozen=True)
class AugParams:
    flip: bool = False
    quarter_turns: int = 0
    scale: float = 1.0

    @classmethod
    def draw(cls, rng: np.random.Generator, scale_range: tuple[float, float] = (0.75, 1.25)) -> "AugParams":
        return cls(bool(rng.random() < 0.5), int(rng.integers(4)), float(rng.uniform(*scale_range)))


def _rescale(x: np.ndarray, scale: float, mode: str) -> np.ndarray:
    """Zoom about the centre, then crop or edge-pad back to the original extent."""
    h, w = x.shape[-2:]
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    y = resize_array(x, (nh, nw), mode)
    if nh >= h:
        top = (nh - h) // 2
        y = y[..., top : top + h, :]
    else:
        lo = (h - nh) // 2
        y = np.pad(y, [(0, 0)] * (y.ndim - 2) + [(lo, h - nh - lo), (0, 0)], mode="edge")
    if nw >= w:
        left = (nw - w) // 2
        y = y[..., left : left + w]
    else:
        lo = (w - nw) // 2
        y = np.pad(y, [(0, 0)] * (y.ndim - 1) + [(lo, w - nw - lo)], mode="edge")
    return y


def apply_augment(s: Sample, p: AugParams) -> Sample:
    image, mask = s.image, s.mask
    if p.flip:
        image, mask = image[..., ::-1], mask[..., ::-1]
    if p.quarter_turns % 4:
        image = np.rot90(image, p.quarter_turns, axes=(1, 2))
        mask = np.rot90(mask, p.quarter_turns)
    if p.scale != 1.0:
        image = np.clip(_rescale(image.astype(np.float64), p.scale, "bilinear"), 0.0, 1.0)
        mask = _rescale(mask.astype(np.float64), p.scale, "bilinear") > 0.5
    return replace(s, image=np.ascontiguousarray(image, dtype=np.float32), mask=np.ascontiguousarray(mask, dtype=np.float32))


def augment(s: Sample, rng: np.random.Generator) -> Sample:
    """Random horizontal flip, right-angle rotation and ``[0.75, 1.25]`` zoom, shared by image and mask."""
    return apply_augment(s, AugParams.draw(rng))
