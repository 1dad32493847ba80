"""Synthetic RGB-D segmentation scenes with an RGB-only domain shift.

Every scene is drawn from its own seed, so the same geometry can be rendered
clean (Source) and corrupted (Target). Corruption touches RGB only; masks and
depth come from the geometry and are identical across domains.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from ..errors import ConfigurationError


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True)
class Corruption:
    """RGB-only domain shift.

    ``color_cast`` scales one fixed colour transform (channel mixing, gain and
    offset) shared by every image of the domain and drawn from ``cast_seed``.
    ``contrast_jitter`` scales an independent per-image gain and offset.
    """

    noise_std: float = 0.0
    blur_radius: int = 0
    contrast_jitter: float = 0.0
    color_cast: float = 0.0
    cast_seed: int = 99

    def __post_init__(self):
        if min(self.noise_std, self.blur_radius, self.contrast_jitter, self.color_cast) < 0:
            raise ConfigurationError("corruption strengths must be >= 0")

    @property
    def is_zero(self) -> bool:
        return (self.noise_std == 0 and self.blur_radius == 0 and self.contrast_jitter == 0
                and self.color_cast == 0)

    def cast(self):
        """The domain's fixed (mixing, gain, offset) at unit strength."""
        rng = np.random.default_rng(self.cast_seed)
        gain = rng.uniform(-0.6, 0.2, size=(3, 1, 1))
        offset = rng.uniform(-0.4, 0.4, size=(3, 1, 1))
        mixing = 0.5 * rng.standard_normal((3, 3))
        return mixing, gain, offset


DEFAULT_TARGET_CORRUPTION = Corruption(blur_radius=1, contrast_jitter=1.5)


@dataclass(frozen=True)
class SyntheticTaskConfig:
    image_size: int = 32
    object_count: tuple = (1, 3)
    domain: Domain = Domain.SOURCE
    corruption: Corruption = field(default_factory=Corruption)
    transparent_fraction: float = 0.3
    depth_noise: float = 0.15
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "domain", Domain(self.domain))
        if isinstance(self.corruption, dict):
            object.__setattr__(self, "corruption", Corruption(**self.corruption))
        object.__setattr__(self, "object_count", tuple(self.object_count))
        lo, hi = self.object_count
        if not 1 <= lo <= hi:
            raise ConfigurationError("object_count must satisfy 1 <= min <= max")
        if self.domain is Domain.SOURCE and not self.corruption.is_zero:
            raise ConfigurationError("Source domain must not carry corruption")
        if self.domain is Domain.TARGET and self.corruption.is_zero:
            raise ConfigurationError("Target domain needs a positive corruption")

    @property
    def includes_transparent_analog(self) -> bool:
        return self.transparent_fraction > 0

    def as_target(self, corruption: Corruption = DEFAULT_TARGET_CORRUPTION) -> "SyntheticTaskConfig":
        return replace(self, domain=Domain.TARGET, corruption=corruption)

    def as_source(self) -> "SyntheticTaskConfig":
        return replace(self, domain=Domain.SOURCE, corruption=Corruption())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domain"] = self.domain.value
        d["object_count"] = list(self.object_count)
        return d


@dataclass
class Dataset:
    images: np.ndarray          # (n, 3, H, W) float64 in [0, 1]
    masks: np.ndarray           # (n, H, W) uint8 {0, 1}
    depth: np.ndarray           # (n, 1, H, W) float64
    transparent: np.ndarray     # (n,) bool: scene holds a low-contrast object
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.masks[idx], self.depth[idx], self.transparent[idx],
                       dict(self.metadata))


def _scene_seed(base: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(base) & 0xFFFFFFFF, int(index)])


def _render_geometry(rng: np.random.Generator, cfg: SyntheticTaskConfig):
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    bg_color = rng.uniform(0.15, 0.85, size=3)
    grad = rng.normal(0, 0.15, size=(3, 2))
    rgb = bg_color[:, None, None] + (grad[:, 0, None, None] * (xx / s - 0.5)
                                     + grad[:, 1, None, None] * (yy / s - 0.5))
    tex = ndimage.gaussian_filter(rng.normal(0, 1, size=(s, s)), 2.0)
    rgb = rgb + 0.06 * tex / (tex.std() + 1e-12)

    depth = 1.0 + 0.1 * (yy / s - 0.5) + rng.normal(0, 0.02)
    mask = np.zeros((s, s), dtype=np.uint8)
    transparent = False
    n_obj = int(rng.integers(cfg.object_count[0], cfg.object_count[1] + 1))
    for _ in range(n_obj):
        kind = rng.integers(0, 3)
        cy, cx = rng.uniform(6, s - 6, size=2)
        if kind == 0:
            r = rng.uniform(6.0, 11.0)
            shape = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        elif kind == 1:
            hy, hx = rng.uniform(5.0, 10.0, size=2)
            shape = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
        else:
            ay, ax = rng.uniform(5.0, 11.0, size=2)
            theta = rng.uniform(0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = dx * np.cos(theta) + dy * np.sin(theta)
            v = -dx * np.sin(theta) + dy * np.cos(theta)
            shape = (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
        color = rng.uniform(0, 1, size=3)
        for _retry in range(20):
            if np.linalg.norm(color - bg_color) >= 0.45:
                break
            color = rng.uniform(0, 1, size=3)
        is_transparent = rng.uniform() < cfg.transparent_fraction
        opacity = rng.uniform(0.35, 0.5) if is_transparent else 1.0
        transparent |= is_transparent
        shade = 1.0 + 0.15 * ((xx - cx) + (yy - cy)) / s
        obj_rgb = color[:, None, None] * shade
        rgb = np.where(shape, opacity * obj_rgb + (1 - opacity) * rgb, rgb)
        depth = np.where(shape, rng.uniform(0.45, 0.8), depth)
        mask[shape] = 1
    return np.clip(rgb, 0.0, 1.0), mask, depth, transparent


def _gain_offset(img, gain, offset):
    mean = img.mean(axis=(1, 2), keepdims=True)
    return mean + gain * (img - mean) + offset


def corrupt(rgb: np.ndarray, corruption: Corruption, rng: np.random.Generator) -> np.ndarray:
    """Apply colour cast, contrast jitter, box blur and additive noise to one (3, H, W) image."""
    out = rgb
    if corruption.color_cast:
        mixing, gain, offset = corruption.cast()
        k = corruption.color_cast
        out = np.einsum("ij,jhw->ihw", np.eye(3) + k * mixing, out)
        out = _gain_offset(out, 1.0 + k * gain, k * offset)
    if corruption.contrast_jitter:
        # Per-image, per-channel gain and offset around the image mean.
        cj = corruption.contrast_jitter
        gain = 1.0 + cj * rng.uniform(-0.6, 0.2, size=(3, 1, 1))
        offset = cj * rng.uniform(-0.4, 0.4, size=(3, 1, 1))
        out = _gain_offset(out, gain, offset)
    if corruption.blur_radius:
        size = 2 * corruption.blur_radius + 1
        out = ndimage.uniform_filter(out, size=(1, size, size), mode="nearest")
    if corruption.noise_std:
        out = out + rng.normal(0, corruption.noise_std, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def generate_dataset(cfg: SyntheticTaskConfig, n: int, offset: int = 0) -> Dataset:
    """Render ``n`` scenes, indices ``offset .. offset + n - 1`` of the seed's stream."""
    if n < 1:
        raise ConfigurationError("dataset size must be >= 1")
    s = cfg.image_size
    images = np.empty((n, 3, s, s))
    masks = np.empty((n, s, s), dtype=np.uint8)
    depth = np.empty((n, 1, s, s))
    transparent = np.empty(n, dtype=bool)
    for i in range(n):
        geo_seq, noise_seq, depth_seq = _scene_seed(cfg.seed, offset + i).spawn(3)
        rgb, mask, dep, transp = _render_geometry(np.random.default_rng(geo_seq), cfg)
        if cfg.domain is Domain.TARGET:
            rgb = corrupt(rgb, cfg.corruption, np.random.default_rng(noise_seq))
        drng = np.random.default_rng(depth_seq)
        dep = ndimage.gaussian_filter(dep, 1.0) + drng.normal(0, cfg.depth_noise, size=dep.shape)
        images[i] = rgb
        masks[i] = mask
        depth[i, 0] = dep
        transparent[i] = transp
    meta = {"domain": cfg.domain.value, "corruption": asdict(cfg.corruption), "seed": cfg.seed,
            "offset": offset, "n": n}
    return Dataset(images, masks, depth, transparent, meta)
