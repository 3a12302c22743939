"""Procedural scenes with paired saliency maps, fixations and segmentation masks.

Each object's class fixes its shape and how strongly it attracts gaze;
colour is drawn independently, so predicting saliency well requires
recognising shapes, which is exactly what the segmentation task teaches.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, GenerationError

SHAPES = ("disk", "rectangle", "triangle")


@dataclass
class SynthConfig:
    height: int = 48
    width: int = 64
    num_classes: int = 4
    min_objects: int = 1
    max_objects: int = 3
    min_size: float = 5.0
    max_size: float = 11.0
    sigma_scale: float = 0.7
    fixations_per_image: int = 16
    texture_amplitude: float = 0.08
    max_retries: int = 200

    def class_shape(self, class_id: int) -> str:
        return SHAPES[(class_id - 1) % len(SHAPES)]

    def class_salience(self, class_id: int) -> float:
        """Gaze weight per foreground class, decreasing from 1.0 to 0.15."""
        n = self.num_classes - 1
        return float(np.linspace(1.0, 0.15, n)[class_id - 1]) if n > 1 else 1.0


@dataclass
class SceneObject:
    class_id: int
    shape: str
    center: tuple  # (row, col)
    size: float  # half-extent in pixels
    color: tuple  # RGB in [0, 1]
    salience: float


@dataclass
class SceneSpec:
    height: int
    width: int
    objects: list
    background_seed: int
    num_classes: int = 4

    def validate(self) -> None:
        if not self.objects:
            raise GenerationError("a scene needs at least one object")
        for obj in self.objects:
            r, c = obj.center
            if not (0 <= r - obj.size and r + obj.size <= self.height - 1 and 0 <= c - obj.size and c + obj.size <= self.width - 1):
                raise GenerationError(f"object at {obj.center} with size {obj.size} leaves the canvas")
            if not 0 < obj.class_id < self.num_classes:
                raise GenerationError(f"class id {obj.class_id} outside [1, {self.num_classes})")


@dataclass
class Sample:
    id: str
    image: np.ndarray  # [3, H, W] in [0, 1]
    sal: Optional[np.ndarray] = None  # [H, W], max-normalized
    fixations: Optional[np.ndarray] = None  # [N, 2] (row, col)
    mask: Optional[np.ndarray] = None  # [H, W] class ids

    @property
    def saliency_only(self) -> bool:
        return self.mask is None

    @property
    def segmentation_only(self) -> bool:
        return self.sal is None


def shape_mask(shape: str, center, size: float, height: int, width: int) -> np.ndarray:
    rr, cc = np.mgrid[0:height, 0:width].astype(np.float64)
    r0, c0 = center
    if shape == "disk":
        return (rr - r0) ** 2 + (cc - c0) ** 2 <= size * size
    if shape == "rectangle":
        return (np.abs(rr - r0) <= 0.6 * size) & (np.abs(cc - c0) <= size)
    if shape == "triangle":
        top = r0 - size
        inside_rows = (rr >= top) & (rr <= r0 + size)
        return inside_rows & (np.abs(cc - c0) <= (rr - top) / 2.0)
    raise ConfigError(f"unknown shape {shape!r}")


def random_scene(rng: np.random.Generator, cfg: SynthConfig) -> SceneSpec:
    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects: list[SceneObject] = []
    for _ in range(count):
        for _attempt in range(cfg.max_retries):
            size = float(rng.uniform(cfg.min_size, cfg.max_size))
            r = float(rng.uniform(size, cfg.height - 1 - size))
            c = float(rng.uniform(size, cfg.width - 1 - size))
            clear = all(
                (r - o.center[0]) ** 2 + (c - o.center[1]) ** 2 > (0.8 * (size + o.size)) ** 2 for o in objects
            )
            if clear:
                break
        else:
            raise GenerationError(f"could not place object {len(objects) + 1} after {cfg.max_retries} tries")
        class_id = int(rng.integers(1, cfg.num_classes))
        color = tuple(float(v) for v in rng.uniform(0.35, 1.0, size=3))
        objects.append(
            SceneObject(class_id, cfg.class_shape(class_id), (r, c), size, color, cfg.class_salience(class_id))
        )
    return SceneSpec(cfg.height, cfg.width, objects, int(rng.integers(0, 2**31 - 1)), cfg.num_classes)


def render_scene(spec: SceneSpec, cfg: Optional[SynthConfig] = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Image [3, H, W] (8-bit quantized), saliency [H, W] (float32-exact, peak 1), mask [H, W]."""
    cfg = cfg or SynthConfig()
    spec.validate()
    H, W = spec.height, spec.width
    bg = np.random.default_rng(spec.background_seed)
    base = bg.uniform(0.05, 0.3, size=3)
    ramp = np.linspace(-1.0, 1.0, W)[None, :] * bg.uniform(-1, 1) + np.linspace(-1.0, 1.0, H)[:, None] * bg.uniform(-1, 1)
    image = base[:, None, None] + cfg.texture_amplitude * (0.5 * ramp[None] + bg.standard_normal((3, H, W)))
    mask = np.zeros((H, W), dtype=np.int64)
    sal = np.zeros((H, W))
    rr, cc = np.mgrid[0:H, 0:W].astype(np.float64)
    for obj in spec.objects:
        inside = shape_mask(obj.shape, obj.center, obj.size, H, W)
        image[:, inside] = np.asarray(obj.color)[:, None]
        mask[inside] = obj.class_id
        sigma = cfg.sigma_scale * obj.size
        d2 = (rr - obj.center[0]) ** 2 + (cc - obj.center[1]) ** 2
        sal += obj.salience * np.exp(-d2 / (2.0 * sigma * sigma))
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    sal = (sal / sal.max()).astype(np.float32).astype(np.float64)
    return image, sal, mask


def sample_fixations(sal: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` (row, col) points with probability proportional to ``sal``."""
    p = np.asarray(sal, dtype=np.float64).ravel()
    p = p / p.sum()
    idx = rng.choice(p.size, size=n, p=p)
    return np.stack(np.divmod(idx, sal.shape[1]), axis=1).astype(np.int64)


def generate_sample(index: int, seed: int, cfg: SynthConfig, mode: str = "both") -> Sample:
    rng = np.random.default_rng([seed, index])
    spec = random_scene(rng, cfg)
    image, sal, mask = render_scene(spec, cfg)
    fix = sample_fixations(sal, cfg.fixations_per_image, rng)
    sample = Sample(f"{index:06d}", image, sal, fix, mask)
    if mode == "saliency":
        sample.mask = None
    elif mode == "segmentation":
        sample.sal = None
        sample.fixations = None
    elif mode != "both":
        raise ConfigError(f"mode must be 'saliency', 'segmentation' or 'both', got {mode!r}")
    return sample


def generate_dataset(
    n: int, seed: int, config: Optional[SynthConfig] = None, mode: str = "both", workers: int = 1
) -> list[Sample]:
    """``n`` samples; sample ``i`` depends only on ``(seed, i)``."""
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    cfg = config or SynthConfig()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda i: generate_sample(i, seed, cfg, mode), range(n)))
    return [generate_sample(i, seed, cfg, mode) for i in range(n)]
