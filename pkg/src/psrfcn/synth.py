"""Synthetic three-class detection scenes.

Class 1 is a filled disc, class 2 an axis-aligned square and class 3 an
upward triangle, painted on a smooth textured field with per-object colour
jitter and additive Gaussian noise. Every scene is a pure function of the
dataset spec, the split and the scene index.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detection import Box, iou
from .errors import ConfigError, ParseError, PlacementError
from .kv import read_kv, render_kv
from .ppm import from_pixels, read_ppm, to_pixels, write_ppm

SPLITS = ("train", "val", "test")
CLASS_NAMES = {1: "disc", 2: "square", 3: "triangle"}
BASE_COLORS = {
    1: (0.85, 0.22, 0.18),
    2: (0.20, 0.35, 0.90),
    3: (0.95, 0.85, 0.20),
}
FIELD_COLOR = (0.36, 0.44, 0.24)
MAX_PLACEMENT_ATTEMPTS = 100
MAX_PAIR_IOU = 0.3


@dataclass(frozen=True)
class DatasetSpec:
    n_train: int = 180
    n_val: int = 20
    n_test: int = 25
    height: int = 64
    width: int = 64
    seed: int = 0
    objects_min: int = 1
    objects_max: int = 3
    noise_sigma: float = 0.03
    size_min: int = 8
    size_max: int = 21
    color_jitter: float = 0.08

    def __post_init__(self):
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"split size {name} must be > 0, got {getattr(self, name)}")
        if self.height < 32 or self.width < 32:
            raise ConfigError(f"images must be at least 32x32, got {self.height}x{self.width}")
        if not 1 <= self.objects_min <= self.objects_max:
            raise ConfigError("need 1 <= objects_min <= objects_max")
        if not 1 <= self.size_min <= self.size_max <= min(self.height, self.width):
            raise ConfigError("need 1 <= size_min <= size_max <= image side")
        if self.seed < 0 or self.noise_sigma < 0 or self.color_jitter < 0:
            raise ConfigError("seed, noise_sigma and color_jitter must be nonnegative")

    def count(self, split: str) -> int:
        return getattr(self, f"n_{split}")

    def to_pairs(self) -> dict[str, str]:
        return {f"data.{f.name}": str(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_pairs(cls, pairs: dict[str, str]) -> "DatasetSpec":
        kwargs = {}
        for f in dataclasses.fields(cls):
            key = f"data.{f.name}"
            if key in pairs:
                kwargs[f.name] = type(f.default)(pairs[key])
        return cls(**kwargs)


@dataclass
class Scene:
    image: np.ndarray  # [3, H, W] in [0, 1]
    annotations: list[tuple[int, Box]]
    image_id: str = ""


def scene_rng(spec: DatasetSpec, split: str, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=spec.seed, spawn_key=(SPLITS.index(split), index))
    return np.random.Generator(np.random.PCG64(ss))


def _background(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    img = np.empty((3, h, w))
    for c in range(3):
        tex = np.zeros((h, w))
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 3.0, size=2) * 2 * math.pi / np.array([w, h])
            phase = rng.uniform(0, 2 * math.pi)
            tex += np.sin(fx * xx + fy * yy + phase)
        img[c] = FIELD_COLOR[c] + 0.04 * tex
    return img


def shape_mask(class_id: int, box: Box, height: int, width: int) -> np.ndarray:
    """Pixels whose centres fall inside the shape inscribed in ``box``."""
    py, px = np.mgrid[0:height, 0:width] + 0.5
    x1, y1, x2, y2 = box
    if class_id == 1:
        cx, cy, r = (x1 + x2) / 2, (y1 + y2) / 2, (x2 - x1) / 2
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if class_id == 2:
        return (px >= x1) & (px <= x2) & (py >= y1) & (py <= y2)
    if class_id == 3:
        apex = (x1 + x2) / 2
        half = (x2 - x1) / 2
        frac = (py - y1) / (y2 - y1)
        return (py >= y1) & (py <= y2) & (np.abs(px - apex) <= half * frac)
    raise ConfigError(f"unknown class id {class_id}")


def render_scene(spec: DatasetSpec, rng: np.random.Generator, image_id: str = "") -> Scene:
    """Render one scene; raises :class:`PlacementError` when objects do not fit."""
    img = _background(spec, rng)
    n_obj = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    annotations: list[tuple[int, Box]] = []
    for _ in range(n_obj):
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            cls = int(rng.integers(1, 4))
            size = int(rng.integers(spec.size_min, spec.size_max + 1))
            x0 = int(rng.integers(0, spec.width - size + 1))
            y0 = int(rng.integers(0, spec.height - size + 1))
            box = Box(float(x0), float(y0), float(x0 + size), float(y0 + size))
            if all(iou(box, other) < MAX_PAIR_IOU for _, other in annotations):
                break
        else:
            raise PlacementError(
                f"could not place object {len(annotations) + 1} of {n_obj} after {MAX_PLACEMENT_ATTEMPTS} attempts"
            )
        color = np.clip(np.array(BASE_COLORS[cls]) + rng.uniform(-1, 1, 3) * spec.color_jitter, 0, 1)
        mask = shape_mask(cls, box, spec.height, spec.width)
        img[:, mask] = color[:, None]
        annotations.append((cls, box))
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    return Scene(np.clip(img, 0.0, 1.0), annotations, image_id)


def generate_split(spec: DatasetSpec, split: str) -> list[Scene]:
    return [render_scene(spec, scene_rng(spec, split, i), f"{split}_{i:04d}") for i in range(spec.count(split))]


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def format_annotation(image_id: str, class_id: int, box: Box) -> str:
    return " ".join([image_id, str(class_id)] + [_fmt(v) for v in box])


def parse_annotations(text: str, path=None) -> dict[str, list[tuple[int, Box]]]:
    out: dict[str, list[tuple[int, Box]]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ParseError(f"expected 'image_id class_id x1 y1 x2 y2', got {line!r}", path, lineno)
        try:
            cls = int(parts[1])
            box = Box(*(float(v) for v in parts[2:]))
        except ValueError:
            raise ParseError(f"non-numeric field in {line!r}", path, lineno) from None
        if not box.is_valid():
            raise ParseError(f"invalid box {tuple(box)}", path, lineno)
        out.setdefault(parts[0], []).append((cls, box))
    return out


def write_dataset(spec: DatasetSpec, out_dir) -> dict[str, str]:
    """Render all splits to ``out_dir``; returns the manifest pairs."""
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    manifest = spec.to_pairs()
    for split in SPLITS:
        scenes = generate_split(spec, split)
        lines = []
        for scene in scenes:
            write_ppm(root / "images" / f"{scene.image_id}.ppm", to_pixels(scene.image))
            lines.extend(format_annotation(scene.image_id, c, b) for c, b in scene.annotations)
        (root / f"{split}.txt").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        manifest[f"split.{split}"] = ",".join(s.image_id for s in scenes)
    (root / "manifest.cfg").write_text(render_kv(manifest, "synthetic detection dataset"), encoding="utf-8")
    return manifest


def read_dataset(data_dir, splits=SPLITS) -> dict[str, list[Scene]]:
    """Load scenes per split; images come back quantised to multiples of 1/255."""
    root = Path(data_dir)
    manifest_path = root / "manifest.cfg"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"{manifest_path}: dataset manifest not found")
    manifest = read_kv(manifest_path)
    out: dict[str, list[Scene]] = {}
    for split in splits:
        ann_path = root / f"{split}.txt"
        anns = parse_annotations(ann_path.read_text(encoding="utf-8"), ann_path)
        ids = [s for s in manifest.get(f"split.{split}", "").split(",") if s]
        out[split] = [
            Scene(from_pixels(read_ppm(root / "images" / f"{i}.ppm")), anns.get(i, []), i) for i in ids
        ]
    return out


def read_manifest_spec(data_dir) -> DatasetSpec:
    return DatasetSpec.from_pairs(read_kv(Path(data_dir) / "manifest.cfg"))
