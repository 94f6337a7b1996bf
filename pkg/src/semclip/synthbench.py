"""Synthetic shape/color VQA benchmark with exactly known ground-truth cells.

Scenes place solid shapes on a uniform background, one per grid cell, with no
anti-aliasing, so every pixel count is an exact integer and the resolution
bottleneck of the toy answerer can be checked analytically.
"""
from __future__ import annotations

import functools
import json
import math
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import derive_rng, PURPOSE_SYNTH, PURPOSE_SYNTH_SPLIT
from .imaging import Bbox, GridSpec, RasterImage, grid_regions, load_png, save_png

# chosen to keep the directions (color - background) angularly far apart, so
# hues stay distinguishable after heavy downsampling dilutes them toward the
# background
COLOR_TABLE: dict[str, tuple[int, int, int]] = {
    "red": (235, 20, 20),
    "green": (20, 235, 20),
    "blue": (20, 20, 235),
    "yellow": (235, 235, 20),
    "cyan": (20, 235, 235),
    "magenta": (235, 20, 235),
    "orange": (235, 128, 20),
    "purple": (128, 20, 235),
}

SHAPES = ("circle", "square", "triangle", "star")

TEMPLATE_COLOR_OF_SHAPE = "color_of_shape"
TEMPLATE_SHAPE_OF_COLOR = "shape_of_color"
TEMPLATE_COUNT = "count"
COUNT_QUESTION = "How many shapes are in the image?"


class SynthGenerationError(ValueError):
    """The requested dataset cannot be generated from this configuration."""


@dataclass(frozen=True)
class ShapePlacement:
    cell: int
    shape: str
    color: str
    size: int


@dataclass(frozen=True)
class SynthScene:
    canvas: tuple[int, int] = (1344, 1344)
    grid_n: int = 3
    placements: tuple[ShapePlacement, ...] = ()
    target_index: Optional[int] = None
    background: tuple[int, int, int] = (235, 235, 235)


@dataclass(frozen=True)
class SynthInstance:
    instance_id: str
    scene: SynthScene
    question: str
    answer: str
    gt_cell: int

    @property
    def image(self) -> RasterImage:
        # rendered lazily; scenes are cheap to keep, full canvases are not
        return render(self.scene)


@dataclass(frozen=True)
class SynthConfig:
    count: int
    seed: int = 0
    canvas: tuple[int, int] = (1344, 1344)
    grid_n: int = 3
    size_range: tuple[int, int] = (24, 116)
    distractor_count_range: tuple[int, int] = (1, 3)
    fraction_overview_solvable: float = 0.0
    templates: tuple[str, ...] = (TEMPLATE_COLOR_OF_SHAPE, TEMPLATE_SHAPE_OF_COLOR)
    target_shapes: tuple[str, ...] = SHAPES
    background: tuple[int, int, int] = (235, 235, 235)
    oracle_resolution: int = 224
    min_visible_pixels: int = 64

    def validate(self) -> None:
        cells = self.grid_n * self.grid_n
        if self.count < 0:
            raise SynthGenerationError(f"count must be >= 0, got {self.count}")
        if self.grid_n < 1:
            raise SynthGenerationError(f"grid_n must be >= 1, got {self.grid_n}")
        if not (1 <= self.size_range[0] <= self.size_range[1]):
            raise SynthGenerationError(f"bad size_range {self.size_range}")
        lo, hi = self.distractor_count_range
        if not (0 <= lo <= hi):
            raise SynthGenerationError(f"bad distractor_count_range {self.distractor_count_range}")
        if hi > cells - 1:
            raise SynthGenerationError(f"up to {hi} distractors cannot fit in {cells - 1} free cells")
        if not (0.0 <= self.fraction_overview_solvable <= 1.0):
            raise SynthGenerationError("fraction_overview_solvable must be in [0, 1]")
        bad = [t for t in self.templates if t not in (TEMPLATE_COLOR_OF_SHAPE, TEMPLATE_SHAPE_OF_COLOR, TEMPLATE_COUNT)]
        if bad or not self.templates:
            raise SynthGenerationError(f"unknown templates: {bad}")
        bad_shapes = [s for s in self.target_shapes if s not in SHAPES]
        if bad_shapes or not self.target_shapes:
            raise SynthGenerationError(f"unknown target shapes: {bad_shapes}")


_SYNTH_CONFIG_FIELDS = {f.name for f in SynthConfig.__dataclass_fields__.values()}


def synth_config_from_dict(raw: dict) -> SynthConfig:
    unknown = sorted(set(raw) - _SYNTH_CONFIG_FIELDS)
    if unknown:
        raise SynthGenerationError(f"unknown synth config key(s): {', '.join(unknown)}")
    kwargs = dict(raw)
    for key in ("canvas", "size_range", "distractor_count_range", "templates", "target_shapes", "background"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    cfg = SynthConfig(**kwargs)
    cfg.validate()
    return cfg


# --- rasterization -----------------------------------------------------------


@functools.lru_cache(maxsize=4096)
def shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean pixel mask of a shape inside its size x size bounding box.

    Integer-only predicates, no anti-aliasing, so the pixel count is exact.
    """
    s = size
    y, x = np.mgrid[0:s, 0:s]
    if shape == "square":
        mask = np.ones((s, s), dtype=bool)
    elif shape == "circle":
        mask = (2 * x - (s - 1)) ** 2 + (2 * y - (s - 1)) ** 2 <= s * s
    elif shape == "triangle":
        mask = np.abs(2 * x - (s - 1)) <= y
    elif shape == "star":
        # two overlaid triangles, apexes at top and bottom, bases at 3/4 height
        b = max(1, (3 * (s - 1)) // 4)
        up = (np.abs(2 * x - (s - 1)) * b <= (s - 1) * y) & (y <= b)
        down = (np.abs(2 * x - (s - 1)) * b <= (s - 1) * (s - 1 - y)) & (y >= (s - 1) - b)
        mask = up | down
    else:
        raise ValueError(f"unknown shape {shape!r}")
    mask.setflags(write=False)
    return mask


def shape_pixel_count(shape: str, size: int) -> int:
    return int(shape_mask(shape, size).sum())


def placement_bbox(scene: SynthScene, placement: ShapePlacement) -> Bbox:
    """Absolute canvas bbox of a placement: centered inside its grid cell."""
    w, h = scene.canvas
    regions = grid_regions(w, h, GridSpec(scene.grid_n))
    x0, y0, x1, y1 = regions[placement.cell].bbox
    cw, ch = x1 - x0, y1 - y0
    if placement.size > min(cw, ch):
        raise ValueError(f"size {placement.size} does not fit cell {placement.cell} ({cw}x{ch})")
    sx = x0 + (cw - placement.size) // 2
    sy = y0 + (ch - placement.size) // 2
    return (sx, sy, sx + placement.size, sy + placement.size)


def render(scene: SynthScene) -> RasterImage:
    w, h = scene.canvas
    arr = np.empty((h, w, 3), dtype=np.uint8)
    arr[:] = scene.background
    for pl in scene.placements:
        sx, sy, ex, ey = placement_bbox(scene, pl)
        mask = shape_mask(pl.shape, pl.size)
        region = arr[sy:ey, sx:ex]
        region[mask] = COLOR_TABLE[pl.color]
    return RasterImage.from_array(arr)


# --- visibility rule shared with the toy answerer -----------------------------


def pixels_in_view(scene: SynthScene, placement: ShapePlacement, view: Bbox) -> int:
    """Exact count of the placement's pixels inside a view bbox."""
    sx, sy, ex, ey = placement_bbox(scene, placement)
    vx0, vy0, vx1, vy1 = view
    ix0, iy0 = max(sx, vx0), max(sy, vy0)
    ix1, iy1 = min(ex, vx1), min(ey, vy1)
    if ix0 >= ix1 or iy0 >= iy1:
        return 0
    if (ix0, iy0, ix1, iy1) == (sx, sy, ex, ey):
        return shape_pixel_count(placement.shape, placement.size)
    mask = shape_mask(placement.shape, placement.size)
    return int(mask[iy0 - sy : iy1 - sy, ix0 - sx : ix1 - sx].sum())


def visible_after_resize(pixel_count: int, view_w: int, view_h: int, resolution: int, min_pixels: int) -> bool:
    """Does a region of `pixel_count` pixels survive squeezing the view to resolution^2?

    The post-resize count scales by (resolution/view_w) * (resolution/view_h);
    the comparison is done in exact integer arithmetic.
    """
    return pixel_count * resolution * resolution >= min_pixels * view_w * view_h


# --- generation ---------------------------------------------------------------


def _question_answer(template: str, target: ShapePlacement, n_placements: int) -> tuple[str, str]:
    if template == TEMPLATE_COLOR_OF_SHAPE:
        return f"What color is the {target.shape}?", target.color
    if template == TEMPLATE_SHAPE_OF_COLOR:
        return f"What shape is the {target.color} object?", target.shape
    if template == TEMPLATE_COUNT:
        return COUNT_QUESTION, str(n_placements)
    raise ValueError(f"unknown template {template!r}")


def _feasible_target_sizes(config: SynthConfig, shape: str, cell_dims: tuple[int, int], overview_solvable: bool) -> list[int]:
    cw, ch = cell_dims
    w, h = config.canvas
    res, minvis = config.oracle_resolution, config.min_visible_pixels
    sizes = []
    for size in range(config.size_range[0], config.size_range[1] + 1):
        if size > min(cw, ch) - 2:
            break
        count = shape_pixel_count(shape, size)
        if not visible_after_resize(count, cw, ch, res, minvis):
            continue  # a crop of the ground-truth cell must always stay readable
        if visible_after_resize(count, w, h, res, minvis) != overview_solvable:
            continue
        sizes.append(size)
    return sizes


def generate(config: SynthConfig) -> list[SynthInstance]:
    """Seeded, deterministic instance list; exactly floor(fraction*count) instances
    carry a target readable from the overview alone."""
    config.validate()
    n_cells = config.grid_n * config.grid_n
    n_solvable = math.floor(config.fraction_overview_solvable * config.count)
    order = derive_rng(config.seed, PURPOSE_SYNTH_SPLIT).permutation(config.count)
    solvable_ids = set(int(i) for i in order[:n_solvable])

    w, h = config.canvas
    regions = grid_regions(w, h, GridSpec(config.grid_n))
    instances = []
    for i in range(config.count):
        rng = derive_rng(config.seed, PURPOSE_SYNTH, i)
        template = config.templates[int(rng.integers(len(config.templates)))]
        shape = config.target_shapes[int(rng.integers(len(config.target_shapes)))]
        color = list(COLOR_TABLE)[int(rng.integers(len(COLOR_TABLE)))]
        cell = int(rng.integers(n_cells))
        cx0, cy0, cx1, cy1 = regions[cell].bbox
        solvable = i in solvable_ids
        sizes = _feasible_target_sizes(config, shape, (cx1 - cx0, cy1 - cy0), solvable)
        if not sizes:
            raise SynthGenerationError(
                f"no feasible target size for shape={shape} cell={cell} "
                f"overview_solvable={solvable} within size_range={config.size_range}"
            )
        size = sizes[int(rng.integers(len(sizes)))]
        target = ShapePlacement(cell=cell, shape=shape, color=color, size=size)

        d_lo, d_hi = config.distractor_count_range
        n_distract = int(rng.integers(d_lo, d_hi + 1))
        free_cells = [c for c in range(n_cells) if c != cell]
        d_cells = rng.choice(len(free_cells), size=n_distract, replace=False)
        distractors = []
        for dc in sorted(int(free_cells[j]) for j in d_cells):
            # distractors never match the question's descriptor, which keeps
            # the answer unique: shape questions exclude the target shape,
            # color questions exclude the target color
            if template == TEMPLATE_COLOR_OF_SHAPE:
                d_shapes = [s for s in SHAPES if s != shape]
                d_shape = d_shapes[int(rng.integers(len(d_shapes)))]
                d_color = list(COLOR_TABLE)[int(rng.integers(len(COLOR_TABLE)))]
            elif template == TEMPLATE_SHAPE_OF_COLOR:
                d_shape = SHAPES[int(rng.integers(len(SHAPES)))]
                d_colors = [c for c in COLOR_TABLE if c != color]
                d_color = d_colors[int(rng.integers(len(d_colors)))]
            else:
                d_shape = SHAPES[int(rng.integers(len(SHAPES)))]
                d_color = list(COLOR_TABLE)[int(rng.integers(len(COLOR_TABLE)))]
            dx0, dy0, dx1, dy1 = regions[dc].bbox
            max_size = min(dx1 - dx0, dy1 - dy0) - 2
            d_size_hi = min(config.size_range[1], max_size)
            d_size = int(rng.integers(config.size_range[0], d_size_hi + 1))
            distractors.append(ShapePlacement(cell=dc, shape=d_shape, color=d_color, size=d_size))

        scene = SynthScene(
            canvas=config.canvas,
            grid_n=config.grid_n,
            placements=(target, *distractors),
            target_index=0,
            background=config.background,
        )
        question, answer = _question_answer(template, target, len(scene.placements))
        instances.append(
            SynthInstance(
                instance_id=f"synth-{config.seed}-{i:05d}",
                scene=scene,
                question=question,
                answer=answer,
                gt_cell=cell,
            )
        )
    return instances


# --- dataset persistence -------------------------------------------------------


@dataclass(frozen=True)
class ManifestInstance:
    """One dataset row; also the ingestion format for real VQA datasets
    (gt_cell is then absent)."""

    instance_id: str
    image_path: str
    question: str
    answer: str
    grid_n: int
    gt_cell: Optional[int] = None
    options: Optional[tuple[str, ...]] = None

    @property
    def image(self) -> RasterImage:
        return load_png(self.image_path)


def scene_to_dict(instance_id: str, scene: SynthScene) -> dict:
    return {
        "instance_id": instance_id,
        "canvas": list(scene.canvas),
        "grid_n": scene.grid_n,
        "background": list(scene.background),
        "target_index": scene.target_index,
        "placements": [
            {"cell": p.cell, "shape": p.shape, "color": p.color, "size": p.size} for p in scene.placements
        ],
    }


def scene_from_dict(doc: dict) -> SynthScene:
    return SynthScene(
        canvas=tuple(doc["canvas"]),
        grid_n=doc["grid_n"],
        placements=tuple(ShapePlacement(**p) for p in doc["placements"]),
        target_index=doc.get("target_index"),
        background=tuple(doc["background"]),
    )


def write_dataset(instances: list[SynthInstance], out_dir: str) -> tuple[str, str]:
    """Write images/, manifest.jsonl, and scenes.jsonl; returns the two file paths."""
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    scenes_path = os.path.join(out_dir, "scenes.jsonl")
    with open(manifest_path, "w", encoding="utf-8") as mf, open(scenes_path, "w", encoding="utf-8") as sf:
        for inst in instances:
            image_path = os.path.join(images_dir, f"{inst.instance_id}.png")
            save_png(inst.image, image_path)
            row = {
                "instance_id": inst.instance_id,
                "image_path": os.path.relpath(image_path, out_dir),
                "question": inst.question,
                "answer": inst.answer,
                "gt_cell": inst.gt_cell,
                "grid_n": inst.scene.grid_n,
            }
            mf.write(json.dumps(row, ensure_ascii=False) + "\n")
            sf.write(json.dumps(scene_to_dict(inst.instance_id, inst.scene), ensure_ascii=False) + "\n")
    return manifest_path, scenes_path


def load_manifest(path: str) -> list[ManifestInstance]:
    root = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            for key in ("instance_id", "image_path", "question", "answer", "grid_n"):
                if key not in row:
                    raise ValueError(f"{path}:{line_no}: missing manifest key {key!r}")
            image_path = row["image_path"]
            if not os.path.isabs(image_path):
                image_path = os.path.join(root, image_path)
            out.append(
                ManifestInstance(
                    instance_id=row["instance_id"],
                    image_path=image_path,
                    question=row["question"],
                    answer=str(row["answer"]),
                    grid_n=int(row["grid_n"]),
                    gt_cell=row.get("gt_cell"),
                    options=tuple(row["options"]) if row.get("options") else None,
                )
            )
    return out


def load_scenes(path: str) -> dict[str, SynthScene]:
    scenes = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                doc = json.loads(line)
                scenes[doc["instance_id"]] = scene_from_dict(doc)
    return scenes


def default_scenes_path(manifest_path: str) -> str:
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), "scenes.jsonl")
