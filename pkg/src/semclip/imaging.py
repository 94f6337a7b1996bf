"""RGB raster images, deterministic grid partitioning, cropping, and bilinear resizing."""
from __future__ import annotations

import enum
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from PIL import Image

Bbox = tuple[int, int, int, int]  # (x0, y0, x1, y1), half-open


@dataclass(frozen=True)
class RasterImage:
    """8-bit RGB image; pixels are a row-major (height, width, channel) byte buffer."""

    width: int
    height: int
    channels: int
    pixels: bytes

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image dimensions must be >= 1, got {self.width}x{self.height}")
        if self.channels != 3:
            raise ValueError(f"only 3-channel RGB supported, got {self.channels}")
        expect = self.width * self.height * self.channels
        if len(self.pixels) != expect:
            raise ValueError(f"pixel buffer has {len(self.pixels)} bytes, expected {expect}")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "RasterImage":
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected (h, w, 3) array, got shape {arr.shape}")
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        return cls(width=arr.shape[1], height=arr.shape[0], channels=3, pixels=arr.tobytes())

    def to_array(self) -> np.ndarray:
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(self.height, self.width, 3)

    @property
    def bbox(self) -> Bbox:
        return (0, 0, self.width, self.height)


class RemainderPolicy(enum.Enum):
    ABSORB_LAST = "absorb_last"


@dataclass(frozen=True)
class GridSpec:
    n: int
    remainder_policy: RemainderPolicy = RemainderPolicy.ABSORB_LAST

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"grid side must be >= 1, got {self.n}")


@dataclass(frozen=True)
class CropRegion:
    row: int
    col: int
    linear_index: int
    bbox: Bbox

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (0 <= x0 < x1 and 0 <= y0 < y1):
            raise ValueError(f"degenerate bbox {self.bbox}")


@dataclass(frozen=True)
class SubImage:
    region: CropRegion
    image: RasterImage

    def __post_init__(self):
        x0, y0, x1, y1 = self.region.bbox
        if (x1 - x0, y1 - y0) != (self.image.width, self.image.height):
            raise ValueError("sub-image dimensions do not match its bounding box")


def _axis_edges(extent: int, n: int) -> list[int]:
    # n equal cells of floor(extent/n); the last one absorbs extent mod n
    base = extent // n
    edges = [i * base for i in range(n)]
    edges.append(extent)
    return edges


def grid_regions(width: int, height: int, grid: GridSpec) -> list[CropRegion]:
    """Raster-order (row-major) grid cells over a width x height canvas."""
    n = grid.n
    if n > min(width, height):
        raise ValueError(f"grid side {n} exceeds min image dimension {min(width, height)}")
    xs = _axis_edges(width, n)
    ys = _axis_edges(height, n)
    regions = []
    for r in range(n):
        for c in range(n):
            regions.append(
                CropRegion(row=r, col=c, linear_index=r * n + c, bbox=(xs[c], ys[r], xs[c + 1], ys[r + 1]))
            )
    return regions


def crop(image: RasterImage, bbox: Bbox) -> RasterImage:
    """Bit-exact copy of the half-open bbox region."""
    x0, y0, x1, y1 = bbox
    if not (0 <= x0 < x1 <= image.width and 0 <= y0 < y1 <= image.height):
        raise ValueError(f"bbox {bbox} out of bounds for {image.width}x{image.height} image")
    return RasterImage.from_array(image.to_array()[y0:y1, x0:x1])


def partition(image: RasterImage, grid: GridSpec) -> list[SubImage]:
    """Split an image into n*n disjoint crops that exactly cover it, in raster order."""
    return [SubImage(region=reg, image=crop(image, reg.bbox)) for reg in grid_regions(image.width, image.height, grid)]


def stitch(subimages: Sequence[SubImage], width: int, height: int) -> RasterImage:
    """Reassemble crops into a full image (inverse of partition)."""
    out = np.zeros((height, width, 3), dtype=np.uint8)
    for sub in subimages:
        x0, y0, x1, y1 = sub.region.bbox
        out[y0:y1, x0:x1] = sub.image.to_array()
    return RasterImage.from_array(out)


def _sample_coords(src: int, dst: int) -> np.ndarray:
    # half-pixel-center sampling; integer numerator keeps exact ties exact
    j = np.arange(dst, dtype=np.int64)
    return ((2 * j + 1) * src - dst) / (2.0 * dst)


def resize(image: RasterImage, target_w: int, target_h: int) -> RasterImage:
    """Bilinear resize with half-pixel centers; ties round half away from zero."""
    if target_w < 1 or target_h < 1:
        raise ValueError(f"target dimensions must be >= 1, got {target_w}x{target_h}")
    src = image.to_array().astype(np.float64)
    xs = _sample_coords(image.width, target_w)
    ys = _sample_coords(image.height, target_h)

    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    x0c = np.clip(x0, 0, image.width - 1)
    x1c = np.clip(x0 + 1, 0, image.width - 1)
    y0c = np.clip(y0, 0, image.height - 1)
    y1c = np.clip(y0 + 1, 0, image.height - 1)

    fx = fx[None, :, None]
    fy = fy[:, None, None]
    top = src[y0c][:, x0c] * (1 - fx) + src[y0c][:, x1c] * fx
    bot = src[y1c][:, x0c] * (1 - fx) + src[y1c][:, x1c] * fx
    out = top * (1 - fy) + bot * fy
    out = np.floor(out + 0.5)  # values are non-negative, so this is round-half-away
    return RasterImage.from_array(np.clip(out, 0, 255).astype(np.uint8))


# --- PNG I/O -----------------------------------------------------------------


def encode_png(image: RasterImage) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image.to_array(), mode="RGB").save(buf, format="PNG", compress_level=1)
    return buf.getvalue()


def decode_png(data: bytes) -> RasterImage:
    with Image.open(io.BytesIO(data)) as im:
        return RasterImage.from_array(np.asarray(im.convert("RGB"), dtype=np.uint8))


def save_png(image: RasterImage, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_png(image))


def load_png(path: str) -> RasterImage:
    with open(path, "rb") as fh:
        return decode_png(fh.read())


def crop_filename(instance_id: str, region: CropRegion) -> str:
    return f"{instance_id}_r{region.row}c{region.col}.png"
