"""Sliding-window tiling of slide rasters and the blank / blood-region tile filter."""

from __future__ import annotations

import concurrent.futures as cf
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from .tensor import DimensionError

REASONS = ("none", "white", "red")
MANIFEST_HEADER = "slide_id\tx\ty\tkept\treason"


@dataclass
class SlideImage:
    slide_id: str
    pixels: np.ndarray  # [H, W, 3] uint8

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or min(self.pixels.shape[:2]) < 1:
            raise DimensionError(f"slide {self.slide_id!r}: expected HxWx3 pixels, got {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise TypeError(f"slide {self.slide_id!r}: expected uint8 pixels, got {self.pixels.dtype}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class TileRecord:
    slide_id: str
    x: int
    y: int
    pixels: np.ndarray | None = None
    kept: bool = True
    reason: str = "none"

    @property
    def name(self) -> str:
        return f"{self.slide_id}_{self.x}_{self.y}"

    def manifest_line(self) -> str:
        return f"{self.slide_id}\t{self.x}\t{self.y}\t{int(self.kept)}\t{self.reason}"


@dataclass(frozen=True)
class FilterParams:
    white_thresh: int = 245
    white_frac: float = 0.5
    red_frac: float = 0.5
    red_min: int = 170
    red_margin: int = 60


def tile_positions(height: int, width: int, window: int = 512, stride: int = 512) -> list[tuple[int, int]]:
    """Top-left ``(x, y)`` of every full window, row-major; partial windows are dropped."""
    if window <= 0 or stride <= 0:
        raise ValueError(f"window and stride must be positive, got {window}, {stride}")
    ys = range(0, height - window + 1, stride) if height >= window else range(0)
    xs = range(0, width - window + 1, stride) if width >= window else range(0)
    return [(x, y) for y in ys for x in xs]


def tile_count(height: int, width: int, window: int = 512, stride: int = 512) -> int:
    rows = max(0, (height - window) // stride + 1) if height >= window else 0
    cols = max(0, (width - window) // stride + 1) if width >= window else 0
    return rows * cols


def tile_slide(slide: SlideImage, window: int = 512, stride: int = 512) -> list[TileRecord]:
    return [
        TileRecord(slide.slide_id, x, y, slide.pixels[y : y + window, x : x + window])
        for x, y in tile_positions(slide.height, slide.width, window, stride)
    ]


def white_mask(tile: np.ndarray, params: FilterParams = FilterParams()) -> np.ndarray:
    return tile.min(axis=2) >= params.white_thresh


def red_mask(tile: np.ndarray, params: FilterParams = FilterParams()) -> np.ndarray:
    t = tile.astype(np.int16)
    r, g, b = t[..., 0], t[..., 1], t[..., 2]
    return (r >= params.red_min) & (r - g >= params.red_margin) & (r - b >= params.red_margin)


def filter_tile(tile: np.ndarray, params: FilterParams = FilterParams(), size: int | None = 512) -> tuple[bool, str]:
    """``(kept, reason)``; blank background is tested before blood."""
    if tile.ndim != 3 or tile.shape[2] != 3 or (size is not None and tile.shape[:2] != (size, size)):
        want = f"{size}x{size}x3" if size is not None else "HxWx3"
        raise DimensionError(f"tile must be {want}, got {tile.shape}")
    if white_mask(tile, params).mean() > params.white_frac:
        return False, "white"
    if red_mask(tile, params).mean() > params.red_frac:
        return False, "red"
    return True, "none"


def load_slide(path, slide_id: str | None = None) -> SlideImage:
    """Read an 8-bit RGB raster. Other formats plug in via :data:`SLIDE_READERS`."""
    path = Path(path)
    reader = SLIDE_READERS.get(path.suffix.lower(), _read_raster)
    if not path.is_file():
        raise FileNotFoundError(f"slide not found: {path}")
    try:
        pixels = reader(path)
    except OSError as e:
        raise OSError(f"cannot read slide {path}: {e}") from e
    return SlideImage(slide_id or path.stem, pixels)


def _read_raster(path: Path) -> np.ndarray:
    Image.MAX_IMAGE_PIXELS = None
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


SLIDE_READERS: dict[str, Callable[[Path], np.ndarray]] = {}


def _process(tile: TileRecord, out_dir: Path, params: FilterParams, window: int) -> TileRecord:
    kept, reason = filter_tile(tile.pixels, params, window)
    if kept:
        Image.fromarray(np.ascontiguousarray(tile.pixels)).save(out_dir / f"{tile.name}.png", compress_level=1)
    return TileRecord(tile.slide_id, tile.x, tile.y, None, kept, reason)


def run_pipeline(
    slide: SlideImage,
    output_dir,
    window: int = 512,
    stride: int = 512,
    params: FilterParams = FilterParams(),
    workers: int = 1,
) -> list[TileRecord]:
    """Tile, filter, write kept tiles as PNG and a manifest; returns manifest rows sorted by (y, x)."""
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e
    tiles = tile_slide(slide, window, stride)
    if workers > 1:
        with cf.ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(lambda t: _process(t, out, params, window), tiles))
    else:
        rows = [_process(t, out, params, window) for t in tiles]
    rows.sort(key=lambda r: (r.y, r.x))
    write_manifest(out / f"{slide.slide_id}_manifest.tsv", rows)
    return rows


def write_manifest(path, rows: list[TileRecord]) -> None:
    text = "\n".join([MANIFEST_HEADER] + [r.manifest_line() for r in rows]) + "\n"
    try:
        Path(path).write_text(text)
    except OSError as e:
        raise OSError(f"cannot write manifest {path}: {e}") from e


def read_manifest(path) -> list[TileRecord]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ValueError(f"{path}: not a tile manifest")
    rows = []
    for line in lines[1:]:
        sid, x, y, kept, reason = line.split("\t")
        rows.append(TileRecord(sid, int(x), int(y), None, kept == "1", reason))
    return rows
