"""Procedural stand-ins for H&E patches and whole slides.

Patch classes differ only in nucleus morphology and arrangement (size, count,
elongation, clustering) with matched dark-area coverage, so raw-pixel
templates carry little class signal while texture statistics separate them.
Tissue type is drawn independently and sets the background stroma pattern.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TISSUES = ("neuropil", "stroma", "other")
NEUROPIL, STROMA, OTHER = range(3)

# background RGB per tissue type
_TISSUE_BG = {
    NEUROPIL: (228.0, 168.0, 214.0),
    STROMA: (242.0, 214.0, 184.0),
    OTHER: (202.0, 198.0, 236.0),
}
_NUCLEUS_RGB = np.array([82.0, 52.0, 128.0])


@dataclass
class ClassTexture:
    """Nucleus statistics for one patch class."""

    count: tuple[float, float]
    radius: tuple[float, float]
    elongation: tuple[float, float] = (1.0, 1.0)
    clusters: int = 0
    cluster_radius: float = 7.0


DEFAULT_CLASSES = (
    ClassTexture(count=(6, 10), radius=(4.0, 5.5)),
    ClassTexture(count=(34, 52), radius=(1.7, 2.4)),
    ClassTexture(count=(12, 18), radius=(1.5, 2.0), elongation=(3.0, 4.5)),
    ClassTexture(count=(18, 26), radius=(2.4, 3.2), clusters=4),
)


@dataclass
class SyntheticCorpusSpec:
    num_classes: int = 4
    images_per_class: int = 500
    image_size: int = 64
    classes: tuple[ClassTexture, ...] = DEFAULT_CLASSES
    noise: float = 10.0
    stain_jitter: float = 0.05
    test_fraction: float = 0.2
    tissue_probs: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)

    def __post_init__(self):
        if self.num_classes > len(self.classes):
            raise ValueError(f"only {len(self.classes)} class textures defined")


@dataclass
class Corpus:
    x_train: np.ndarray
    y_train: np.ndarray
    t_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    t_test: np.ndarray
    num_classes: int

    def save(self, path) -> None:
        np.savez_compressed(path, **{k: v for k, v in vars(self).items()})

    @classmethod
    def load(cls, path) -> "Corpus":
        with np.load(path) as z:
            d = {k: z[k] for k in z.files}
        d["num_classes"] = int(d["num_classes"])
        return cls(**d)


def to_model_input(images_u8: np.ndarray) -> np.ndarray:
    """uint8 ``[..., H, W, 3]`` -> float ``[..., 3, H, W]`` scaled to roughly unit range."""
    x = images_u8.astype(np.float64) / 255.0
    x = (x - 0.7) / 0.2
    return np.moveaxis(x, -1, -3)


def _background(rng, size: int, tissue: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    bg = np.broadcast_to(np.array(_TISSUE_BG[tissue]), (size, size, 3)).copy()
    if tissue == NEUROPIL:
        # fine fibrillary mesh
        a, b = rng.uniform(0, 2 * np.pi, 2)
        fib = np.sin(0.9 * (xx * np.cos(a) + yy * np.sin(a))) * np.sin(1.1 * (xx * np.cos(b) + yy * np.sin(b)))
        bg += 14.0 * fib[..., None] * np.array([1.0, 0.6, 0.8])
    elif tissue == STROMA:
        # wavy parallel collagen bands
        a = rng.uniform(0, np.pi)
        u = xx * np.cos(a) + yy * np.sin(a)
        v = -xx * np.sin(a) + yy * np.cos(a)
        band = np.sin(0.45 * u + 1.5 * np.sin(0.15 * v + rng.uniform(0, 6.3)))
        bg += 16.0 * band[..., None] * np.array([0.9, 1.0, 0.7])
    return bg


def _nucleus_centres(rng, tex: ClassTexture, n: int, size: int) -> np.ndarray:
    if not tex.clusters:
        return rng.uniform(0, size, (n, 2))
    k = max(1, int(round(rng.uniform(0.6, 1.4) * tex.clusters)))
    centres = rng.uniform(6, size - 6, (k, 2))
    owner = rng.integers(0, k, n)
    ang = rng.uniform(0, 2 * np.pi, n)
    rad = tex.cluster_radius * rng.uniform(0.6, 1.1, n)
    return centres[owner] + np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)


def render_patch(rng: np.random.Generator, tex: ClassTexture, tissue: int, size: int = 64,
                 noise: float = 10.0, stain_jitter: float = 0.05) -> np.ndarray:
    """One ``size x size x 3`` uint8 patch."""
    img = _background(rng, size, tissue)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    n = int(rng.integers(int(tex.count[0]), int(tex.count[1]) + 1))
    centres = _nucleus_centres(rng, tex, n, size)
    r = rng.uniform(*tex.radius, n)
    e = rng.uniform(*tex.elongation, n)
    theta = rng.uniform(0, np.pi, n)
    cover = np.zeros((size, size))
    for (cy, cx), ri, ei, th in zip(centres, r, e, theta):
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        d = (u / (ri * np.sqrt(ei))) ** 2 + (v * np.sqrt(ei) / ri) ** 2
        cover = np.maximum(cover, np.clip(1.5 - d, 0.0, 1.0))
    nuc = _NUCLEUS_RGB * rng.uniform(0.85, 1.15)
    img = img * (1 - cover[..., None]) + nuc * cover[..., None]
    img *= 1.0 + rng.normal(0, stain_jitter, 3)
    img += rng.normal(0, noise, img.shape)
    return np.clip(np.rint(img), 0, 244).astype(np.uint8)


def gen_patch_corpus(spec: SyntheticCorpusSpec | None = None, seed: int = 0) -> Corpus:
    """Class-balanced corpus with a fixed train/test split per class."""
    spec = spec or SyntheticCorpusSpec()
    rng = np.random.default_rng(seed)
    xs, ys, ts, split = [], [], [], []
    n_test = int(round(spec.images_per_class * spec.test_fraction))
    for c in range(spec.num_classes):
        for i in range(spec.images_per_class):
            tissue = int(rng.choice(3, p=spec.tissue_probs))
            xs.append(render_patch(rng, spec.classes[c], tissue, spec.image_size, spec.noise, spec.stain_jitter))
            ys.append(c)
            ts.append(tissue)
            split.append(i < spec.images_per_class - n_test)
    x, y, t, split = np.stack(xs), np.array(ys), np.array(ts), np.array(split)
    order_tr = rng.permutation(np.flatnonzero(split))
    order_te = np.flatnonzero(~split)
    return Corpus(x[order_tr], y[order_tr], t[order_tr], x[order_te], y[order_te], t[order_te], spec.num_classes)


# ---------------------------------------------------------------------------
# slides
# ---------------------------------------------------------------------------

BLANK, BLOOD = "blank", "blood"


@dataclass
class SlideTruth:
    """Ground truth for a synthetic slide laid out on the tile grid."""

    label: int
    tile: int
    kinds: list = field(default_factory=list)  # per grid cell: "blank", "blood" or (class, tissue)
    grid_shape: tuple[int, int] = (0, 0)

    def tissue_mask(self) -> np.ndarray:
        """Per-cell tissue id; -1 for blank or blood cells."""
        out = np.full(len(self.kinds), -1)
        for i, k in enumerate(self.kinds):
            if isinstance(k, tuple):
                out[i] = k[1]
        return out.reshape(self.grid_shape)

    def class_mask(self) -> np.ndarray:
        out = np.full(len(self.kinds), -1)
        for i, k in enumerate(self.kinds):
            if isinstance(k, tuple):
                out[i] = k[0]
        return out.reshape(self.grid_shape)


def _apportion(composition: dict, n: int) -> list:
    total = sum(composition.values())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"composition fractions must sum to 1, got {total}")
    keys = list(composition)
    raw = np.array([composition[k] * n for k in keys])
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    out = []
    for k, c in zip(keys, counts):
        out.extend([k] * int(c))
    return out


def render_blank(rng, size: int) -> np.ndarray:
    return np.clip(rng.normal(251, 2.0, (size, size, 3)), 246, 255).astype(np.uint8)


def render_blood(rng, size: int) -> np.ndarray:
    base = np.array([205.0, 40.0, 52.0])
    img = base + rng.normal(0, 8.0, (size, size, 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def gen_synthetic_slide(
    composition: dict,
    label: int,
    grid: tuple[int, int] = (4, 4),
    seed: int = 0,
    spec: SyntheticCorpusSpec | None = None,
    tile: int = 512,
    shuffle: bool = True,
    margin: tuple[int, int] = (0, 0),
):
    """Assemble a slide on a ``grid`` of ``tile``-sized cells.

    ``composition`` maps ``"blank"``, ``"blood"`` or ``(class, tissue)`` to a
    fraction of the cells. Tissue cells are rendered at the corpus patch size
    and nearest-upsampled, so block-averaging a tile recovers the patch.
    ``margin`` appends that many extra pixels (bottom, right) of background
    that no full tile covers.
    """
    spec = spec or SyntheticCorpusSpec()
    rng = np.random.default_rng(seed)
    rows, cols = grid
    kinds = _apportion(composition, rows * cols)
    if shuffle:
        kinds = [kinds[i] for i in rng.permutation(len(kinds))]
    up = tile // spec.image_size
    if up * spec.image_size != tile:
        raise ValueError(f"tile {tile} is not a multiple of the patch size {spec.image_size}")
    H, W = rows * tile + margin[0], cols * tile + margin[1]
    pixels = np.full((H, W, 3), 250, dtype=np.uint8)
    for idx, kind in enumerate(kinds):
        r, c = divmod(idx, cols)
        if kind == BLANK:
            patch = render_blank(rng, spec.image_size)
        elif kind == BLOOD:
            patch = render_blood(rng, spec.image_size)
        else:
            cls, tissue = kind
            patch = render_patch(rng, spec.classes[cls], tissue, spec.image_size, spec.noise, spec.stain_jitter)
        pixels[r * tile : (r + 1) * tile, c * tile : (c + 1) * tile] = np.repeat(np.repeat(patch, up, 0), up, 1)
    return pixels, SlideTruth(label=label, tile=tile, kinds=kinds, grid_shape=grid)


def downsample_tile(tile_u8: np.ndarray, size: int = 64) -> np.ndarray:
    """Block-average a square tile to ``size x size`` (uint8)."""
    f = tile_u8.shape[0] // size
    blocks = tile_u8.reshape(size, f, size, f, 3).astype(np.float64).mean(axis=(1, 3))
    return np.rint(blocks).astype(np.uint8)
