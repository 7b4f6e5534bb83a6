"""Glue between kept slide tiles, the patch classifier, the tissue SVM and slide voting."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensor as T
from .data import downsample_tile, to_model_input
from .model import CMSwinKAN
from .voting import LinearSvm, PatchRecord, svm_predict_probs
from .wsi import read_manifest

TILE_NAME = re.compile(r"^(?P<sid>.+)_(?P<x>\d+)_(?P<y>\d+)\.png$")


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def score_images(model: CMSwinKAN, images_u8: np.ndarray, batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode ``(features [N, F], class probabilities [N, C])`` for model-sized uint8 images."""
    was = model.training
    model.eval()
    feats, probs = [], []
    try:
        with T.no_grad():
            for s in range(0, len(images_u8), batch_size):
                f = model.features(T.Tensor(to_model_input(images_u8[s : s + batch_size])))
                feats.append(f.data)
                probs.append(_softmax(model.head(f).data))
    finally:
        model.train(was)
    return np.concatenate(feats), np.concatenate(probs)


def to_model_size(tiles_u8: np.ndarray, size: int) -> np.ndarray:
    if tiles_u8.shape[1] == size:
        return tiles_u8
    return np.stack([downsample_tile(t, size) for t in tiles_u8])


def patch_records(model: CMSwinKAN, svm: LinearSvm, slide_ids, xs, ys, tiles_u8: np.ndarray) -> list[PatchRecord]:
    imgs = to_model_size(tiles_u8, model.cfg.backbone.img_size)
    feats, probs = score_images(model, imgs)
    tissue = svm_predict_probs(svm, feats)
    return [PatchRecord(s, int(x), int(y), p, t) for s, x, y, p, t in zip(slide_ids, xs, ys, probs, tissue)]


def find_tiles(source) -> list[tuple[str, int, int, Path]]:
    """Kept tiles from a tile directory or a manifest, as ``(slide_id, x, y, png path)``."""
    source = Path(source)
    if source.is_dir():
        out = []
        for p in sorted(source.glob("*.png")):
            m = TILE_NAME.match(p.name)
            if m:
                out.append((m["sid"], int(m["x"]), int(m["y"]), p))
        return out
    if not source.is_file():
        raise FileNotFoundError(f"tile source not found: {source}")
    rows = read_manifest(source)
    return [(r.slide_id, r.x, r.y, source.parent / f"{r.name}.png") for r in rows if r.kept]


def load_tiles(entries) -> np.ndarray:
    arrs = []
    for *_, path in entries:
        with Image.open(path) as im:
            arrs.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
    return np.stack(arrs)
