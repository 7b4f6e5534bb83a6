"""Full classifier, variant presets and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    magic      4 bytes  b"CMSK"
    version    uint16   FORMAT_VERSION
    cfg_len    uint32   length of the JSON config echo
    cfg        cfg_len bytes, UTF-8 JSON
    n_entries  uint32
    entries    n_entries times:
        name_len uint16, name (UTF-8)
        dtype    uint8   (1 = float32, 2 = float64)
        rank     uint8
        dims     rank x uint32
        payload  prod(dims) little-endian floats
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .cmsa import Cmsa, CmsaConfig
from .kan import KanStack
from .nn import LayerNorm, Module
from .swin import Backbone, BackboneConfig, StageFeatures
from .tensor import Tensor

MAGIC = b"CMSK"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


@dataclass
class ModelConfig:
    variant: str = "micro"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    cmsa: CmsaConfig = field(default_factory=CmsaConfig)
    num_classes: int = 5
    head_hidden: int = 64
    use_cmsa: bool = True
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig(**d["backbone"])
        cm = dict(d["cmsa"])
        cm["scale_init"] = tuple(cm["scale_init"])
        d["cmsa"] = CmsaConfig(**cm)
        return cls(**d)


PRESETS = {
    "mini": dict(embed_dim=24, num_heads=(2, 4, 8, 16)),
    "micro": dict(embed_dim=24, num_heads=(4, 8, 16, 32)),
    "tiny": dict(embed_dim=56, num_heads=(4, 8, 16, 32)),
    # desk-scale configuration used for training runs and gradient checks
    "toy": dict(embed_dim=8, num_heads=(1, 2, 4, 8), depths=(1, 1, 1, 1), img_size=64, window_size=4),
}


def make_config(variant: str = "micro", num_classes: int = 5, **overrides) -> ModelConfig:
    """Preset config; backbone fields and ``K`` may be overridden by keyword."""
    if variant not in PRESETS and variant != "custom":
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(PRESETS)} or 'custom'")
    bb = dict(PRESETS.get(variant, {}))
    top = {}
    cm = {}
    for key, value in overrides.items():
        if key in {f.name for f in dataclasses.fields(BackboneConfig)}:
            bb[key] = value
        elif key in {f.name for f in dataclasses.fields(CmsaConfig)}:
            cm[key] = value
        else:
            top[key] = value
    return ModelConfig(variant=variant, backbone=BackboneConfig(**bb), cmsa=CmsaConfig(**cm), num_classes=num_classes, **top)


class CMSwinKAN(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        C = cfg.backbone.embed_dim
        self.backbone = Backbone(cfg.backbone, rng)
        self.cmsa = Cmsa(C, cfg.cmsa, rng) if cfg.use_cmsa else None
        # matches the LayerNorm that closes the backbone on the stage-4 path
        self.fusion_norm = LayerNorm(2 * C) if cfg.use_cmsa else None
        feat = (2 * C if cfg.use_cmsa else 0) + 8 * C
        self.head = KanStack([feat, cfg.head_hidden, cfg.num_classes], rng, cfg.backbone.grid())

    @property
    def feature_dim(self) -> int:
        return self.head.layers[0].in_dim

    def stage_features(self, images: Tensor) -> StageFeatures:
        return self.backbone(_batch(images))

    def features_from_stages(self, sf: StageFeatures) -> Tensor:
        pooled = T.global_avg_pool(sf.f4)
        if self.cmsa is None:
            return pooled
        fused = self.fusion_norm(T.transpose(self.cmsa(sf), (0, 2, 3, 1)))
        return T.concat([T.mean(fused, axis=(1, 2)), pooled], axis=1)

    def features(self, images: Tensor) -> Tensor:
        """Pooled pre-head vector ``[B, 2C + 8C]`` (``[B, 8C]`` without fusion)."""
        return self.features_from_stages(self.stage_features(images))

    def forward(self, images: Tensor) -> Tensor:
        single = images.ndim == 3
        logits = self.head(self.features(images))
        return T.reshape(logits, (logits.shape[-1],)) if single else logits


def _batch(images) -> Tensor:
    images = T.as_tensor(images)
    return T.reshape(images, (1,) + images.shape) if images.ndim == 3 else images


def build_model(variant: str = "micro", num_classes: int = 5, **overrides) -> CMSwinKAN:
    return CMSwinKAN(make_config(variant, num_classes, **overrides))


def model_forward(image, model: CMSwinKAN) -> Tensor:
    return model(T.as_tensor(image))


def extract_features(image, model: CMSwinKAN) -> np.ndarray:
    """Eval-mode pooled feature vector(s) without recording a graph."""
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            out = model.features(_batch(image)).data
    finally:
        model.train(was_training)
    return out[0] if np.ndim(image) == 3 else out


def count_macs(model: CMSwinKAN) -> int:
    """Multiply-accumulates of one forward pass at the configured resolution.

    Counts matmul/conv/einsum work only; spline evaluation is charged one MAC
    per basis value.
    """
    cfg = model.cfg.backbone
    H = cfg.img_size
    C = cfg.embed_dim
    nb = cfg.grid().num_basis
    tokens = (H // cfg.patch_size) ** 2
    macs = tokens * 3 * cfg.patch_size**2 * C
    for i, stage in enumerate(model.backbone.stages):
        dim = C * 2**i
        n_tok = cfg.stage_resolution(i) ** 2
        for blk in stage:
            w2 = blk.window**2
            macs += n_tok * (4 * dim * dim + 2 * w2 * dim)
            macs += n_tok * sum(l.in_dim * l.out_dim * (nb + 2) for l in blk.kan.layers)
        if i < 3:
            macs += (n_tok // 4) * 4 * dim * 2 * dim
    if model.cmsa is not None:
        hw = (H // 8) ** 2
        w = 2 * C
        K2 = model.cfg.cmsa.K ** 2
        macs += hw * (4 * C * w + 8 * C * w)
        macs += hw * (2 * w * K2 * K2 + 2 * 9 * w * w + w * w + 2 * K2 * K2 * w)
    macs += sum(l.in_dim * l.out_dim * (nb + 2) for l in model.head.layers)
    return int(macs)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


class CheckpointError(Exception):
    pass


class NotACheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def state_dict(model: Module) -> dict[str, np.ndarray]:
    state = {name: p.data for name, p in model.named_parameters()}
    state.update(dict(model.named_buffers()))
    return state


def load_state_dict(model: Module, state: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    missing = (set(params) | set(buffers)) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint lacks entries: {sorted(missing)[:5]}")
    for name, p in params.items():
        if state[name].shape != p.shape:
            raise CheckpointError(f"{name}: stored shape {state[name].shape} != model shape {p.shape}")
        p.data = np.array(state[name], dtype=np.float64)
    for name, buf in buffers.items():
        buf[...] = state[name]


def save_checkpoint(model: CMSwinKAN, path, dtype_code: int = 1) -> None:
    dt = _DTYPES[dtype_code]
    cfg = json.dumps(model.cfg.to_dict(), sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(cfg)), cfg]
    state = state_dict(model)
    chunks.append(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", dtype_code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into ``(config_dict, state)`` without building a model."""
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise NotACheckpointError(f"{path}: not a checkpoint (bad magic)")
    r.take(4)
    version, cfg_len = r.unpack("<HI")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint format version {version}, expected {FORMAT_VERSION}")
    cfg = json.loads(r.take(cfg_len).decode())
    (n,) = r.unpack("<I")
    state = {}
    for _ in range(n):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        code, rank = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: entry {name!r} has unknown dtype code {code}")
        dims = r.unpack(f"<{rank}I")
        dt = _DTYPES[code]
        count = int(np.prod(dims)) if rank else 1
        state[name] = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(dims)
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")
    return cfg, state


def load_checkpoint(path) -> CMSwinKAN:
    cfg, state = read_checkpoint(path)
    model = CMSwinKAN(ModelConfig.from_dict(cfg))
    load_state_dict(model, state)
    return model.eval()
