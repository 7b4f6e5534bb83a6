"""Tissue-component SVM, heuristic patch weights, and hard / soft slide voting.

Soft voting normalizes the weighted class sums by the total patch weight, so
the slide score is a proper distribution. Any positive rescaling of the weights
(including the alternative normalizer that sums weights over classes as well)
leaves the argmax unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import NEUROPIL, OTHER, STROMA
from .tensor import DimensionError

NUM_TISSUES = 3
PROB_TOL = 1e-6


class VoteError(ValueError):
    pass


class SvmTrainingError(ValueError):
    pass


def _check_probs(p: np.ndarray, what: str) -> None:
    if p.ndim != 1 or p.size == 0:
        raise DimensionError(f"{what} must be a non-empty vector, got shape {p.shape}")
    if np.any(p < 0) or abs(p.sum() - 1.0) > PROB_TOL:
        raise ValueError(f"{what} is not a probability vector: {p}")


@dataclass
class PatchRecord:
    slide_id: str
    x: int
    y: int
    class_probs: np.ndarray
    tissue_probs: np.ndarray

    def __post_init__(self):
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)
        self.tissue_probs = np.asarray(self.tissue_probs, dtype=np.float64)
        _check_probs(self.class_probs, "class_probs")
        _check_probs(self.tissue_probs, "tissue_probs")
        if self.tissue_probs.size != NUM_TISSUES:
            raise DimensionError(f"tissue_probs needs {NUM_TISSUES} entries, got {self.tissue_probs.size}")


@dataclass(frozen=True)
class VoteParams:
    alpha: float = 1.0
    beta: float = 8.0
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0 or self.alpha + self.beta + self.gamma <= 0:
            raise ValueError(f"vote weights must be nonnegative with a positive sum: {self}")


@dataclass
class SlideVerdict:
    slide_id: str
    probs: np.ndarray
    label: int
    weights: list[float]
    method: str = "soft"
    tie: bool = False
    uniform_fallback: bool = False

    def weight_histogram(self, bins: int = 8) -> tuple[np.ndarray, np.ndarray]:
        w = np.asarray(self.weights)
        hi = max(float(w.max()), 1e-12)
        return np.histogram(w, bins=bins, range=(0.0, hi))

    def to_text(self) -> str:
        flags = [f for f, on in (("tie", self.tie), ("uniform-fallback", self.uniform_fallback)) if on]
        counts, edges = self.weight_histogram()
        hist = " ".join(f"[{edges[i]:.3g},{edges[i + 1]:.3g}):{c}" for i, c in enumerate(counts))
        return (
            f"slide {self.slide_id} method={self.method} label={self.label} "
            f"probs={','.join(f'{p:.6f}' for p in self.probs)} patches={len(self.weights)}"
            + (f" flags={','.join(flags)}" if flags else "")
            + f"\n  weight histogram {hist}"
        )


# ---------------------------------------------------------------------------
# tissue SVM
# ---------------------------------------------------------------------------


@dataclass
class LinearSvm:
    """One-vs-rest linear SVM on standardized features."""

    weights: np.ndarray  # [classes, D]
    bias: np.ndarray  # [classes]
    lam: float
    mean: np.ndarray
    scale: np.ndarray
    train_accuracy: float = float("nan")
    history: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def margins(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DimensionError(f"feature length {x.shape[-1]} does not match SVM input dimension {self.dim}")
        return ((x - self.mean) / self.scale) @ self.weights.T + self.bias

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, weights=self.weights, bias=self.bias, lam=self.lam, mean=self.mean, scale=self.scale,
                     train_accuracy=self.train_accuracy)

    @classmethod
    def load(cls, path) -> "LinearSvm":
        with np.load(path) as z:
            return cls(z["weights"], z["bias"], float(z["lam"]), z["mean"], z["scale"], float(z["train_accuracy"]))


def svm_train(features, labels, lam: float = 1e-3, epochs: int = 30, seed: int = 0, batch_size: int = 32,
              num_classes: int = NUM_TISSUES) -> LinearSvm:
    """Pegasos-style minibatch subgradient descent on the L2-regularized hinge loss.

    The bias rides along as a constant input feature, so it is regularized and
    projected together with the weights. The returned model averages the
    iterates of the second half of training, which damps the last-iterate noise.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise DimensionError(f"features must be [N, D] matching {len(y)} labels, got {X.shape}")
    if lam <= 0:
        raise ValueError("lam must be positive")
    if np.unique(y).size < 2:
        raise SvmTrainingError(f"need at least two tissue classes to train, got {np.unique(y).tolist()}")
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Z = np.hstack([(X - mean) / scale, np.ones((len(X), 1))])
    Y = np.where(y[:, None] == np.arange(num_classes), 1.0, -1.0)  # [N, classes]
    W = np.zeros((num_classes, Z.shape[1]))
    radius = 1.0 / np.sqrt(lam)
    rng = np.random.default_rng(seed)
    hist = []
    t = 0
    total = epochs * -(-len(Z) // batch_size)
    W_avg, n_avg = np.zeros_like(W), 0
    for _ in range(epochs):
        order = rng.permutation(len(Z))
        for s in range(0, len(Z), batch_size):
            idx = order[s : s + batch_size]
            t += 1
            eta = 1.0 / (lam * t)
            zb, yb = Z[idx], Y[idx]
            active = (yb * (zb @ W.T) < 1.0) * yb  # [B, classes]
            W = (1.0 - eta * lam) * W + (eta / len(idx)) * active.T @ zb
            norms = np.linalg.norm(W, axis=1, keepdims=True)
            W *= np.minimum(1.0, radius / np.maximum(norms, 1e-300))
            if 2 * t > total:
                n_avg += 1
                W_avg += (W - W_avg) / n_avg
        hist.append(float(np.mean(np.maximum(0.0, 1.0 - Y * (Z @ W.T))) + 0.5 * lam * np.sum(W * W)))
    W = W_avg
    svm = LinearSvm(W[:, :-1].copy(), W[:, -1].copy(), lam, mean, scale, history=hist)
    svm.train_accuracy = float(np.mean(np.argmax(svm.margins(X), axis=1) == y))
    return svm


def svm_predict_probs(svm: LinearSvm, feature) -> np.ndarray:
    """Softmax over class margins; accepts one vector or a batch."""
    m = svm.margins(feature)
    z = np.exp(m - m.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# voting
# ---------------------------------------------------------------------------


def patch_weight(tissue_probs, params: VoteParams = VoteParams()) -> float:
    p = np.asarray(tissue_probs, dtype=np.float64)
    if int(np.argmax(p)) == OTHER:
        return float(params.gamma)
    return float(params.alpha * p[NEUROPIL] + params.beta * p[STROMA])


def _argmax_with_tie(v: np.ndarray) -> tuple[int, bool]:
    best = v.max()
    hits = np.flatnonzero(v == best)
    return int(hits[0]), hits.size > 1


def _check_records(records: list[PatchRecord]) -> None:
    if not records:
        raise VoteError("cannot vote on an empty set of patches")
    ids = {r.slide_id for r in records}
    if len(ids) != 1:
        raise VoteError(f"records span several slides: {sorted(ids)}")
    sizes = {r.class_probs.size for r in records}
    if len(sizes) != 1:
        raise DimensionError(f"class_probs lengths disagree: {sorted(sizes)}")


def soft_vote(records: list[PatchRecord], params: VoteParams = VoteParams()) -> SlideVerdict:
    _check_records(records)
    w = np.array([patch_weight(r.tissue_probs, params) for r in records])
    P = np.stack([r.class_probs for r in records])
    fallback = not w.sum() > 0
    eff = np.ones_like(w) if fallback else w
    s = eff @ P
    probs = s / eff.sum()
    label, tie = _argmax_with_tie(probs)
    return SlideVerdict(records[0].slide_id, probs, label, w.tolist(), "soft", tie, fallback)


def hard_vote(records: list[PatchRecord]) -> SlideVerdict:
    _check_records(records)
    P = np.stack([r.class_probs for r in records])
    counts = np.bincount(P.argmax(axis=1), minlength=P.shape[1]).astype(np.float64)
    label, tie = _argmax_with_tie(counts)
    return SlideVerdict(records[0].slide_id, counts / counts.sum(), label, [1.0] * len(records), "hard", tie)


def group_by_slide(records: list[PatchRecord]) -> dict[str, list[PatchRecord]]:
    out: dict[str, list[PatchRecord]] = {}
    for r in records:
        out.setdefault(r.slide_id, []).append(r)
    return out


# ---------------------------------------------------------------------------
# record exchange format: slide_id <TAB> x <TAB> y <TAB> class probs <TAB> tissue probs
# ---------------------------------------------------------------------------


def format_record(r: PatchRecord) -> str:
    cp = ",".join(repr(float(v)) for v in r.class_probs)
    tp = ",".join(repr(float(v)) for v in r.tissue_probs)
    return f"{r.slide_id}\t{r.x}\t{r.y}\t{cp}\t{tp}"


def parse_record(line: str) -> PatchRecord:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 5:
        raise ValueError(f"malformed patch record: {line!r}")
    sid, x, y, cp, tp = parts
    return PatchRecord(sid, int(x), int(y), np.array(cp.split(","), float), np.array(tp.split(","), float))


def write_records(path, records: list[PatchRecord]) -> None:
    Path(path).write_text("".join(format_record(r) + "\n" for r in records))


def read_records(path) -> list[PatchRecord]:
    return [parse_record(line) for line in Path(path).read_text().splitlines() if line.strip()]
