"""Central finite-difference verification of reverse-mode gradients.

Relative error per sampled scalar is ``|a - n| / max(|a|, |n|, floor)`` with
``floor = DEFAULT_FLOOR * max(1, |loss|)``. The floor keeps entries whose true
gradient is zero (key biases under softmax, dead ReLU inputs, clamped spline
arguments) from turning difference round-off, which grows like
``eps * |loss| / step``, into a huge ratio.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .nn import Module
from .tensor import Tensor

DEFAULT_STEP = 1e-5
DEFAULT_FLOOR = 1e-6
DEFAULT_TOL = 1e-4


@dataclass
class GradEntry:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradcheckResult:
    entries: list[GradEntry] = field(default_factory=list)
    tol: float = DEFAULT_TOL

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def worst(self, n: int = 5) -> list[GradEntry]:
        return sorted(self.entries, key=lambda e: -e.rel_error)[:n]


def rel_error(a: float, n: float, floor: float = DEFAULT_FLOOR) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: list[tuple[str, Tensor]],
    num_samples: int = 200,
    step: float = DEFAULT_STEP,
    seed: int = 0,
    floor: float = DEFAULT_FLOOR,
    tol: float = DEFAULT_TOL,
    cover_all: bool = True,
) -> GradcheckResult:
    """Compare backprop against central differences on a random sample of scalar parameters.

    With ``cover_all`` every parameter tensor contributes at least one scalar
    (budget permitting) and the rest of the budget is drawn uniformly.
    ``loss_fn`` must be deterministic; it is called once with a graph and twice
    per sampled scalar without one.
    """
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    floor = floor * max(1.0, abs(loss.item()))
    sizes = np.array([p.size for _, p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    budget = min(num_samples, total)
    picks = np.empty(0, dtype=np.int64)
    if cover_all:
        order = rng.permutation(len(params))[:budget]
        picks = np.sort(offsets[order] + rng.integers(0, sizes[order]))
    if budget > picks.size:
        rest = np.setdiff1d(np.arange(total), picks)
        extra = rng.choice(rest, size=budget - picks.size, replace=False)
        picks = np.sort(np.concatenate([picks, extra]))
    result = GradcheckResult(tol=tol)
    with T.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, p = params[k]
            idx = np.unravel_index(int(flat - offsets[k]), p.shape)
            analytic = 0.0 if p.grad is None else float(p.grad[idx])
            orig = p.data[idx]
            p.data[idx] = orig + step
            f_plus = loss_fn().item()
            p.data[idx] = orig - step
            f_minus = loss_fn().item()
            p.data[idx] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            result.entries.append(GradEntry(name, tuple(int(i) for i in idx), analytic, numeric,
                                            rel_error(analytic, numeric, floor)))
    return result


def check_model(model: Module, images: np.ndarray, labels: np.ndarray, **kw) -> GradcheckResult:
    """Gradient check of the mean cross-entropy of ``model`` on a fixed batch."""
    x = T.Tensor(images)

    def loss_fn():
        return T.cross_entropy_loss(model(x), labels)

    return check_gradients(loss_fn, list(model.named_parameters()), **kw)
