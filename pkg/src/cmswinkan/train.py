"""AdamW with cosine annealing, the training loop, and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Corpus, to_model_input
from .metrics import MetricsReport, evaluate_predictions
from .model import CMSwinKAN

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_frac: float = 0.05
    horizon: int | None = None  # cosine horizon in epochs; defaults to ``epochs``
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    flip_augment: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def cosine_lr(t: float, horizon: float, base: float) -> float:
    """``0.5 * base * (1 + cos(pi * t / horizon))``, held at 0 past the horizon."""
    if t >= horizon:
        return 0.0
    return 0.5 * base * (1.0 + math.cos(math.pi * t / horizon))


def scheduled_lr(step: int, total_steps: int, base: float, warmup_frac: float = 0.0) -> float:
    """Linear warmup over the first ``warmup_frac`` of steps, cosine decay after."""
    warm = int(round(warmup_frac * total_steps))
    if step < warm:
        return base * (step + 1) / warm
    return cosine_lr(step - warm, total_steps - warm, base)


class AdamW:
    """Adam with decoupled weight decay: ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0,
                 no_decay: set[int] | None = None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.no_decay = no_decay or set()
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            if self.wd and id(p) not in self.no_decay:
                update = update + self.wd * p.data
            p.data = p.data - self.lr * update

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def _no_decay_ids(model: CMSwinKAN) -> set[int]:
    # norms, biases, position tables and the fusion scale weights are not decayed
    out = set()
    for name, p in model.named_parameters():
        if p.ndim <= 1 or "bias_table" in name:
            out.add(id(p))
    return out


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    reports: list[MetricsReport] = field(default_factory=list)


def predict_scores(model: CMSwinKAN, images_u8: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Softmax class probabilities ``[N, C]`` in eval mode."""
    was = model.training
    model.eval()
    out = []
    try:
        with T.no_grad():
            for s in range(0, len(images_u8), batch_size):
                logits = model(T.Tensor(to_model_input(images_u8[s : s + batch_size]))).data
                z = np.exp(logits - logits.max(axis=1, keepdims=True))
                out.append(z / z.sum(axis=1, keepdims=True))
    finally:
        model.train(was)
    return np.concatenate(out)


def evaluate(model: CMSwinKAN, images_u8: np.ndarray, labels: np.ndarray) -> MetricsReport:
    return evaluate_predictions(labels, predict_scores(model, images_u8))


def train(model: CMSwinKAN, corpus: Corpus, cfg: TrainConfig, eval_every: int = 1) -> History:
    if corpus.num_classes != model.cfg.num_classes:
        raise ValueError(f"corpus has {corpus.num_classes} classes, model {model.cfg.num_classes}")
    rng = np.random.default_rng(cfg.seed)
    n = len(corpus.y_train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    horizon = cfg.horizon or cfg.epochs
    total = horizon * steps_per_epoch
    opt = AdamW(model.parameters(), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay, _no_decay_ids(model))
    hist = History()
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            x = corpus.x_train[idx]
            if cfg.flip_augment:
                flips = rng.integers(0, 4, len(idx))
                x = np.stack([_flip(img, f) for img, f in zip(x, flips)])
            opt.lr = scheduled_lr(step, total, cfg.lr, cfg.warmup_frac)
            loss = T.cross_entropy_loss(model(T.Tensor(to_model_input(x))), corpus.y_train[idx])
            if not np.isfinite(loss.data):
                raise DivergenceError(f"loss became {loss.item()} at epoch {epoch}, step {step} (lr={opt.lr:.3g})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        hist.train_loss.append(float(np.mean(losses)))
        hist.lr.append(opt.lr)
        if eval_every and ((epoch + 1) % eval_every == 0 or epoch == cfg.epochs - 1):
            rep = evaluate(model, corpus.x_test, corpus.y_test)
            hist.reports.append(rep)
            hist.test_acc.append(rep.acc)
            log.info("epoch %d loss %.4f test acc %.4f", epoch + 1, hist.train_loss[-1], rep.acc)
    return hist


def _flip(img: np.ndarray, code: int) -> np.ndarray:
    if code & 1:
        img = img[:, ::-1]
    if code & 2:
        img = img[::-1]
    return img
