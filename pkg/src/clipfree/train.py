"""Desk-scale FP32 training with Adam and a warmup/decay learning-rate schedule.

Loss is mean absolute error on the 0-255 scale (``loss="l2"`` switches to
mean squared error).  No weight decay.  Training runs in float64 on batched
``(n, h, w, c)`` arrays and writes float32 weights back into the graph.

Optimisation happens in normalised units: pixels are divided by 255, the first
conv's weights are multiplied by 255 and the last conv's weights and bias are
divided by 255.  The deployed graph is the same function on 0-255 pixels with
the factors folded back in, and its hidden activations equal the normalised
ones.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import zoo
from .data import bicubic_resize
from .engine import ConvWeights
from .errors import StructuralError, TrainingDiverged

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    patch_size: int = 16
    lr_start: float = 4e-4
    lr_peak: float = 25e-4
    lr_end: float = 4e-5
    warmup_epochs: int = 10
    beta1: float = 0.99
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    patches_per_epoch: int = 200
    heldout_patches: int = 16
    loss: str = "l1"


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Linear warmup ``lr_start -> lr_peak``, then linear decay to ``lr_end`` at the last epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise StructuralError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch <= cfg.warmup_epochs:
        if cfg.warmup_epochs == 0:
            return cfg.lr_peak
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * epoch / cfg.warmup_epochs
    span = cfg.epochs - 1 - cfg.warmup_epochs
    return cfg.lr_peak + (cfg.lr_end - cfg.lr_peak) * (epoch - cfg.warmup_epochs) / span


def sample_patches(dataset, n: int, patch: int, scale: int, seed: int) -> list:
    """``n`` aligned ``(lr, hr)`` pairs cropped at random from ``dataset``.

    HR crops are ``patch * scale`` square; LR is their bicubic downscale.
    Images smaller than the crop are skipped with a warning.
    """
    images = list(dataset)
    if not images:
        raise StructuralError("cannot sample patches from an empty dataset")
    size = patch * scale
    usable = []
    for i, img in enumerate(images):
        if img.shape[0] < size or img.shape[1] < size:
            log.warning("image %d (%dx%d) smaller than %dx%d crop, skipped", i, img.shape[0],
                        img.shape[1], size, size)
        else:
            usable.append(img)
    if not usable:
        raise StructuralError(f"no image is at least {size}x{size}")
    rng = np.random.Generator(np.random.PCG64(seed))
    pairs = []
    for _ in range(n):
        img = usable[int(rng.integers(len(usable)))]
        r = int(rng.integers(img.shape[0] - size + 1))
        c = int(rng.integers(img.shape[1] - size + 1))
        hr = np.clip(img[r:r + size, c:c + size].astype(np.float32), 0, 255)
        pairs.append((bicubic_resize(hr, Fraction(1, scale)), hr))
    return pairs


# -- batched network ---------------------------------------------------------

PIXEL = 255.0


class Network:
    """float64 trainable view of a :class:`ModelGraph` in normalised units.

    ``forward`` takes and returns tensors on the 0-1 scale.
    """

    def __init__(self, m: zoo.ModelGraph):
        self.layers = tuple(replace(l, lo=l.lo / PIXEL, hi=l.hi / PIXEL) if l.kind == "ClippedReLU" else l
                            for l in m.layers)
        self.params = [[np.asarray(w.weights, np.float64).copy(), np.asarray(w.bias, np.float64).copy()]
                       for w in m.weights]
        self.params[0][0] *= PIXEL
        self.params[-1][0] /= PIXEL
        self.params[-1][1] /= PIXEL
        self.groups = [w.groups for w in m.weights]
        self._cache = []

    def to_graph(self, m: zoo.ModelGraph) -> zoo.ModelGraph:
        params = [[w.copy(), b.copy()] for w, b in self.params]
        params[0][0] /= PIXEL
        params[-1][0] *= PIXEL
        params[-1][1] *= PIXEL
        ws = [ConvWeights(w.astype(np.float32), b.astype(np.float32), g)
              for (w, b), g in zip(params, self.groups)]
        return zoo.with_weights(m, ws)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, np.float64)
        net_in = x
        self._cache = []
        ci = 0
        for layer in self.layers:
            if layer.kind == "Conv":
                w, b = self.params[ci]
                y, cols = _conv_fwd(x, w, b, self.groups[ci])
                if layer.residual:
                    y = y + x
                self._cache.append((ci, cols, x.shape))
                ci += 1
            elif layer.kind == "ReLU":
                self._cache.append(x > 0)
                y = np.maximum(x, 0)
            elif layer.kind == "ClippedReLU":
                self._cache.append((x >= layer.lo) & (x <= layer.hi))
                y = np.clip(x, layer.lo, layer.hi)
            elif layer.kind == "DepthToSpace":
                self._cache.append(None)
                y = _d2s(x, layer.block)
            elif layer.kind == "AddAnchor":
                self._cache.append(None)
                y = x + np.tile(net_in, (1, 1, 1, layer.block ** 2))
            else:
                raise StructuralError(f"unknown layer kind {layer.kind!r}")
            if not np.all(np.isfinite(y)):
                raise TrainingDiverged(f"non-finite activation at layer {len(self._cache) - 1} ({layer.kind})")
            x = y
        return x

    def backward(self, dy: np.ndarray) -> list:
        """Gradients ``[[dW, db], ...]`` per conv for upstream gradient ``dy``."""
        grads = [None] * len(self.params)
        for idx in range(len(self.layers) - 1, -1, -1):
            layer, cache = self.layers[idx], self._cache[idx]
            if layer.kind == "Conv":
                ci, cols, xshape = cache
                dw, db, dx = _conv_bwd(dy, cols, self.params[ci][0], self.groups[ci], xshape)
                if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
                    raise TrainingDiverged(f"non-finite gradient first seen at layer {idx} (Conv)")
                grads[ci] = [dw, db]
                dy = dx + dy if layer.residual else dx
            elif layer.kind in ("ReLU", "ClippedReLU"):
                dy = dy * cache
            elif layer.kind == "DepthToSpace":
                dy = _s2d(dy, layer.block)
            # AddAnchor: gradient passes through unchanged
        return grads


def _conv_fwd(x, w, b, groups):
    n, h, wd, _ = x.shape
    k = w.shape[0]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (n, h, w, c, k, k)
    cin_g, cout = w.shape[2], w.shape[3]
    cout_g = cout // groups
    y = np.empty((n, h, wd, cout))
    cols_all = []
    for g in range(groups):
        cols = win[:, :, :, g * cin_g:(g + 1) * cin_g].reshape(n * h * wd, -1)
        wg = w[:, :, :, g * cout_g:(g + 1) * cout_g].transpose(2, 0, 1, 3).reshape(-1, cout_g)
        y[..., g * cout_g:(g + 1) * cout_g] = (cols @ wg).reshape(n, h, wd, cout_g)
        cols_all.append(cols)
    return y + b, cols_all


def _conv_bwd(dy, cols_all, w, groups, xshape):
    n, h, wd, cin = xshape
    k = w.shape[0]
    p = k // 2
    cin_g, cout = w.shape[2], w.shape[3]
    cout_g = cout // groups
    dw = np.empty_like(w)
    dxp = np.zeros((n, h + 2 * p, wd + 2 * p, cin))
    for g, cols in enumerate(cols_all):
        dyg = dy[..., g * cout_g:(g + 1) * cout_g].reshape(-1, cout_g)
        wg = w[:, :, :, g * cout_g:(g + 1) * cout_g].transpose(2, 0, 1, 3).reshape(-1, cout_g)
        dw[:, :, :, g * cout_g:(g + 1) * cout_g] = (cols.T @ dyg).reshape(cin_g, k, k, cout_g).transpose(1, 2, 0, 3)
        dcols = (dyg @ wg.T).reshape(n, h, wd, cin_g, k, k)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + h, j:j + wd, g * cin_g:(g + 1) * cin_g] += dcols[..., i, j]
    db = dy.sum(axis=(0, 1, 2))
    return dw, db, dxp[:, p:p + h, p:p + wd]


def _d2s(x, b):
    n, h, w, c = x.shape
    co = c // (b * b)
    return x.reshape(n, h, w, b, b, co).transpose(0, 1, 3, 2, 4, 5).reshape(n, h * b, w * b, co)


def _s2d(x, b):
    n, hb, wb, co = x.shape
    h, w = hb // b, wb // b
    return x.reshape(n, h, b, w, b, co).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, b * b * co)


def loss_and_grad(pred: np.ndarray, target: np.ndarray, kind: str = "l1"):
    diff = pred - target
    if kind == "l1":
        return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size
    if kind == "l2":
        return float(np.mean(diff ** 2)), 2.0 * diff / diff.size
    raise StructuralError(f"unknown loss {kind!r}")


def _pixel_loss(loss: float, kind: str) -> float:
    """Normalised loss expressed on the 0-255 scale."""
    return loss * PIXEL if kind == "l1" else loss * PIXEL ** 2


class Adam:
    """Bias-corrected Adam: ``p -= lr * m_hat / (sqrt(v_hat) + eps)``."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [[np.zeros_like(a) for a in group] for group in params]
        self.v = [[np.zeros_like(a) for a in group] for group in params]

    def step(self, params, grads, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for pg, gg, mg, vg in zip(params, grads, self.m, self.v):
            for p, g, m, v in zip(pg, gg, mg, vg):
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _stack(pairs):
    """Batch of normalised (lr, hr) arrays."""
    return np.stack([lr for lr, _ in pairs]).astype(np.float64) / PIXEL, \
        np.stack([hr for _, hr in pairs]).astype(np.float64) / PIXEL


def train(m: zoo.ModelGraph, cfg: TrainConfig, dataset, log_path=None) -> zoo.ModelGraph:
    """Train ``m`` on random crops of ``dataset`` and return the updated graph.

    The returned graph's ``meta["history"]`` holds one dict per epoch
    (``epoch``, ``lr``, ``loss``, ``heldout_loss``), plus an ``epoch = -1``
    entry with the held-out loss before training.  With ``log_path`` the same
    entries are written as JSON lines.
    """
    images = list(dataset)
    if not images:
        raise StructuralError("training dataset is empty")
    scale = m.scale
    net = Network(m)
    opt = Adam(net.params, cfg.beta1, cfg.beta2, cfg.eps)
    held_x, held_t = _stack(sample_patches(images, cfg.heldout_patches, cfg.patch_size, scale,
                                           seed=cfg.seed * 7919 + 104729))

    def heldout() -> float:
        return _pixel_loss(loss_and_grad(net.forward(held_x), held_t, cfg.loss)[0], cfg.loss)

    history = [{"epoch": -1, "lr": 0.0, "loss": None, "heldout_loss": heldout()}]
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg, epoch)
        pairs = sample_patches(images, cfg.patches_per_epoch, cfg.patch_size, scale,
                               seed=cfg.seed * 100003 + epoch)
        losses = []
        for start in range(0, len(pairs), cfg.batch_size):
            x, t = _stack(pairs[start:start + cfg.batch_size])
            loss, dy = loss_and_grad(net.forward(x), t, cfg.loss)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            grads = net.backward(dy)
            opt.step(net.params, grads, lr)
            losses.append(_pixel_loss(loss, cfg.loss))
        entry = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses)), "heldout_loss": heldout()}
        history.append(entry)
        log.debug("epoch %d lr %.2e loss %.4f heldout %.4f", epoch, lr, entry["loss"], entry["heldout_loss"])
    if log_path is not None:
        lines = "".join(json.dumps(e) + "\n" for e in history)
        zoo.atomic_write(Path(log_path), lines.encode())
    out = net.to_graph(m)
    return replace(out, meta={**m.meta, "history": history, "train_config": asdict(cfg)})
