"""Small numpy trainers for masked networks.

Gradients are computed by hand-written reverse passes through the same
layers as :func:`ertickets.netcore.layer_outputs`.  Three procedures share
one mini-batch loop: plain SGD on a fixed mask, edge-popup (scores over the
unmasked entries of frozen weights) and magnitude-drop / gradient-grow
rewiring.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, StructuralError
from .netcore import Architecture, Conv2D, Mask, MaskedNetwork, conv2d, relu, same_padding

LOSSES = ("mse", "cross-entropy")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    loss: str = "mse"

    def __post_init__(self):
        # lr = 0 is allowed on purpose: it is the "nothing moves" baseline
        if not self.learning_rate >= 0.0:
            raise DomainError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise DomainError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise DomainError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.loss not in LOSSES:
            raise DomainError(f"unknown loss {self.loss!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    task: str
    spec: dict = field(default_factory=dict)


@dataclass
class Curve:
    """One value per logging step, plus optional per-update nnz counts."""

    name: str
    steps: list[int] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    nnz: list[list[int]] = field(default_factory=list)
    diverged: bool = False

    def add(self, step: int, value: float):
        self.steps.append(int(step))
        self.values.append(float(value))

    @property
    def final(self) -> float:
        return self.values[-1]

    def csv_rows(self) -> list[dict]:
        return [{"step": s, self.name: v} for s, v in zip(self.steps, self.values)]


@dataclass
class ScoreState:
    """Edge-popup scores; entries outside the ER mask stay at ``-inf``."""

    scores: list[np.ndarray]
    keep: list[int]


# --- data ------------------------------------------------------------------


def teacher_student(teacher: MaskedNetwork, n_train: int, n_test: int, seed: int) -> Dataset:
    from .netcore import forward, sample_domain

    rng = np.random.default_rng(seed)
    x = sample_domain(teacher.arch, n_train + n_test, rng)
    y = forward(teacher, x)
    spec = {"generator": "teacher-student", "seed": seed, "n_train": n_train, "n_test": n_test}
    return Dataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:], "regression", spec)


def gaussian_blobs(
    dim: int, n_classes: int = 2, n_train: int = 512, n_test: int = 512, separation: float = 1.0, seed: int = 0
) -> Dataset:
    """Isotropic unit-variance clusters with centers at distance ``separation`` scale."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_classes, dim))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    n = n_train + n_test
    labels = rng.integers(n_classes, size=n)
    x = centers[labels] + rng.normal(size=(n, dim))
    spec = {
        "generator": "blobs", "seed": seed, "dim": dim, "n_classes": n_classes,
        "n_train": n_train, "n_test": n_test, "separation": separation,
    }
    return Dataset(x[:n_train], labels[:n_train], x[n_train:], labels[n_train:], "classification", spec)


def make_dataset(spec: dict, teacher: MaskedNetwork | None = None) -> Dataset:
    gen = spec.get("generator")
    if gen == "blobs":
        keys = ("dim", "n_classes", "n_train", "n_test", "separation", "seed")
        return gaussian_blobs(**{k: spec[k] for k in keys if k in spec})
    if gen == "teacher-student":
        if teacher is None:
            raise DomainError("teacher-student data needs a teacher network")
        return teacher_student(teacher, spec.get("n_train", 1024), spec.get("n_test", 512), spec.get("seed", 0))
    raise DomainError(f"unknown dataset generator {gen!r}")


# --- init ------------------------------------------------------------------


def he_init(arch: Architecture, mask: Mask | None = None, seed=0) -> MaskedNetwork:
    """Gaussian weights with variance ``2 / fan_in`` where ``fan_in`` counts
    unmasked in-edges of each unit; zero biases."""
    mask = mask if mask is not None else Mask.ones(arch)
    rng = np.random.default_rng(seed)
    weights = []
    for layer, s in zip(arch.layers, mask.layers):
        fan_in = s.reshape(s.shape[0], -1).sum(axis=1)
        std = np.sqrt(2.0 / np.maximum(fan_in, 1))
        std = std.reshape((-1,) + (1,) * (s.ndim - 1))
        weights.append(rng.normal(size=layer.weight_shape) * std * s)
    biases = tuple(np.zeros(layer.out_units) for layer in arch.layers)
    return MaskedNetwork(arch, tuple(weights), biases, mask)


# --- reverse passes ----------------------------------------------------------


def _windows(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    (pt, pb), (pl, pr) = same_padding(kh, kw)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))


def _conv_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray):
    """Gradients of same-padded cross-correlation wrt ``w`` and ``x``."""
    kh, kw = w.shape[2:]
    win = _windows(x, kh, kw)  # N, C, H, W, kh, kw
    gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # O, C, kh, kw
    gwin = np.tensordot(g, w, axes=([1], [0]))  # N, H, W, C, kh, kw
    (pt, pb), (pl, pr) = same_padding(kh, kw)
    n, c, h, wd = x.shape
    gxp = np.zeros((n, c, h + pt + pb, wd + pl + pr))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + h, j : j + wd] += np.moveaxis(gwin[..., i, j], 3, 1)
    return gw, gxp[:, :, pt : pt + h, pl : pl + wd]


def forward_pass(arch: Architecture, weights, biases, x: np.ndarray):
    """Outputs plus the per-layer inputs and pre-activations needed backwards."""
    inputs, pre = [], []
    h = x
    for l, layer in enumerate(arch.layers):
        if isinstance(layer, Conv2D):
            inputs.append(h)
            z = conv2d(h, weights[l], biases[l])
        else:
            if h.ndim > 2:
                h = h.reshape(h.shape[0], -1)
            inputs.append(h)
            z = h @ weights[l].T + biases[l]
        pre.append(z)
        h = relu(z) if l < arch.depth - 1 else z
    return h, (inputs, pre)


def backward_pass(arch: Architecture, weights, cache, grad_out: np.ndarray):
    """Gradients wrt every (effective) weight, bias and the input."""
    inputs, pre = cache
    gws: list[np.ndarray] = [None] * arch.depth  # type: ignore[list-item]
    gbs: list[np.ndarray] = [None] * arch.depth  # type: ignore[list-item]
    g = grad_out
    for l in range(arch.depth - 1, -1, -1):
        if l < arch.depth - 1:
            g = g * (pre[l] > 0)
        x = inputs[l]
        if isinstance(arch.layers[l], Conv2D):
            gws[l], gx = _conv_backward(x, weights[l], g)
            gbs[l] = g.sum(axis=(0, 2, 3))
        else:
            gws[l] = g.T @ x
            gbs[l] = g.sum(axis=0)
            gx = g @ weights[l]
        if l > 0 and gx.shape != pre[l - 1].shape:
            gx = gx.reshape(pre[l - 1].shape)
        g = gx
    return gws, gbs, g


def loss_and_grad(out: np.ndarray, y: np.ndarray, loss: str) -> tuple[float, np.ndarray]:
    if loss == "mse":
        diff = out - y.reshape(out.shape)
        return float(np.mean(diff**2)), 2.0 * diff / diff.size
    z = out - out.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = out.shape[0]
    labels = np.asarray(y, dtype=np.int64)
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(-logp[np.arange(n), labels].mean()), grad / n


def gradients(net: MaskedNetwork, x, y, loss: str = "mse"):
    """Loss and gradients wrt the *effective* weights (dense) and biases."""
    weights = net.effective_weights()
    out, cache = forward_pass(net.arch, weights, net.biases, np.asarray(x, dtype=np.float64))
    value, g = loss_and_grad(out, y, loss)
    gws, gbs, _ = backward_pass(net.arch, weights, cache, g)
    return value, gws, gbs


def evaluate(net: MaskedNetwork, x, y, loss: str) -> float:
    out, _ = forward_pass(net.arch, net.effective_weights(), net.biases, np.asarray(x, dtype=np.float64))
    return loss_and_grad(out, y, loss)[0]


def accuracy(net: MaskedNetwork, x, y) -> float:
    out, _ = forward_pass(net.arch, net.effective_weights(), net.biases, np.asarray(x, dtype=np.float64))
    return float(np.mean(out.argmax(axis=1) == np.asarray(y)))


# --- SGD and rewiring ---------------------------------------------------------


def _sgd_loop(
    net: MaskedNetwork,
    data: Dataset,
    cfg: TrainConfig,
    on_step: Callable | None = None,
):
    """Momentum SGD over the unmasked entries; masked entries stay exactly 0.

    ``on_step(step, weights, masks, grads, velocity)`` runs after each update
    and may edit ``masks`` in place.
    """
    arch = net.arch
    masks = [np.array(s) for s in net.mask.layers]
    weights = [np.array(w) * s for w, s in zip(net.weights, masks)]
    biases = [np.array(b) for b in net.biases]
    vw = [np.zeros_like(w) for w in weights]
    vb = [np.zeros_like(b) for b in biases]
    rng = np.random.default_rng(cfg.seed)
    n = data.x_train.shape[0]
    curve = Curve("loss")
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            out, cache = forward_pass(arch, weights, biases, data.x_train[idx])
            _, g = loss_and_grad(out, data.y_train[idx], cfg.loss)
            gws, gbs, _ = backward_pass(arch, weights, cache, g)
            for l in range(arch.depth):
                gw = (gws[l] + cfg.weight_decay * weights[l]) * masks[l]
                vw[l] = cfg.momentum * vw[l] + gw
                vb[l] = cfg.momentum * vb[l] + gbs[l]
                weights[l] = (weights[l] - cfg.learning_rate * vw[l]) * masks[l]
                biases[l] = biases[l] - cfg.learning_rate * vb[l]
            step += 1
            if on_step is not None:
                on_step(step, weights, masks, gws, vw)
        value = _loss_of(arch, weights, biases, data.x_train, data.y_train, cfg.loss)
        curve.add(epoch + 1, value)
        if not math.isfinite(value):
            curve.diverged = True
            warnings.warn(f"training diverged at epoch {epoch + 1}", RuntimeWarning, stacklevel=3)
            break
    return weights, biases, masks, curve


def _loss_of(arch, weights, biases, x, y, loss) -> float:
    with np.errstate(all="ignore"):
        out, _ = forward_pass(arch, weights, biases, x)
        return loss_and_grad(out, y, loss)[0]


def _finish(net: MaskedNetwork, weights, biases, masks) -> MaskedNetwork | None:
    if not all(np.isfinite(w).all() for w in weights) or not all(np.isfinite(b).all() for b in biases):
        return None
    mask = Mask(tuple(m.astype(bool) for m in masks), seed=net.mask.seed, plan_ref=net.mask.plan_ref)
    return MaskedNetwork(net.arch, tuple(weights), tuple(biases), mask)


def sgd_train(net: MaskedNetwork, dataset: Dataset, cfg: TrainConfig) -> tuple[MaskedNetwork | None, Curve]:
    """Train on a fixed mask; the curve holds the training loss per epoch.

    A diverged run returns ``None`` and a curve flagged ``diverged``.
    """
    weights, biases, masks, curve = _sgd_loop(net, dataset, cfg)
    return _finish(net, weights, biases, masks), curve


def _drop_grow(w, m, grad, k_drop, k_grow):
    """Deactivate ``k_drop`` smallest-|w| active entries and activate up to
    ``k_grow`` inactive ones with the largest |grad| (never the just-dropped)."""
    flat_w, flat_m, flat_g = w.reshape(-1), m.reshape(-1), grad.reshape(-1)
    active = np.flatnonzero(flat_m)
    drop = active[np.argsort(np.abs(flat_w[active]), kind="stable")[:k_drop]]
    pool = np.flatnonzero(~flat_m)
    grow = pool[np.argsort(-np.abs(flat_g[pool]), kind="stable")[:k_grow]]
    flat_m[drop] = False
    flat_m[grow] = True
    flat_w[drop] = 0.0
    flat_w[grow] = 0.0
    return drop, grow


def rigl_rewire(
    net: MaskedNetwork,
    dataset: Dataset,
    cfg: TrainConfig,
    update_every: int = 100,
    prune_rate: float = 0.5,
    final_density: Sequence[float] | None = None,
) -> tuple[Mask, Curve, MaskedNetwork | None]:
    """SGD with periodic magnitude-drop / gradient-grow mask updates.

    Pure rewiring (``final_density=None``) keeps every layer's nnz fixed.
    Sparse-to-sparse mode shrinks each layer linearly from its initial
    density to ``final_density`` across the updates.  Grown weights start
    at 0.  ``curve.nnz`` records per-layer nnz after every update; a layer
    with fewer inactive slots than the prune count rewires only that many
    edges and is warned about.
    """
    if not 0.0 <= prune_rate < 1.0:
        raise DomainError(f"prune_rate must lie in [0, 1), got {prune_rate}")
    if update_every < 1:
        raise DomainError("update_every must be >= 1")
    arch = net.arch
    steps_per_epoch = math.ceil(dataset.x_train.shape[0] / cfg.batch_size)
    total_updates = max(1, (steps_per_epoch * cfg.epochs) // update_every)
    start_nnz = [int(s.sum()) for s in net.mask.layers]
    sizes = [s.size for s in net.mask.layers]
    if final_density is not None:
        if len(final_density) != arch.depth:
            raise StructuralError("final_density needs one entry per layer")
        end_nnz = [int(round(d * m)) for d, m in zip(final_density, sizes)]
        if any(e > s for e, s in zip(end_nnz, start_nnz)):
            raise DomainError("sparse-to-sparse mode cannot increase nnz")
    else:
        end_nnz = start_nnz
    nnz_log: list[list[int]] = []
    counter = [0]

    def on_step(step, weights, masks, grads, velocity):
        if prune_rate == 0.0 and final_density is None:
            return
        if step % update_every:
            return
        counter[0] += 1
        u = min(counter[0], total_updates)
        for l in range(arch.depth):
            target = start_nnz[l] + (end_nnz[l] - start_nnz[l]) * u // total_updates
            active = int(masks[l].sum())
            k = int(prune_rate * active)
            room = masks[l].size - active
            if room < k:
                # too few inactive slots: drop only what can be regrown
                warnings.warn(f"layer {l}: rewiring {room} of {k} edges", RuntimeWarning, stacklevel=2)
                k = room
            shrink = max(0, active - target)
            drop, grow = _drop_grow(weights[l], masks[l], grads[l], k + shrink, k)
            velocity[l].reshape(-1)[drop] = 0.0
            velocity[l].reshape(-1)[grow] = 0.0
        nnz_log.append([int(m.sum()) for m in masks])

    weights, biases, masks, curve = _sgd_loop(net, dataset, cfg, on_step)
    curve.nnz = nnz_log
    final = _finish(net, weights, biases, masks)
    mask = Mask(tuple(m.astype(bool) for m in masks), seed=net.mask.seed, plan_ref=net.mask.plan_ref)
    return mask, curve, final


# --- edge-popup --------------------------------------------------------------


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    flat = scores.reshape(-1)
    keep = np.zeros(flat.size, dtype=bool)
    if k > 0:
        keep[np.argsort(-flat, kind="stable")[:k]] = True
    return keep.reshape(scores.shape)


def anneal_schedule(start: float, end: float, levels: int = 5) -> list[tuple[int, float]]:
    """``levels`` keep fractions decreasing linearly from ``start`` to ``end``."""
    return [(i, float(f)) for i, f in enumerate(np.linspace(start, end, levels))]


def edge_popup(
    net: MaskedNetwork,
    dataset: Dataset,
    cfg: TrainConfig,
    schedule: Sequence[tuple[int, float]],
) -> tuple[Mask, Curve]:
    """Score-based subnetwork search inside the ER mask of ``net``.

    Weights and biases are frozen.  Scores start at ``|w|`` on the unmasked
    entries; each forward pass keeps the top ``keep_fraction * m_l`` scores of
    every layer and scores receive the straight-through gradient
    ``w * dL/dw_eff``.  Each level trains ``cfg.epochs`` epochs; the curve
    records test accuracy after every level.
    """
    keeps = [f for _, f in schedule]
    if any(b > a + 1e-12 for a, b in zip(keeps, keeps[1:])):
        raise DomainError("keep fractions must not increase across levels")
    arch = net.arch
    er = [np.array(s) for s in net.mask.layers]
    weights = [np.array(w) for w in net.weights]
    biases = [np.array(b) for b in net.biases]
    scores = [np.where(s, np.abs(w), -np.inf) for w, s in zip(weights, er)]
    velocity = [np.zeros_like(w) for w in weights]
    rng = np.random.default_rng(cfg.seed)
    n = dataset.x_train.shape[0]
    curve = Curve("accuracy")
    state = ScoreState(scores, [0] * arch.depth)
    current = [s.copy() for s in er]
    for level, keep in schedule:
        for l, s in enumerate(er):
            k = int(round(keep * s.size))
            if k > int(s.sum()):
                warnings.warn(
                    f"keep fraction {keep} exceeds the ER density of layer {l}; clipped",
                    RuntimeWarning, stacklevel=2,
                )
                k = int(s.sum())
            state.keep[l] = k
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                current = [_top_k(sc, k) for sc, k in zip(scores, state.keep)]
                eff = [w * m for w, m in zip(weights, current)]
                out, cache = forward_pass(arch, eff, biases, dataset.x_train[idx])
                _, g = loss_and_grad(out, dataset.y_train[idx], cfg.loss)
                gws, _, _ = backward_pass(arch, eff, cache, g)
                for l in range(arch.depth):
                    gs = np.where(er[l], gws[l] * weights[l], 0.0)
                    velocity[l] = cfg.momentum * velocity[l] + gs
                    scores[l] = np.where(er[l], scores[l] - cfg.learning_rate * velocity[l], -np.inf)
        current = [_top_k(sc, k) for sc, k in zip(scores, state.keep)]
        ticket = MaskedNetwork(arch, tuple(weights), tuple(biases), Mask(tuple(current)))
        if not all(np.all(c <= s) for c, s in zip(current, er)):
            raise AssertionError("edge-popup left the ER mask")
        curve.add(level, accuracy(ticket, dataset.x_test, dataset.y_test))
    return Mask(tuple(current), seed=net.mask.seed, plan_ref=net.mask.plan_ref), curve
