"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

import dataclasses
from typing import Callable

import numpy as np

from .autodiff import (
    ActivationPattern, Parameter, Tape, Tensor, concat, conv2d, cross_entropy, flatten, fully_connected,
    max_pool, relu, softmax2,
)
from .config import ModelConfig
from .data import SyntheticSpec, generate_synthetic
from .model import PPMN, Views

STEP = 1e-3
GRAD_FLOOR = 1e-6


def relative_error(analytic, numeric, floor: float = GRAD_FLOOR) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from dividing by noise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, index, step: float = STEP) -> float:
    old = arr[index]
    arr[index] = old + step
    up = f()
    arr[index] = old - step
    down = f()
    arr[index] = old
    return (up - down) / (2.0 * step)


def check_tensors(loss_fn: Callable[[], Tensor], tensors: list[np.ndarray], grads: list[np.ndarray],
                  rng: np.random.Generator | None = None, samples: int | None = None,
                  step: float = STEP) -> float:
    """Max relative error over (optionally sampled) coordinates of ``tensors``.

    ``grads`` are the analytic gradients already computed for the current values.
    """
    worst = 0.0
    f = lambda: float(loss_fn().data)
    for arr, g in zip(tensors, grads):
        coords = list(np.ndindex(arr.shape))
        if samples is not None and len(coords) > samples:
            pick = rng.choice(len(coords), size=samples, replace=False)
            coords = [coords[k] for k in pick]
        for idx in coords:
            num = numeric_grad(f, arr, idx, step)
            worst = max(worst, float(relative_error(g[idx], num)))
    return worst


def _analytic(loss_fn, params: list[Parameter], pattern: ActivationPattern | None = None) -> list[np.ndarray]:
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        if pattern is None:
            loss = loss_fn()
        else:
            with pattern:
                loss = loss_fn()
    tape.backward(loss)
    return [p.grad.copy() for p in params]


def _spaced(rng: np.random.Generator, shape, spacing: float = 0.005) -> np.ndarray:
    """Random arrangement of distinct values at least ``spacing`` apart (no max-pool near-ties)."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2) * spacing
    return rng.permutation(vals).reshape(shape)


def layer_checks(seed: int = 0) -> dict[str, float]:
    """Max relative gradient error per layer type on small random problems (<= 2x4x9x9)."""
    rng = np.random.default_rng(seed)
    out = {}

    def run(name, build):
        params, loss_fn = build()
        grads = _analytic(loss_fn, params)
        out[name] = check_tensors(loss_fn, [p.data for p in params], grads, rng)

    def scalarize(t: Tensor, w: Parameter) -> Tensor:
        # random projection to two units keeps every output site in the loss
        return softmax2(fully_connected(flatten(t), w))

    labels = np.array([1, 0])

    def conv_case(rate, stride, pad):
        def build():
            x = Parameter("x", rng.normal(size=(2, 3, 9, 9)) * 0.5)
            w = Parameter("w", rng.normal(size=(4, 3, 3, 3)) * 0.2)
            b = Parameter("b", rng.normal(size=4) * 0.1)
            oh = (9 + 2 * pad - (2 * rate + 1)) // stride + 1
            proj = Parameter("proj", rng.normal(size=(2, 4 * oh * oh)) * 0.03)
            loss = lambda: cross_entropy(scalarize(conv2d(x, w, b, rate=rate, stride=stride, pad=pad), proj), labels)
            return [x, w, b, proj], loss
        return build

    run("conv2d_rate1", conv_case(1, 1, 1))
    run("conv2d_rate2", conv_case(2, 1, 2))
    run("conv2d_rate3", conv_case(3, 1, 3))
    run("conv2d_stride2", conv_case(1, 2, 1))

    def pool_build():
        x = Parameter("x", _spaced(rng, (2, 4, 9, 9)))
        proj = Parameter("proj", rng.normal(size=(2, 4 * 5 * 5)) * 0.2)
        return [x, proj], lambda: cross_entropy(scalarize(max_pool(x, 2, 2), proj), labels)

    run("max_pool", pool_build)

    def fc_build():
        x = Parameter("x", rng.normal(size=(2, 7)))
        w = Parameter("w", rng.normal(size=(5, 7)) * 0.4)
        b = Parameter("b", rng.normal(size=5) * 0.1)
        proj = Parameter("proj", rng.normal(size=(2, 5)) * 0.4)
        return [x, w, b, proj], lambda: cross_entropy(
            softmax2(fully_connected(fully_connected(x, w, b), proj)), labels)

    run("fully_connected", fc_build)

    def relu_build():
        # keep inputs away from the kink so the finite difference is valid
        vals = rng.normal(size=(2, 12))
        vals = np.where(np.abs(vals) < 0.05, 0.5, vals)
        x = Parameter("x", vals)
        proj = Parameter("proj", rng.normal(size=(2, 12)) * 0.4)
        return [x, proj], lambda: cross_entropy(softmax2(fully_connected(relu(x), proj)), labels)

    run("relu", relu_build)

    def concat_build():
        a = Parameter("a", rng.normal(size=(2, 2, 3, 3)))
        b = Parameter("b", rng.normal(size=(2, 3, 3, 3)))
        proj = Parameter("proj", rng.normal(size=(2, 45)) * 0.3)
        return [a, b, proj], lambda: cross_entropy(scalarize(concat([a, b], axis=1), proj), labels)

    run("concat", concat_build)

    def softmax_build():
        units = Parameter("units", rng.normal(size=(2, 2)))
        return [units], lambda: cross_entropy(softmax2(units), labels)

    run("softmax2_cross_entropy", softmax_build)
    return out


def variant_check(variant: str, cfg: ModelConfig | None = None, seed: int = 0,
                  samples_per_param: int = 3, images=None, pinned: bool = False,
                  step: float = STEP) -> float:
    """Max relative error over sampled coordinates of every parameter tensor of a
    full model on a 2-pair batch (one positive, one negative).

    With ``pinned`` the finite differences are taken with every ReLU mask and
    pooling argmax held at their values for the unperturbed parameters.
    """
    cfg = dataclasses.replace(cfg or ModelConfig(), variant=variant)
    model = PPMN(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    if images is None:
        ds = generate_synthetic(SyntheticSpec(n_identities=2, seed=seed))
        a = [ds.images(0, "A")[0].image, ds.images(1, "A")[0].image]
        b = [ds.images(0, "B")[0].image, ds.images(0, "B")[0].image]
    else:
        a, b = images
    va = Views.from_images(np.stack(a), model.channels)
    vb = Views.from_images(np.stack(b), model.channels)
    labels = np.array([1, 0])
    params = list(model.store)
    if pinned:
        pattern = ActivationPattern()
        grads = _analytic(lambda: model.loss(va, vb, labels), params, pattern)
        pattern.replay()

        def loss_fn():
            with pattern:
                return model.loss(va, vb, labels)
    else:
        loss_fn = lambda: model.loss(va, vb, labels)
        grads = _analytic(loss_fn, params)
    return check_tensors(loss_fn, [p.data for p in params], grads, rng,
                         samples=samples_per_param, step=step)
