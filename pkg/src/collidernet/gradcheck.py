"""Double-precision finite-difference checks for every differentiable op and the full loss."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tensor
from .model import CausalNet, NetConfig, loss_total, regression_fit


def _p(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    return ad.sum_(ad.mul(out, Tensor(w)))


def check_ops(seed: int = 0) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    reports = []

    x, k, b = _p(rng, 1, 2, 5, 5), _p(rng, 3, 2, 3, 3), _p(rng, 3)
    w = rng.normal(size=(1, 3, 5, 5))
    reports.append(ad.grad_check(lambda: _weighted_sum(ad.conv2d_3x3(x, k, b), w), [x, k, b],
                                 1e-6, name="conv2d_3x3"))

    xp = _p(rng, 2, 3, 7, 7)
    w = rng.normal(size=(2, 3, 3, 3))
    reports.append(ad.grad_check(lambda: _weighted_sum(ad.relu(ad.maxpool2x2(xp)), w), [xp],
                                 1e-6, name="relu+maxpool2x2"))

    xd, w1, b1, w2, b2 = _p(rng, 4, 3), _p(rng, 3, 5), _p(rng, 5), _p(rng, 5, 2), _p(rng, 2)
    reports.append(ad.grad_check(
        lambda: ad.sum_(ad.square(ad.dense(ad.relu(ad.dense(xd, w1, b1)), w2, b2))),
        [xd, w1, b1, w2, b2], 1e-6, name="dense"))

    mask = ad.dropout_mask((4, 5), 0.25, np.random.default_rng(seed + 1))
    reports.append(ad.grad_check(
        lambda: ad.mean(ad.square(ad.dropout(ad.dense(xd, w1, b1), 0.25, mask=mask))),
        [xd, w1, b1], 1e-6, name="dropout(frozen mask)"))

    pm, target = _p(rng, 7), rng.normal(size=7)
    reports.append(ad.grad_check(lambda: ad.mse(pm, target), [pm], 1e-8, name="mse"))

    a, t = _p(rng, 8, 4), _p(rng, 8, 1)
    coef = rng.normal(size=3)
    reports.append(ad.grad_check(
        lambda: ad.mean(ad.square(ad.affine_const(ad.columns(ad.concat([a, t]), 2, 5), coef, 0.1))),
        [a, t], 1e-8, name="concat+columns+affine_const"))
    return reports


def check_network(seed: int = 0, size: int = 24, batch: int = 8, max_entries: int = 24) -> list[GradCheckReport]:
    """Full graph in causal and biased modes with frozen dropout masks and frozen OLS coefficients.

    Each parameter tensor is probed at ``max_entries`` random entries (all of
    them for smaller tensors).
    """
    rng = np.random.default_rng(seed)
    images = rng.normal(size=(batch, size, size))
    t = (rng.random(batch) < 0.5).astype(float)
    x = rng.normal(size=batch)
    y = rng.normal(size=batch)
    reports = []
    for mode in ("causal", "biased"):
        net = CausalNet(NetConfig(input_size=size, mode=mode), seed=seed).astype(np.float64)
        first = net.forward(images, t, training=True, rng=np.random.default_rng(seed + 2))
        masks = first.masks
        reg = regression_fit(first.activations, x) if mode == "causal" else None

        def fn():
            out = net.forward(images, t, training=True, masks=masks)
            return loss_total(out, y, x, mode, reg_fit=reg).tensor

        reports.append(ad.grad_check(fn, net.parameters(), 1e-4, name=f"CausalNet loss ({mode})",
                                     max_entries=max_entries, rng=np.random.default_rng(seed + 3)))
    return reports


def run_suite(seed: int = 0) -> list[GradCheckReport]:
    return check_ops(seed) + check_network(seed)
