"""Finite-difference verification suites for the whole trainable stack."""

from __future__ import annotations

import numpy as np

from . import losses
from .backbone import BackboneConfig, ConvSpec
from .engine import Tensor, grad_check
from .model import Model

TINY_BACKBONE = BackboneConfig(
    input_hw=(8, 8),
    in_channels=3,
    blocks=(ConvSpec(4, 3, 2), ConvSpec(4, 2, 1), ConvSpec(4, 1, 1)),
    c_z=4,
    latent_hw=(2, 2),
)


def tiny_model(seed: int = 0, similarity_kind: str = "reciprocal") -> Model:
    return Model.create(TINY_BACKBONE, m=3, seed=seed, similarity_kind=similarity_kind)


def run_suites(seed: int = 0, fd_step: float = 1e-6) -> list[dict]:
    """Run every finite-difference suite; each entry carries its own tolerance."""
    rng = np.random.default_rng(seed)
    results = []

    def add(name, err, tol=1e-4):
        results.append({"suite": name, "max_rel_error": err, "tolerance": tol,
                        "passed": bool(err < tol)})

    x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    add("sigmoid-chain", grad_check(lambda: x.sigmoid().square().sum(), [x], fd_step), 1e-6)

    v = Tensor(rng.uniform(0.5, 2.0, size=7), requires_grad=True)
    add("log", grad_check(lambda: v.log().sum(), [v], fd_step))
    add("min-k-mean", grad_check(lambda: v.min_k_mean(3), [v], fd_step))

    img = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
    ker = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
    add("conv2d", grad_check(lambda: img.conv2d(ker, stride=1).square().sum(),
                             [img, ker], fd_step))

    z = Tensor(rng.uniform(0.1, 0.9, size=(2, 4, 3, 3)), requires_grad=True)
    p = Tensor(rng.uniform(0.1, 0.9, size=(3, 4)), requires_grad=True)
    add("distance-map", grad_check(lambda: z.proto_sqdist(p).square().sum(),
                                   [z, p], fd_step))

    for kind in ("reciprocal", "log"):
        model = tiny_model(seed=seed, similarity_kind=kind)
        images = rng.uniform(0.0, 1.0, size=(6, 3, 8, 8))
        y = rng.uniform(1.0, 5.0, size=6)
        weights = losses.LossWeights(1.0, 1.0, 10.0)
        cfg_loss = {"k": 2, "delta_l": 1.5}

        def closure(model=model, images=images, y=y):
            result = model.forward(Tensor(images))
            return losses.total_loss(
                losses.mse(result.y_hat, y),
                losses.cluster_loss(result.dmin, y, model.bank.labels,
                                    cfg_loss["k"], cfg_loss["delta_l"]),
                losses.psd_loss(result.dmin, model.bank.d_max),
                weights,
            )

        add(f"full-model-{kind}", grad_check(closure, model.params(), fd_step,
                                             max_coords=4))
    return results
