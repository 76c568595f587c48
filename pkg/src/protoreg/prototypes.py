"""Prototype layer: distance maps, min-pool, and distance-to-similarity.

Prototypes live in the same sigmoid-bounded latent space as image patches,
so every squared distance is capped by the latent depth (d_max = c_z).
Each prototype carries a fixed regression label assigned on an even grid
at construction; labels never change afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import ShapeError, Tensor


class SimilarityConfigError(ValueError):
    pass


def compute_d_max(c_z: int) -> float:
    """Supremum of squared L2 distance between two points of (0,1)^c_z."""
    if c_z < 1:
        raise ValueError(f"c_z must be >= 1, got {c_z}")
    return float(c_z)


def assign_prototype_labels(m: int, lo: float = 0.1, hi: float = 5.9) -> np.ndarray:
    """Evenly spaced labels from lo to hi inclusive, strictly increasing."""
    if m < 2:
        raise ValueError(f"need at least 2 prototypes for a label grid, got {m}")
    if lo <= 0:
        raise ValueError(f"prototype labels must be positive (prediction divides by them), lo={lo}")
    if hi <= lo:
        raise ValueError(f"label range must be increasing, got [{lo}, {hi}]")
    return np.linspace(lo, hi, m)


@dataclass
class ProvenanceRecord:
    """Which training patch a prototype was projected onto."""

    sample_id: int
    row: int
    col: int
    moved_sq_dist: float


@dataclass
class PrototypeBank:
    vectors: Tensor  # (m, c_z), trainable
    labels: np.ndarray  # (m,), fixed
    d_max: float
    provenance: list[ProvenanceRecord | None] = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.vectors.data.shape[0]

    @property
    def c_z(self) -> int:
        return self.vectors.data.shape[1]

    @property
    def projected(self) -> bool:
        return bool(self.provenance) and all(p is not None for p in self.provenance)

    @staticmethod
    def create(m: int, c_z: int, rng: np.random.Generator,
               label_lo: float = 0.1, label_hi: float = 5.9) -> "PrototypeBank":
        # init in the interior of the latent range, away from sigmoid saturation
        vectors = Tensor(rng.uniform(0.2, 0.8, size=(m, c_z)), requires_grad=True)
        labels = assign_prototype_labels(m, label_lo, label_hi)
        return PrototypeBank(vectors=vectors, labels=labels,
                             d_max=compute_d_max(c_z), provenance=[None] * m)


def distance_map(latent: Tensor, bank: PrototypeBank) -> Tensor:
    """(N,c_z,h,w) latent vs (m,c_z) prototypes -> (N,m,h,w) squared distances."""
    if latent.data.shape[1] != bank.c_z:
        raise ShapeError(
            f"latent depth {latent.data.shape[1]} != prototype depth {bank.c_z}"
        )
    return latent.proto_sqdist(bank.vectors)


def min_pool(dmap: Tensor) -> tuple[Tensor, np.ndarray]:
    """Spatial minimum per prototype.

    Returns the (N,m) min-distance tensor and an (N,m,2) array of (row,col)
    argmin positions (earliest scan order on ties).
    """
    n, m, h, w = dmap.data.shape
    flat = dmap.reshape(n, m, h * w)
    d, idx = flat.min_reduce(axis=2)
    positions = np.stack([idx // w, idx % w], axis=-1)
    return d, positions


def similarity(d: Tensor, kind: str = "reciprocal", eps: float = 1e-4,
               d_max: float = 1.0) -> Tensor:
    """Map squared distances to similarities, elementwise.

    reciprocal: 1 / (d/d_max + eps) — steep near zero, so small distance
    differences translate into large similarity gaps.
    log: log((d+1)/(d+eps)), the gentler variant.
    """
    if eps <= 0:
        raise SimilarityConfigError(f"similarity eps must be > 0, got {eps}")
    if kind == "reciprocal":
        return d.scale(1.0 / d_max).add_scalar(eps).reciprocal()
    if kind == "log":
        return d.add_scalar(1.0).log().sub(d.add_scalar(eps).log())
    raise SimilarityConfigError(f"unknown similarity kind {kind!r}")


def similarity_np(d: np.ndarray, kind: str, eps: float, d_max: float) -> np.ndarray:
    """Plain-array version of similarity() for explanation rendering."""
    if kind == "reciprocal":
        return 1.0 / (d / d_max + eps)
    if kind == "log":
        return np.log((d + 1.0) / (d + eps))
    raise SimilarityConfigError(f"unknown similarity kind {kind!r}")
