"""Explanation-quality metrics and latent-space reports.

Sparsity counts how many top-weight prototypes it takes to cover 80% of
the total contribution weight (lower is sparser). Diversity counts how
many prototypes show up in the top-5 contributing set of at least 1% of
test samples (higher means explanations differ across samples). The
embedding report projects selected latent patches and the prototypes into
a shared 2-D PCA basis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SynthDataset
from .explain import contribution_order
from .head import contribution_weights, importance
from .model import Model
from .prototypes import PrototypeBank


def sparsity(w: np.ndarray) -> int:
    """Smallest count of largest-weight prototypes reaching 80% cumulative weight."""
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise ValueError("sparsity undefined for all-zero weights")
    ordered = w[contribution_order(w)]
    cumulative = np.cumsum(ordered)
    return int(np.searchsorted(cumulative, 0.8 * total - 1e-12) + 1)


def top_contributor_set(w: np.ndarray, size: int = 5) -> frozenset[int]:
    return frozenset(int(i) for i in contribution_order(w)[: min(size, w.size)])


def diversity(top5_sets: list[frozenset[int]], m: int, threshold: float = 0.01) -> int:
    """Number of prototypes in the top-5 set of >= threshold of the samples."""
    if not top5_sets:
        raise ValueError("diversity needs a non-empty test set")
    counts = np.zeros(m)
    for s in top5_sets:
        for j in s:
            counts[j] += 1
    return int(np.sum(counts >= threshold * len(top5_sets) - 1e-12))


def usage_histogram(top5_sets: list[frozenset[int]], m: int) -> np.ndarray:
    """Per-prototype frequency of top-5 membership, normalized to sum to 1."""
    if not top5_sets:
        raise ValueError("usage histogram needs a non-empty test set")
    counts = np.zeros(m)
    for s in top5_sets:
        for j in s:
            counts[j] += 1
    set_size = min(5, m)
    return counts / (set_size * len(top5_sets))


@dataclass
class EmbeddingReport:
    # rows: (point id, kind, x, y, label); kinds are "sample" and "prototype"
    points: list[tuple[str, str, float, float, float]]
    explained_variance: tuple[float, float]
    histogram: np.ndarray


def pca_2d(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """2-component PCA: returns (coords, components (2,d), explained-variance fractions).

    Components are ordered by descending variance; each component's
    largest-magnitude loading is forced positive so output is deterministic.
    """
    if points.shape[0] < 2:
        raise ValueError("PCA needs at least 2 points")
    centered = points - points.mean(axis=0)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    if svals.size < 2 or svals[1] <= 1e-12 * max(svals[0], 1.0):
        raise ValueError("point cloud is rank-deficient; 2-D PCA is degenerate")
    comps = vt[:2]
    for i in range(2):
        lead = np.argmax(np.abs(comps[i]))
        if comps[i, lead] < 0:
            comps[i] = -comps[i]
    var = svals**2
    evr = var[:2] / var.sum()
    return centered @ comps.T, comps, evr


def pca_embed(patches: np.ndarray, patch_sample_ids: np.ndarray,
              patch_labels: np.ndarray, bank: PrototypeBank,
              top5_sets: list[frozenset[int]], per_sample_select: int = 5) -> EmbeddingReport:
    """Project the most prototype-adjacent patches plus prototypes into 2-D.

    For each sample only its per_sample_select patches with the smallest
    distance to any prototype are kept.
    """
    protos = bank.vectors.data
    d2 = ((patches[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2).min(axis=1)
    keep = []
    for sid in np.unique(patch_sample_ids):
        rows = np.flatnonzero(patch_sample_ids == sid)
        order = rows[np.argsort(d2[rows], kind="stable")]
        keep.extend(order[:per_sample_select])
    keep = np.array(sorted(keep))
    cloud = np.vstack([patches[keep], protos])
    coords, _, evr = pca_2d(cloud)
    points = []
    for row, p in enumerate(keep):
        points.append((
            f"sample{int(patch_sample_ids[p])}_patch{int(p)}", "sample",
            float(coords[row, 0]), float(coords[row, 1]), float(patch_labels[p]),
        ))
    for j in range(bank.m):
        row = len(keep) + j
        points.append((
            f"prototype{j}", "prototype",
            float(coords[row, 0]), float(coords[row, 1]), float(bank.labels[j]),
        ))
    return EmbeddingReport(
        points=points,
        explained_variance=(float(evr[0]), float(evr[1])),
        histogram=usage_histogram(top5_sets, bank.m),
    )


def per_sample_weights(model: Model, dataset: SynthDataset,
                       batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """(y_hat, W) where W[i] holds sample i's contribution weights."""
    from .engine import Tensor, no_grad

    r = importance(model.theta.data, model.bank.labels)
    y_hat, weights = [], []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            result = model.forward(Tensor(dataset.images[start : start + batch_size]))
            y_hat.append(result.y_hat.data)
            for s_row in result.s.data:
                w, _ = contribution_weights(s_row, r)
                weights.append(w)
    return np.concatenate(y_hat), np.vstack(weights)


def evaluate(model: Model, dataset: SynthDataset, grades: int = 5) -> dict:
    """MAE, rounded accuracy, mean sparsity and diversity on a labeled set."""
    y_hat, weights = per_sample_weights(model, dataset)
    mae = float(np.mean(np.abs(y_hat - dataset.y)))
    # accuracy against the categorical grade, on the unshifted scale
    reported = np.clip(np.round(y_hat - 1.0), 0, grades - 1)
    accuracy = float(np.mean(reported == dataset.y_categorical - 1.0))
    spars = [sparsity(w) for w in weights]
    sets = [top_contributor_set(w) for w in weights]
    return {
        "mae": mae,
        "accuracy": accuracy,
        "s_spars_mean": float(np.mean(spars)),
        "diversity": diversity(sets, model.bank.m),
        "n_samples": len(dataset),
    }
