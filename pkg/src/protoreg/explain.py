"""Per-sample prediction explanations.

An explanation decomposes a prediction into per-prototype contributions
(similarity, importance, weight, weight fraction) sorted by weight, and
attaches per-prototype activation maps: the similarity function applied
entrywise to that prototype's distance map, bilinearly upsampled to input
resolution.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor, no_grad
from .head import contribution_weights, importance
from .model import Model
from .prototypes import similarity_np


@dataclass
class PrototypeContribution:
    index: int
    label: float
    similarity: float
    importance: float
    weight: float
    weight_fraction: float
    argmin_row: int
    argmin_col: int
    activation_map: np.ndarray  # upsampled to input resolution
    provenance: dict | None


@dataclass
class Explanation:
    sample_id: int
    y_hat: float
    y: float
    top_k: int
    records: list[PrototypeContribution]
    all_fractions: np.ndarray  # over all m prototypes, sums to 1
    top3_cumulative_fraction: float
    projected: bool  # False => provenance unavailable, maps still valid

    def to_json_dict(self, embed_maps: bool = False) -> dict:
        recs = []
        for r in self.records:
            entry = {
                "prototype": r.index,
                "label": r.label,
                "similarity": r.similarity,
                "importance": r.importance,
                "weight": r.weight,
                "weight_fraction": r.weight_fraction,
                "argmin": [r.argmin_row, r.argmin_col],
                "provenance": r.provenance,
            }
            if embed_maps:
                entry["activation_map_pgm_base64"] = base64.b64encode(
                    to_pgm_bytes(r.activation_map)
                ).decode()
            recs.append(entry)
        return {
            "sample_id": self.sample_id,
            "y_hat": self.y_hat,
            "y": self.y,
            "top_k": self.top_k,
            "projected": self.projected,
            "top3_cumulative_fraction": self.top3_cumulative_fraction,
            "records": recs,
        }


def bilinear_upsample(grid: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Align-corners bilinear interpolation of a 2-D array."""
    in_h, in_w = grid.shape
    out_h, out_w = out_hw
    ys = np.linspace(0.0, in_h - 1, out_h)
    xs = np.linspace(0.0, in_w - 1, out_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 2) if in_h > 1 else np.zeros(out_h, int)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 2) if in_w > 1 else np.zeros(out_w, int)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    a = grid[np.ix_(y0, x0)]
    b = grid[np.ix_(y0, np.minimum(x0 + 1, in_w - 1))]
    c = grid[np.ix_(np.minimum(y0 + 1, in_h - 1), x0)]
    d = grid[np.ix_(np.minimum(y0 + 1, in_h - 1), np.minimum(x0 + 1, in_w - 1))]
    return (a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx
            + c * wy * (1 - wx) + d * wy * wx)


def to_pgm_bytes(values: np.ndarray) -> bytes:
    """Render a 2-D map as a binary portable graymap (P5), max-normalized."""
    lo, hi = float(values.min()), float(values.max())
    scaled = np.zeros_like(values) if hi <= lo else (values - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    header = f"P5\n{values.shape[1]} {values.shape[0]}\n255\n".encode()
    return header + pixels.tobytes()


def contribution_order(w: np.ndarray) -> np.ndarray:
    """Indices sorted by weight descending, ties by prototype index ascending."""
    return np.lexsort((np.arange(w.size), -w))


def explain(image: np.ndarray, sample_id: int, y: float, model: Model,
            top_k: int = 3) -> Explanation:
    """Build the explanation for a single (C,H,W) image."""
    with no_grad():
        result = model.forward(Tensor(image[None]))
    dmap = result.dmap.data[0]  # (m, h_z, w_z)
    s = result.s.data[0]
    argmin = result.argmin[0]
    r = importance(model.theta.data, model.bank.labels)
    w, fractions = contribution_weights(s, r)
    order = contribution_order(w)
    sorted_fracs = fractions[order]
    projected = model.bank.projected
    in_hw = image.shape[1], image.shape[2]

    records = []
    for rank in range(min(top_k, model.bank.m)):
        j = int(order[rank])
        act = similarity_np(dmap[j], model.similarity_kind, model.eps, model.bank.d_max)
        prov = model.bank.provenance[j]
        records.append(PrototypeContribution(
            index=j,
            label=float(model.bank.labels[j]),
            similarity=float(s[j]),
            importance=float(r[j]),
            weight=float(w[j]),
            weight_fraction=float(fractions[j]),
            argmin_row=int(argmin[j, 0]),
            argmin_col=int(argmin[j, 1]),
            activation_map=bilinear_upsample(act, in_hw),
            provenance=None if prov is None else {
                "sample_id": prov.sample_id, "row": prov.row, "col": prov.col,
            },
        ))
    return Explanation(
        sample_id=sample_id,
        y_hat=float(result.y_hat.data[0]),
        y=float(y),
        top_k=top_k,
        records=records,
        all_fractions=fractions,
        top3_cumulative_fraction=float(np.sum(sorted_fracs[:3])),
        projected=projected,
    )
