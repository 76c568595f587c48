"""The assembled network and its single-file checkpoint format.

Checkpoint layout (little-endian):
    magic  b"PRCK1"
    u32 format version (currently 1)
    u64 header length in bytes
    header: UTF-8 JSON with sorted keys — resolved config, stage cursor,
            prototype labels, provenance, tensor manifest (name, shape)
    f64 tensor payloads in manifest order

Loading a checkpoint rebuilds a model whose forward outputs are bitwise
identical to the saved one.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import head as head_mod
from .backbone import Backbone, BackboneConfig, ConvSpec
from .engine import Tensor, no_grad
from .prototypes import (
    PrototypeBank,
    ProvenanceRecord,
    distance_map,
    min_pool,
    similarity,
)

CHECKPOINT_MAGIC = b"PRCK1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ForwardResult:
    dmap: Tensor  # (N, m, h_z, w_z) squared distances
    dmin: Tensor  # (N, m) min-pooled distances
    argmin: np.ndarray  # (N, m, 2) spatial argmin positions
    s: Tensor  # (N, m) similarities
    y_hat: Tensor  # (N,) predictions


@dataclass
class Model:
    backbone: Backbone
    bank: PrototypeBank
    theta: Tensor
    similarity_kind: str = "reciprocal"
    eps: float = 1e-4
    cursor: dict = field(default_factory=dict)  # last completed (cycle, stage)

    @staticmethod
    def create(backbone_config: BackboneConfig, m: int, seed: int,
               similarity_kind: str = "reciprocal", eps: float = 1e-4,
               label_lo: float = 0.1, label_hi: float = 5.9) -> "Model":
        rng = np.random.default_rng(seed)
        backbone = Backbone(backbone_config, rng)
        bank = PrototypeBank.create(m, backbone_config.c_z, rng, label_lo, label_hi)
        return Model(
            backbone=backbone,
            bank=bank,
            theta=head_mod.init_theta(bank.labels),
            similarity_kind=similarity_kind,
            eps=eps,
        )

    def params(self) -> list[Tensor]:
        return self.backbone.params() + [self.bank.vectors, self.theta]

    def forward(self, images: Tensor) -> ForwardResult:
        latent = self.backbone.forward(images)
        dmap = distance_map(latent, self.bank)
        dmin, argmin = min_pool(dmap)
        s = similarity(dmin, self.similarity_kind, self.eps, self.bank.d_max)
        y_hat = head_mod.predict(s, self.theta, self.bank.labels)
        return ForwardResult(dmap=dmap, dmin=dmin, argmin=argmin, s=s, y_hat=y_hat)

    def predict_np(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Batched no-grad prediction on a raw image array."""
        outs = []
        with no_grad():
            for start in range(0, images.shape[0], batch_size):
                outs.append(self.forward(Tensor(images[start : start + batch_size])).y_hat.data)
        return np.concatenate(outs)

    def latents_np(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        outs = []
        with no_grad():
            for start in range(0, images.shape[0], batch_size):
                outs.append(self.backbone.forward(Tensor(images[start : start + batch_size])).data)
        return np.concatenate(outs)


def _tensor_manifest(model: Model) -> list[tuple[str, Tensor]]:
    entries = []
    for i, (w, b) in enumerate(zip(model.backbone.weights, model.backbone.biases)):
        entries.append((f"backbone.w{i}", w))
        entries.append((f"backbone.b{i}", b))
    entries.append(("prototypes", model.bank.vectors))
    entries.append(("theta", model.theta))
    return entries


def save_checkpoint(model: Model, path, resolved_config: dict) -> None:
    manifest = _tensor_manifest(model)
    header = {
        "config": resolved_config,
        "cursor": model.cursor,
        "similarity_kind": model.similarity_kind,
        "eps": model.eps,
        "labels": model.bank.labels.tolist(),
        "provenance": [
            None if p is None else
            {"sample_id": p.sample_id, "row": p.row, "col": p.col,
             "moved_sq_dist": p.moved_sq_dist}
            for p in model.bank.provenance
        ],
        "tensors": [{"name": n, "shape": list(t.data.shape)} for n, t in manifest],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for _, t in manifest:
            f.write(t.data.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[Model, dict]:
    """Rebuild (model, resolved_config) from a checkpoint file."""
    with open(path, "rb") as f:
        magic = f.read(5)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        version, header_len = struct.unpack("<IQ", f.read(12))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint format version {version} "
                f"(this build reads version {CHECKPOINT_VERSION})"
            )
        header = json.loads(f.read(header_len).decode())
        payload = np.frombuffer(f.read(), dtype="<f8")

    cfg = header["config"]
    mc = cfg["model"]
    backbone_config = BackboneConfig(
        input_hw=tuple(cfg["data"]["image_hw"]),
        in_channels=cfg["data"]["channels"],
        blocks=tuple(ConvSpec(*b) for b in mc["backbone_blocks"]),
        c_z=mc["c_z"],
        latent_hw=tuple(mc["latent_hw"]),
    )
    model = Model.create(
        backbone_config, m=mc["m"], seed=mc["seed"],
        similarity_kind=header["similarity_kind"], eps=header["eps"],
        label_lo=mc["label_lo"], label_hi=mc["label_hi"],
    )
    offset = 0
    tensors = _tensor_manifest(model)
    if len(tensors) != len(header["tensors"]):
        raise CheckpointError(f"{path}: tensor manifest mismatch")
    for (name, t), meta in zip(tensors, header["tensors"]):
        if name != meta["name"] or list(t.data.shape) != meta["shape"]:
            raise CheckpointError(
                f"{path}: tensor {meta['name']} shape {meta['shape']} does not "
                f"match model tensor {name} {list(t.data.shape)}"
            )
        size = t.data.size
        t.data = payload[offset : offset + size].reshape(t.data.shape).copy()
        offset += size
    if offset != payload.size:
        raise CheckpointError(f"{path}: {payload.size - offset} trailing payload values")
    model.bank.labels = np.array(header["labels"])
    model.bank.provenance = [
        None if p is None else ProvenanceRecord(**p) for p in header["provenance"]
    ]
    model.cursor = header["cursor"]
    return model, cfg
