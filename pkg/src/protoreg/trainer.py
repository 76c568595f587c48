"""Three-stage training protocol and prototype projection.

Each cycle runs: joint training of the backbone and prototypes with the
head frozen (the first cycle starts with warm-up epochs that only touch
the prototypes and the final conv block), then projection of every
prototype onto its nearest training patch, then head-only training.
Freezing is bitwise: a frozen group has requires_grad cleared for the
stage, so it neither receives gradients nor moves.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .data import SynthDataset, augment_batch
from .engine import Adam, Tensor, no_grad
from .model import Model
from .prototypes import ProvenanceRecord


@dataclass(frozen=True)
class TrainSchedule:
    cycles: int = 2
    joint_epochs: int = 20
    lastlayer_epochs: int = 10
    warmup_epochs: int = 5
    pretrain_epochs: int = 0
    lr_backbone: float = 1e-5
    lr_protolayer: float = 1e-3
    lr_head: float = 1e-3
    lr_pretrain: float = 5e-3
    batch_size: int = 30
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if self.warmup_epochs > self.joint_epochs:
            raise ValueError("warmup_epochs cannot exceed joint_epochs")


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    projections: list[dict] = field(default_factory=list)

    def csv_rows(self) -> list[str]:
        header = "cycle,stage,epoch,mse,clst,psd,total"
        rows = [header]
        for e in self.epochs:
            rows.append(
                f"{e['cycle']},{e['stage']},{e['epoch']},"
                f"{e['mse']!r},{e['clst']!r},{e['psd']!r},{e['total']!r}"
            )
        return rows


@contextlib.contextmanager
def _frozen(params: list[Tensor]):
    prev = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, was in zip(params, prev):
            p.requires_grad = was


def kfold_split(n: int, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """k disjoint (train, val) index splits; fold sizes differ by at most 1."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > n:
        raise ValueError(f"cannot make {k} folds from {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i in range(k):
        val = np.sort(folds[i])
        train = np.sort(np.concatenate([folds[j] for j in range(k) if j != i]))
        out.append((train, val))
    return out


def _batch_loss(model: Model, images: np.ndarray, y: np.ndarray, cfg_loss: dict,
                weights: losses.LossWeights):
    result = model.forward(Tensor(images))
    mse_t = losses.mse(result.y_hat, y)
    clst_t = losses.cluster_loss(
        result.dmin, y, model.bank.labels, cfg_loss["k"], cfg_loss["delta_l"]
    )
    psd_t = losses.psd_loss(result.dmin, model.bank.d_max)
    total = losses.total_loss(mse_t, clst_t, psd_t, weights)
    return total, mse_t.item(), clst_t.item(), psd_t.item()


def _run_epochs(model: Model, data: SynthDataset, cfg_loss: dict,
                weights: losses.LossWeights, optimizers: list[Adam],
                frozen: list[Tensor], epochs: int, rng: np.random.Generator,
                schedule: TrainSchedule, log: TrainLog, cycle: int, stage: str,
                epoch_offset: int = 0):
    n = len(data)
    all_params = model.params()
    with _frozen(frozen):
        for epoch in range(epochs):
            order = rng.permutation(n)
            sums = np.zeros(3)
            batches = 0
            for start in range(0, n, schedule.batch_size):
                idx = order[start : start + schedule.batch_size]
                images = data.images[idx]
                if schedule.augment:
                    images = augment_batch(images, rng)
                total, m, c, p = _batch_loss(model, images, data.y[idx], cfg_loss, weights)
                if not np.isfinite(total.data).all():
                    raise FloatingPointError(
                        f"non-finite loss at cycle {cycle}, stage {stage}, epoch {epoch}"
                    )
                total.backward()
                for opt in optimizers:
                    opt.step()
                for param in all_params:
                    param.grad = None
                sums += (m, c, p)
                batches += 1
            mse_avg, clst_avg, psd_avg = sums / batches
            log.epochs.append({
                "cycle": cycle, "stage": stage, "epoch": epoch_offset + epoch,
                "mse": mse_avg, "clst": clst_avg, "psd": psd_avg,
                "total": weights.alpha_mse * mse_avg + weights.alpha_clst * clst_avg
                         + weights.alpha_psd * psd_avg,
            })


def joint_stage(model: Model, data: SynthDataset, cfg_loss: dict,
                weights: losses.LossWeights, schedule: TrainSchedule,
                rng: np.random.Generator, log: TrainLog, cycle: int,
                warmup_epochs: int = 0):
    """Train backbone + prototypes with theta frozen; warm-up epochs touch
    only the prototypes and the final conv block."""
    added = model.backbone.added_block_params()
    added_ids = {id(p) for p in added}
    trunk = [p for p in model.backbone.params() if id(p) not in added_ids]
    opt_trunk = Adam(trunk, schedule.lr_backbone)
    opt_added = Adam(added, schedule.lr_protolayer)
    opt_proto = Adam([model.bank.vectors], schedule.lr_protolayer)
    if warmup_epochs > 0:
        _run_epochs(model, data, cfg_loss, weights, [opt_added, opt_proto],
                    frozen=trunk + [model.theta], epochs=warmup_epochs, rng=rng,
                    schedule=schedule, log=log, cycle=cycle, stage="warmup")
    remaining = schedule.joint_epochs - warmup_epochs
    if remaining > 0:
        _run_epochs(model, data, cfg_loss, weights, [opt_trunk, opt_added, opt_proto],
                    frozen=[model.theta], epochs=remaining, rng=rng,
                    schedule=schedule, log=log, cycle=cycle, stage="joint",
                    epoch_offset=warmup_epochs)


def lastlayer_stage(model: Model, data: SynthDataset, cfg_loss: dict,
                    weights: losses.LossWeights, schedule: TrainSchedule,
                    rng: np.random.Generator, log: TrainLog, cycle: int):
    """Train theta only; backbone and prototypes stay bitwise fixed."""
    opt_head = Adam([model.theta], schedule.lr_head)
    frozen = model.backbone.params() + [model.bank.vectors]
    _run_epochs(model, data, cfg_loss, weights, [opt_head], frozen=frozen,
                epochs=schedule.lastlayer_epochs, rng=rng, schedule=schedule,
                log=log, cycle=cycle, stage="lastlayer")


def project_prototypes(model: Model, data: SynthDataset) -> list[dict]:
    """Replace each prototype by its nearest training latent patch.

    Ties resolve to the earliest (sample, row, col) in scan order. Labels
    are untouched. Returns one report entry per prototype.
    """
    if len(data) == 0:
        raise ValueError("cannot project prototypes onto an empty training set")
    latents = model.latents_np(data.images)  # (N, c_z, h, w)
    n, c_z, h, w = latents.shape
    # (N*h*w, c_z), sample-major then row-major spatial: scan order for ties
    patches = latents.transpose(0, 2, 3, 1).reshape(-1, c_z)
    report = []
    vec = model.bank.vectors.data
    for j in range(model.bank.m):
        diff = patches - vec[j]
        dists = np.einsum("pc,pc->p", diff, diff)
        flat = int(np.argmin(dists))
        sample_id, rest = divmod(flat, h * w)
        row, col = divmod(rest, w)
        moved = float(dists[flat])
        vec[j] = patches[flat]
        rec = ProvenanceRecord(sample_id=sample_id, row=row, col=col, moved_sq_dist=moved)
        model.bank.provenance[j] = rec
        report.append({
            "prototype": j, "label": float(model.bank.labels[j]),
            "sample_id": sample_id, "row": row, "col": col, "moved_sq_dist": moved,
        })
    return report


def run_protocol(model: Model, data: SynthDataset, cfg_loss: dict,
                 weights: losses.LossWeights, schedule: TrainSchedule,
                 stage_callback=None) -> TrainLog:
    """Run the full protocol in place; returns the per-epoch log.

    stage_callback(stage_name, cycle, model), when given, fires after each
    completed stage (used by the CLI to write per-stage checkpoints).
    """
    if len(data) == 0 and schedule.cycles > 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(schedule.seed)
    log = TrainLog()
    if schedule.pretrain_epochs > 0:
        pretrain_stage(model, data, schedule, rng, log)
        model.cursor = {"cycle": -1, "stage": "pretrain"}
        if stage_callback:
            stage_callback("pretrain", -1, model)
    for cycle in range(schedule.cycles):
        warmup = schedule.warmup_epochs if cycle == 0 else 0
        joint_stage(model, data, cfg_loss, weights, schedule, rng, log, cycle,
                    warmup_epochs=warmup)
        model.cursor = {"cycle": cycle, "stage": "joint"}
        if stage_callback:
            stage_callback("joint", cycle, model)
        report = project_prototypes(model, data)
        log.projections.append({"cycle": cycle, "prototypes": report})
        model.cursor = {"cycle": cycle, "stage": "projection"}
        if stage_callback:
            stage_callback("projection", cycle, model)
        lastlayer_stage(model, data, cfg_loss, weights, schedule, rng, log, cycle)
        model.cursor = {"cycle": cycle, "stage": "lastlayer"}
        if stage_callback:
            stage_callback("lastlayer", cycle, model)
    return log


def _fit_plain_regressor(backbone, data: SynthDataset, epochs: int, lr: float,
                         batch_size: int, rng: np.random.Generator):
    """Train backbone + mean-pool + linear head on plain MSE, in place.

    Returns (forward closure, train MSE at last epoch).
    """
    c_z = backbone.config.c_z
    w_lin = Tensor(rng.normal(0.0, 0.1, size=c_z), requires_grad=True)
    b_lin = Tensor(np.array([np.mean(data.y)]), requires_grad=True)
    params = backbone.params() + [w_lin, b_lin]
    opt = Adam(params, lr)

    def forward(images: np.ndarray) -> Tensor:
        latent = backbone.forward(Tensor(images))
        n_b, c, h, w = latent.data.shape
        pooled = latent.reshape(n_b, c, h * w).mean(axis=2)  # (n, c_z)
        return (pooled.mul(w_lin.expand_rows(n_b)).sum(axis=1)
                .add(b_lin.expand_rows(n_b).reshape(n_b)))

    n = len(data)
    last_mse = np.inf
    for _ in range(epochs):
        order = rng.permutation(n)
        sums, batches = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss = losses.mse(forward(data.images[idx]), data.y[idx])
            loss.backward()
            opt.step()
            for p in params:
                p.grad = None
            sums += loss.item()
            batches += 1
        last_mse = sums / batches
    return forward, last_mse


def pretrain_stage(model: Model, data: SynthDataset, schedule: TrainSchedule,
                   rng: np.random.Generator, log: TrainLog):
    """Fit the backbone on plain regression before the prototype protocol.

    Uses a throwaway mean-pool linear head that is discarded afterwards;
    only the backbone weights carry over into the three-stage protocol.
    """
    _, last_mse = _fit_plain_regressor(
        model.backbone, data, schedule.pretrain_epochs, schedule.lr_pretrain,
        schedule.batch_size, rng,
    )
    log.epochs.append({
        "cycle": -1, "stage": "pretrain", "epoch": schedule.pretrain_epochs - 1,
        "mse": last_mse, "clst": 0.0, "psd": 0.0, "total": last_mse,
    })


def train_baseline(backbone_config, data: SynthDataset, test: SynthDataset,
                   epochs: int = 30, lr: float = 3e-3, batch_size: int = 30,
                   seed: int = 0) -> tuple[float, float]:
    """Plain CNN regressor fixture: same backbone, average pool, linear head.

    Returns (test MAE, train MSE at last epoch). Used as the reference
    point the prototype model is compared against.
    """
    from .backbone import Backbone

    rng = np.random.default_rng(seed)
    backbone = Backbone(backbone_config, rng)
    forward, last_mse = _fit_plain_regressor(backbone, data, epochs, lr,
                                             batch_size, rng)
    with no_grad():
        preds = []
        for start in range(0, len(test), 64):
            preds.append(forward(test.images[start : start + 64]).data)
    mae = float(np.mean(np.abs(np.concatenate(preds) - test.y)))
    return mae, last_mse
