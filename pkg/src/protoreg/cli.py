"""Command line surface.

Subcommands: gen-data, train, eval, explain, embed, ablate, grad-check.
Every command echoes the fully resolved config into its output directory.
Relative --out paths are placed under $PROTOREG_OUT_ROOT when it is set;
$PROTOREG_THREADS sets the default ablation worker count.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import data as data_mod
from . import gradcheck, metrics, reports, trainer
from .explain import explain, to_pgm_bytes
from .losses import LossWeights
from .model import Model, load_checkpoint, save_checkpoint


def _out_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get("PROTOREG_OUT_ROOT")
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_cfg(path: str | None) -> dict:
    return config_mod.load_config(path) if path else config_mod.resolve_config()


def _resolve_split(path: str, split: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / f"{split}.insd"
    if not p.exists():
        raise FileNotFoundError(f"dataset file not found: {p}")
    return p


def _build_model(cfg: dict) -> Model:
    mc = cfg["model"]
    return Model.create(
        config_mod.backbone_config_from(cfg),
        m=mc["m"], seed=mc["seed"],
        similarity_kind=mc["similarity"], eps=mc["eps"],
        label_lo=mc["label_lo"], label_hi=mc["label_hi"],
    )


def _schedule(cfg: dict) -> trainer.TrainSchedule:
    t = cfg["train"]
    return trainer.TrainSchedule(
        cycles=t["cycles"], joint_epochs=t["joint_epochs"],
        lastlayer_epochs=t["lastlayer_epochs"], warmup_epochs=t["warmup_epochs"],
        pretrain_epochs=t["pretrain_epochs"],
        lr_backbone=t["lr_backbone"], lr_protolayer=t["lr_protolayer"],
        lr_head=t["lr_head"], lr_pretrain=t["lr_pretrain"],
        batch_size=t["batch_size"], seed=t["seed"],
        augment=cfg["data"]["augment"],
    )


def train_run(cfg: dict, train_ds, out: Path | None = None) -> tuple[Model, trainer.TrainLog]:
    """Train a model from a resolved config; optionally write artifacts."""
    model = _build_model(cfg)
    weights = config_mod.loss_weights_from(cfg)
    schedule = _schedule(cfg)

    callback = None
    if out is not None:
        def callback(stage, cycle, model_):
            save_checkpoint(model_, out / f"checkpoint_c{cycle}_{stage}.bin", cfg)

    log = trainer.run_protocol(model, train_ds, cfg["loss"], weights, schedule,
                               stage_callback=callback)
    if out is not None:
        save_checkpoint(model, out / "checkpoint.bin", cfg)
        (out / "training_log.csv").write_text("\n".join(log.csv_rows()) + "\n")
        (out / "projection_report.json").write_text(
            json.dumps(log.projections, indent=2, sort_keys=True) + "\n")
        config_mod.save_config(cfg, out / "resolved_config.json")
    return model, log


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args.config)
    out = _out_dir(args.out)
    scfg = config_mod.synth_config_from(cfg)
    train_ds, test_ds = data_mod.make_splits(scfg)
    if cfg["data"]["continuous"]:
        train_ds = data_mod.continuous_labels(train_ds, cfg["data"]["continuous_seed"])
    data_mod.save_dataset(train_ds, out / "train.insd")
    data_mod.save_dataset(test_ds, out / "test.insd")
    config_mod.save_config(cfg, out / "resolved_config.json")
    print(f"wrote {out / 'train.insd'} ({len(train_ds)} samples) and "
          f"{out / 'test.insd'} ({len(test_ds)} samples)")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args.config)
    out = _out_dir(args.out)
    train_ds = data_mod.load_dataset(_resolve_split(args.data, "train"), split="train")
    train_run(cfg, train_ds, out)
    print(f"wrote {out / 'checkpoint.bin'}")
    return 0


def _evaluate_to_dir(model: Model, cfg: dict, test_ds, out: Path) -> dict:
    result = metrics.evaluate(model, test_ds, grades=cfg["data"]["grades"])
    (out / "metrics.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    y_hat, weights = metrics.per_sample_weights(model, test_ds)
    lines = ["sample_id,y,y_hat,abs_err,s_spars"]
    for i in range(len(test_ds)):
        lines.append(f"{i},{test_ds.y[i]!r},{y_hat[i]!r},"
                     f"{abs(y_hat[i] - test_ds.y[i])!r},{metrics.sparsity(weights[i])}")
    (out / "per_sample.csv").write_text("\n".join(lines) + "\n")
    config_mod.save_config(cfg, out / "resolved_config.json")
    return result


def cmd_eval(args) -> int:
    model, cfg = load_checkpoint(args.checkpoint)
    out = _out_dir(args.out)
    test_ds = data_mod.load_dataset(_resolve_split(args.data, "test"), split="test")
    result = _evaluate_to_dir(model, cfg, test_ds, out)
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def cmd_explain(args) -> int:
    model, cfg = load_checkpoint(args.checkpoint)
    out = _out_dir(args.out)
    test_ds = data_mod.load_dataset(_resolve_split(args.data, "test"), split="test")
    sample_ids = [int(s) for s in args.sample_ids.split(",")]
    for sid in sample_ids:
        if not 0 <= sid < len(test_ds):
            raise IndexError(f"sample id {sid} out of range [0,{len(test_ds)})")
        exp = explain(test_ds.images[sid], sid, float(test_ds.y[sid]), model,
                      top_k=args.top_k)
        if not exp.projected:
            print(f"warning: checkpoint not projected, sample {sid} has no provenance",
                  file=sys.stderr)
        doc = exp.to_json_dict()
        for r in doc["records"]:
            rec = next(x for x in exp.records if x.index == r["prototype"])
            map_name = f"sample{sid}_proto{r['prototype']}.pgm"
            (out / map_name).write_bytes(to_pgm_bytes(rec.activation_map))
            r["activation_map_file"] = map_name
        (out / f"explanation_{sid}.json").write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n")
    config_mod.save_config(cfg, out / "resolved_config.json")
    print(f"wrote {len(sample_ids)} explanations to {out}")
    return 0


def cmd_embed(args) -> int:
    model, cfg = load_checkpoint(args.checkpoint)
    out = _out_dir(args.out)
    test_ds = data_mod.load_dataset(_resolve_split(args.data, "test"), split="test")
    latents = model.latents_np(test_ds.images)
    n, c_z, h, w = latents.shape
    patches = latents.transpose(0, 2, 3, 1).reshape(-1, c_z)
    sample_ids = np.repeat(np.arange(n), h * w)
    patch_labels = np.repeat(test_ds.y, h * w)
    _, weights = metrics.per_sample_weights(model, test_ds)
    top5 = [metrics.top_contributor_set(w_row) for w_row in weights]
    report = metrics.pca_embed(patches, sample_ids, patch_labels, model.bank, top5)
    (out / "embedding.csv").write_text(reports.embedding_csv(report))
    (out / "embedding.svg").write_text(reports.embedding_svg(report))
    (out / "usage_histogram.svg").write_text(reports.histogram_svg(report.histogram))
    config_mod.save_config(cfg, out / "resolved_config.json")
    print(f"wrote embedding report to {out}")
    return 0


ABLATION_VARIANTS = [
    ("base", {}),
    ("log_similarity", {"model": {"similarity": "log"}}),
    ("no_psd", {"loss": {"alpha_psd": 0.0}}),
    ("no_clst", {"loss": {"alpha_clst": 0.0}}),
    ("no_clst_no_psd", {"loss": {"alpha_clst": 0.0, "alpha_psd": 0.0}}),
    ("k1", {"loss": {"k": 1}}),
]


def _deep_update(base: dict, override: dict) -> dict:
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in base.items()}
    for key, value in override.items():
        if isinstance(value, dict):
            out[key] = _deep_update(out.get(key, {}), value)
        else:
            out[key] = value
    return out


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args.config)
    out = _out_dir(args.out)
    train_ds = data_mod.load_dataset(_resolve_split(args.data, "train"), split="train")
    test_ds = data_mod.load_dataset(_resolve_split(args.data, "test"), split="test")
    threads = args.threads or int(os.environ.get("PROTOREG_THREADS", "1"))
    cells = []
    for name, override in ABLATION_VARIANTS:
        for s in range(args.seeds):
            cell_cfg = config_mod.resolve_config(_deep_update(
                {k: v for k, v in cfg.items()}, override))
            cell_cfg["train"]["seed"] = cfg["train"]["seed"] + s
            cell_cfg["model"]["seed"] = cfg["model"]["seed"] + s
            cells.append((name, cell_cfg))

    def run_cell(cell):
        name, cell_cfg = cell
        model, _ = train_run(cell_cfg, train_ds)
        result = metrics.evaluate(model, test_ds, grades=cell_cfg["data"]["grades"])
        return {
            "variant": name,
            "similarity": cell_cfg["model"]["similarity"],
            "alpha_clst": cell_cfg["loss"]["alpha_clst"],
            "alpha_psd": cell_cfg["loss"]["alpha_psd"],
            "k": cell_cfg["loss"]["k"],
            "seed": cell_cfg["train"]["seed"],
            **{k: result[k] for k in ("mae", "accuracy", "s_spars_mean", "diversity")},
        }

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run_cell, cells))
    else:
        rows = [run_cell(c) for c in cells]
    (out / "ablation.csv").write_text(reports.ablation_csv(rows))
    (out / "ablation.md").write_text(reports.ablation_markdown(rows))
    config_mod.save_config(cfg, out / "resolved_config.json")
    print((out / "ablation.md").read_text())
    return 0


def cmd_grad_check(args) -> int:
    cfg = _load_cfg(args.config)
    results = gradcheck.run_suites(seed=cfg["model"]["seed"])
    ok = True
    for r in results:
        status = "PASS" if r["passed"] else "FAIL"
        print(f"{status}  {r['suite']:<22} max rel error {r['max_rel_error']:.3e} "
              f"(tolerance {r['tolerance']:.0e})")
        ok = ok and r["passed"]
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoreg",
        description="Prototype-based interpretable regression: data, training, "
                    "evaluation, explanations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic train/test splits")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the full training protocol")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="train.insd file or gen-data output dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="test.insd file or gen-data output dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="export per-sample explanations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample-ids", required=True, help="comma-separated sample indices")
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("embed", help="export the 2-D latent embedding report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("ablate", help="run the ablation matrix and emit CSV/Markdown")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--threads", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--config")
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, IndexError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
