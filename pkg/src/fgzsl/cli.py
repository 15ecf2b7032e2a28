"""Command-line frontend over the pipeline stages.

Subcommands map one-to-one onto the library operations: gen-data,
cluster, train, eval, ablate, sweep, export-attn. A JSON config file
with flat dotted keys feeds PipelineConfig; repeated `--set key=value`
flags override file values. Every run writes a run_metadata.json echo of
its resolved inputs under the output directory, and nothing is written
anywhere else. Exit codes: 0 success, 1 validation error, 2 numeric
error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attention import RegionFeatureGrid, extract_features, export_attention_heatmap
from .data import (
    SyntheticWorldSpec,
    generate_synthetic_world,
    load_dataset,
    save_checkpoint,
)
from .errors import (
    DomainError,
    FormatError,
    FreezeError,
    NumericError,
    OovError,
    ShapeError,
    StateError,
)
from .pipeline import (
    AblationVariant,
    PipelineConfig,
    build_semantics,
    evaluate,
    load_model,
    run_ablation,
    run_pipeline,
    save_model,
    sweep_hyperparams,
)

log = logging.getLogger("fgzsl")

# dotted config surface -> PipelineConfig field
CONFIG_KEYS = {
    "k": "k_channels",
    "lambda_sc": "lambda_sc",
    "leaky_slope": "leaky_slope",
    "seed": "seed",
    "use_global": "use_global",
    "stage1.epochs": "stage1_epochs",
    "stage1.lr": "stage1_lr",
    "stage1.weight_decay": "stage1_weight_decay",
    "stage1.batch_size": "batch_size",
    "gcn.layers": "gcn_layers",
    "gcn.epochs": "gcn_epochs",
    "gcn.lr": "gcn_lr",
    "gcn.weight_decay": "gcn_weight_decay",
    "gcn.dropout": "gcn_dropout",
    "gcn.hidden": "gcn_hidden",
    "stage2.epochs": "stage2_epochs",
    "stage2.lr": "stage2_lr",
    "stage2.momentum": "stage2_momentum",
    "stage2.train_attention": "stage2_train_attention",
    "eval.mode": "eval_mode",
    "eval.topk": "topk",
    "skip.stage1": "skip_stage1",
    "skip.stage2": "skip_stage2",
    "kmeans.restarts": "kmeans_restarts",
    "kmeans.max_iters": "kmeans_max_iters",
    "kmeans.tol": "kmeans_tol",
    "cluster_unseen_phrases": "cluster_unseen_phrases",
    "calibrate_to_similarity": "calibrate_to_similarity",
}

VALIDATION_ERRORS = (
    DomainError, FormatError, ShapeError, StateError, FreezeError, OovError,
    FileNotFoundError, IsADirectoryError,
)


def _parse_value(key: str, raw):
    if key == "eval.topk":
        if isinstance(raw, (list, tuple)):
            return tuple(int(x) for x in raw)
        return tuple(int(x) for x in str(raw).split(","))
    if isinstance(raw, str):
        try:
            return json.loads(raw)
        except json.JSONDecodeError:
            return raw
    return raw


def build_config(config_path: str | None, overrides: list[str] | None) -> PipelineConfig:
    """Resolve config file plus `key=value` overrides into a PipelineConfig."""
    values: dict[str, object] = {}
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{config_path}: {exc}") from None
        if not isinstance(doc, dict):
            raise FormatError(f"{config_path}: config must be a JSON object")
        for key, raw in doc.items():
            if key not in CONFIG_KEYS:
                raise DomainError(f"unknown config key {key!r}")
            values[CONFIG_KEYS[key]] = _parse_value(key, raw)
    for item in overrides or []:
        if "=" not in item:
            raise DomainError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        if key not in CONFIG_KEYS:
            raise DomainError(f"unknown config key {key!r}")
        values[CONFIG_KEYS[key]] = _parse_value(key, raw)
    return PipelineConfig(**values)


def _prepare_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_metadata(out: Path, command: str, args, config: PipelineConfig | None,
                    outputs: list[str]) -> None:
    doc = {
        "command": command,
        "version": __version__,
        "arguments": {
            k: (str(v) if isinstance(v, Path) else v)
            for k, v in sorted(vars(args).items()) if k != "func"
        },
        "config": config.to_dict() if config else None,
        "outputs": sorted(outputs),
    }
    (out / "run_metadata.json").write_text(
        json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def cmd_gen_data(args) -> int:
    out = _prepare_out(args)
    spec = SyntheticWorldSpec(
        n_attributes=args.n_attributes, values_per_attribute=args.values_per_attribute,
        n_seen=args.n_seen, n_unseen=args.n_unseen,
        samples_per_class=args.samples_per_class, signal_strength=args.signal_strength,
        noise_scale=args.noise_scale, regions_per_attribute=args.regions_per_attribute,
        r=args.regions, d_f=args.d_f, d_c=args.d_c,
        word_jitter=args.word_jitter, seed=args.seed,
    )
    world = generate_synthetic_world(spec, out)
    log.info("synthetic world written to %s", world.manifest_path)
    _write_metadata(out, "gen-data", args, None,
                    [str(world.manifest_path.relative_to(out))])
    return 0


def cmd_cluster(args) -> int:
    out = _prepare_out(args)
    ds = load_dataset(args.manifest)
    config = build_config(args.config, args.set)
    if args.k is not None:
        config = dataclasses.replace(config, k_channels=args.k)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    semantics = build_semantics(ds, config)
    arrays = {
        "centroids": semantics.centroids,
        "class_embeddings": semantics.class_embeddings,
        "calib_targets": semantics.calib_targets,
        "h0_channels": semantics.h0_channels,
        "h0_global": semantics.h0_global,
        "class_ids": np.asarray(ds.class_ids, dtype=np.int64),
    }
    if semantics.cluster_result is not None:
        arrays["assignment"] = semantics.cluster_result.assignment.astype(np.int64)
    meta = {
        "kind": "semantics",
        "k": config.k_channels,
        "seed": config.seed,
        "inertia": None if semantics.cluster_result is None
        else semantics.cluster_result.inertia,
        "phrase_sets": None if semantics.partition is None
        else {str(c): s for c, s in semantics.partition.phrase_sets.items()},
    }
    path = out / "semantics.fgpc"
    save_checkpoint(arrays, meta, path)
    log.info("centroids and partitions written to %s", path)
    _write_metadata(out, "cluster", args, config, ["semantics.fgpc"])
    return 0


def cmd_train(args) -> int:
    out = _prepare_out(args)
    ds = load_dataset(args.manifest)
    config = build_config(args.config, args.set)
    if args.skip_stage1:
        config = dataclasses.replace(config, skip_stage1=True)
    if args.skip_stage2:
        config = dataclasses.replace(config, skip_stage2=True)
    result = run_pipeline(config, ds)
    model_path = out / "model.fgpc"
    save_model(result.model, model_path)
    curves = {
        "stage1": result.stage1_losses,
        "gcn": result.gcn_losses,
        "stage2": result.stage2_losses,
    }
    (out / "loss_curves.json").write_text(
        json.dumps(curves, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    log.info("model written to %s", model_path)
    _write_metadata(out, "train", args, config, ["model.fgpc", "loss_curves.json"])
    return 0


def cmd_eval(args) -> int:
    out = _prepare_out(args)
    ds = load_dataset(args.manifest)
    model = load_model(args.checkpoint)
    k_list = tuple(int(x) for x in args.topk.split(","))
    report = evaluate(ds, model, mode=args.mode, k_list=k_list, split=args.split)
    path = out / "eval_report.json"
    path.write_text(report.to_json(), encoding="utf-8")
    for k in report.k_list:
        log.info("hit@%d = %.4f", k, report.hits[k])
    _write_metadata(out, "eval", args, model.config, ["eval_report.json"])
    return 0


def cmd_ablate(args) -> int:
    out = _prepare_out(args)
    ds = load_dataset(args.manifest)
    config = build_config(args.config, args.set)
    variant = AblationVariant(args.variant)
    report = run_ablation(variant, config, ds)
    path = out / f"ablation_{variant.value}.json"
    path.write_text(report.to_json(), encoding="utf-8")
    log.info("%s hit@1 = %.4f", variant.value, report.hits[1])
    _write_metadata(out, "ablate", args, config, [path.name])
    return 0


def cmd_sweep(args) -> int:
    out = _prepare_out(args)
    ds = load_dataset(args.manifest)
    config = build_config(args.config, args.set)
    k_range = [int(x) for x in args.k_range.split(",")]
    l_range = [int(x) for x in args.l_range.split(",")]
    _, csv_text = sweep_hyperparams(k_range, l_range, config, ds)
    path = out / "sweep.csv"
    path.write_text(csv_text, encoding="utf-8")
    log.info("sweep grid written to %s", path)
    _write_metadata(out, "sweep", args, config, ["sweep.csv"])
    return 0


def cmd_export_attn(args) -> int:
    out = _prepare_out(args)
    ds = load_dataset(args.manifest)
    model = load_model(args.checkpoint)
    sample_ids = [int(x) for x in args.samples.split(",")]
    outputs = []
    for sid in sample_ids:
        if not 0 <= sid < ds.features.shape[0]:
            raise DomainError(f"sample {sid} out of range [0, {ds.features.shape[0]})")
        grid = RegionFeatureGrid(sample_id=sid, features=ds.features[sid],
                                 grid_shape=ds.grid_shape)
        feats = extract_features(grid, model.centroids, model.params, model.adapter)
        base = out / f"sample{sid}_ch{args.channel}"
        for p in export_attention_heatmap(feats, args.channel, base):
            outputs.append(Path(p).name)
    _write_metadata(out, "export-attn", args, model.config, outputs)
    return 0


class _Parser(argparse.ArgumentParser):
    """argparse, but CLI misuse exits 1 like every other validation error."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="JSON config file with dotted keys")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="fgzsl",
        description="Fine-grained zero-shot learning over a class knowledge graph",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark world",
                       formatter_class=fmt)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-attributes", type=int, default=3)
    p.add_argument("--values-per-attribute", type=int, default=3)
    p.add_argument("--n-seen", type=int, default=18)
    p.add_argument("--n-unseen", type=int, default=6)
    p.add_argument("--samples-per-class", type=int, default=40)
    p.add_argument("--signal-strength", type=float, default=3.0)
    p.add_argument("--noise-scale", type=float, default=1.0)
    p.add_argument("--regions-per-attribute", type=int, default=2)
    p.add_argument("--regions", type=int, default=16, help="regions per sample (R)")
    p.add_argument("--d-f", type=int, default=32, help="region feature width")
    p.add_argument("--d-c", type=int, default=16, help="word vector width")
    p.add_argument("--word-jitter", type=float, default=0.6)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("cluster", help="build centroids and phrase partitions",
                       formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=None, help="override channel count")
    p.add_argument("--seed", type=int, default=None, help="override seed")
    _add_config_flags(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train", help="run both fine-tunings around the graph fit",
                       formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--skip-stage1", action="store_true",
                   help="skip the first fine-tuning stage")
    p.add_argument("--skip-stage2", action="store_true",
                   help="skip the final fine-tuning stage")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a split and write the report",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "test", "all"])
    p.add_argument("--mode", default="zsl", choices=["zsl", "gzsl"])
    p.add_argument("--topk", default="1,2,5,10,20", help="comma-separated k values")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run one ablation variant end to end",
                       formatter_class=fmt)
    p.add_argument("--variant", required=True,
                   choices=[v.value for v in AblationVariant])
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="grid over channel count and depth",
                       formatter_class=fmt)
    p.add_argument("--k-range", required=True, help="e.g. 1,2,3")
    p.add_argument("--l-range", required=True, help="e.g. 1,2")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-attn", help="write attention heatmaps for samples",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--samples", required=True, help="comma-separated sample indices")
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_attn)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return 2
    except VALIDATION_ERRORS as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
