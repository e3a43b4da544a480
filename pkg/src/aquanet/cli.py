"""Multi-command entry point.

Commands: train, eval, ablate, stats, spatial, consistency, atex, synth,
gradcheck. Every command takes --out and writes exactly one
``run_manifest.json`` there (resolved config, seed, input content hashes,
output paths, wall clock) so a run can be reproduced from its manifest.

Any flag may also be supplied through the environment as AQUANET_<FLAG>
(e.g. AQUANET_SEED=7, AQUANET_DATASET=/data/aqua16); explicit command-line
values win. Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from . import analytics, atex, metrics as M, synthgen, training
from .checkpoint import load_aquanet, save_checkpoint
from .data import SegDataset, load_dataset, load_image, load_mask, save_indexed
from .errors import (AquanetError, ConfigInvalid, DegenerateVariance,
                     IoFailure)
from .modulation import ModulateBlock, ModulationNet, grad_check
from .network import AquaNetConfig
from .taxonomy import ClassTaxonomy, load_atlantis, load_taxonomy
from .training import TrainConfig

ENV_PREFIX = "AQUANET_"

GRADCHECK_THRESHOLD = 1e-4

ABLATION_ROWS = (
    ("baseline", {"two_paths": False, "low_level_modulation": False,
                  "cross_path_modulation": False}),
    ("two_paths", {"two_paths": True, "low_level_modulation": False,
                   "cross_path_modulation": False}),
    ("two_paths+lm", {"two_paths": True, "low_level_modulation": True,
                      "cross_path_modulation": False}),
    ("two_paths+cm", {"two_paths": True, "low_level_modulation": False,
                      "cross_path_modulation": True}),
    ("two_paths+lm+cm", {"two_paths": True, "low_level_modulation": True,
                         "cross_path_modulation": True}),
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; this suite reserves 2 for runtime."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _resolve(args, name: str, cast=str, fallback=None, required=False):
    """Flag value with CLI > AQUANET_<NAME> env > fallback precedence."""
    value = getattr(args, name, None)
    if value is None:
        value = os.environ.get(ENV_PREFIX + name.upper())
    if value is None:
        value = fallback
    if value is None:
        if required:
            raise _UsageError(f"--{name} is required (or set {ENV_PREFIX}{name.upper()})")
        return None
    try:
        return cast(value)
    except (TypeError, ValueError) as exc:
        raise _UsageError(f"bad --{name} value {value!r}: {exc}") from exc


def _load_config_doc(args) -> dict:
    path = _resolve(args, "config", cast=Path)
    if path is None:
        return {}
    if not path.exists():
        raise IoFailure(f"config file not found: {path}")
    doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigInvalid(f"config file {path} must hold a mapping")
    return doc


_TOGGLE_FIELDS = {"two_paths": "two_paths", "lm": "low_level_modulation",
                  "cm": "cross_path_modulation"}


def _apply_toggles(cfg: AquaNetConfig, toggles) -> AquaNetConfig:
    updates = {}
    for toggle in toggles or []:
        name, sep, value = toggle.partition("=")
        if not sep or name not in _TOGGLE_FIELDS or value not in ("on", "off"):
            raise _UsageError(
                f"bad --toggle {toggle!r}; expected two_paths|lm|cm=on|off")
        updates[_TOGGLE_FIELDS[name]] = value == "on"
    if not updates:
        return cfg
    return dataclasses.replace(cfg, **updates).validate()


def _model_config(doc: dict, args) -> AquaNetConfig:
    cfg = AquaNetConfig.from_dict(doc.get("model", {}))
    return _apply_toggles(cfg, getattr(args, "toggle", None))


def _train_config(doc: dict, args) -> TrainConfig:
    cfg = TrainConfig.from_dict(doc.get("train", {}))
    seed = _resolve(args, "seed", cast=int)
    iters = _resolve(args, "iters", cast=int)
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if iters is not None:
        updates["max_iters"] = iters
    if updates:
        cfg = dataclasses.replace(cfg, **updates).validate()
    return cfg


def _taxonomy_for(dataset: SegDataset) -> ClassTaxonomy:
    if dataset.taxonomy_path is not None:
        return load_taxonomy(dataset.taxonomy_path)
    return load_atlantis()


def _fingerprint(root) -> dict:
    """Content identity of a dataset: the fixture hash when present, else a
    hash of the manifest."""
    root = Path(root)
    out = {"path": str(root)}
    fixture = root / "fixture.json"
    manifest = root / "manifest.csv"
    if fixture.exists():
        doc = json.loads(fixture.read_text(encoding="utf-8"))
        out["fixture"] = doc.get("name")
        out["content_hash"] = doc.get("content_hash")
    elif manifest.exists():
        out["content_hash"] = hashlib.sha256(manifest.read_bytes()).hexdigest()
    return out


def _write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def _write_run_manifest(out_dir: Path, command: str, started: float, *,
                        seed=None, config=None, inputs=None, outputs=()) -> Path:
    doc = {
        "command": command,
        "seed": seed,
        "config": config or {},
        "inputs": inputs or {},
        "outputs": [str(p) for p in outputs],
        "wall_clock_sec": round(time.monotonic() - started, 3),
    }
    return _write_json(Path(out_dir) / "run_manifest.json", doc)


def _out_dir(args) -> Path:
    return _resolve(args, "out", cast=Path, required=True)


def _dataset_root(args) -> Path:
    return _resolve(args, "dataset", cast=Path, required=True)


def cmd_synth(args, started: float) -> int:
    name = _resolve(args, "fixture", required=True)
    out = _out_dir(args)
    root = synthgen.generate_fixture(name, out)
    doc = json.loads((root / "fixture.json").read_text(encoding="utf-8"))
    _write_run_manifest(out, "synth", started, config={"fixture": name},
                        inputs={}, outputs=[root / "fixture.json"])
    print(f"fixture {name} written to {root} (content hash {doc['content_hash'][:12]}...)")
    return 0


def cmd_train(args, started: float) -> int:
    dataset_root = _dataset_root(args)
    out = _out_dir(args)
    doc = _load_config_doc(args)
    model_cfg = _model_config(doc, args)
    train_cfg = _train_config(doc, args)
    dataset = load_dataset(dataset_root)
    taxonomy = _taxonomy_for(dataset)
    result = training.train(model_cfg, train_cfg, dataset, taxonomy, out_dir=out)
    _write_run_manifest(
        out, "train", started, seed=train_cfg.seed,
        config={"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
        inputs={"dataset": _fingerprint(dataset_root)},
        outputs=[result.checkpoint_path, result.log_path],
    )
    last = result.log_rows[-1]["loss_total"] if result.log_rows else float("nan")
    print(f"trained {train_cfg.max_iters} iterations (final loss {last:.4f}); "
          f"checkpoint {result.checkpoint_path}")
    return 0


def cmd_eval(args, started: float) -> int:
    ckpt_path = _resolve(args, "checkpoint", cast=Path, required=True)
    dataset_root = _dataset_root(args)
    out = _out_dir(args)
    split = _resolve(args, "split")
    model, config, taxonomy, _ = load_aquanet(ckpt_path)
    dataset = load_dataset(dataset_root)
    report = training.evaluate(model, dataset, taxonomy, split=split)
    table = M.render_metrics_table([(ckpt_path.stem, report)], taxonomy)
    json_path = _write_json(out / "metrics.json", report.to_dict())
    txt_path = _write_text(out / "metrics.txt", table)
    _write_run_manifest(
        out, "eval", started,
        config={"model": config.to_dict(), "split": split,
                "checkpoint": str(ckpt_path)},
        inputs={"dataset": _fingerprint(dataset_root)},
        outputs=[json_path, txt_path],
    )
    print(table)
    return 0


def _render_ablation(rows) -> str:
    header = ["two paths", "LM", "CM", "A-acc", "A-mIoU", "acc", "mIoU"]
    def pct(v):
        return "-" if v is None else f"{100.0 * v:.2f}"
    body = []
    for _, cfg, report in rows:
        body.append([
            "x" if cfg.two_paths else "",
            "x" if cfg.low_level_modulation else "",
            "x" if cfg.cross_path_modulation else "",
            pct(report.aquatic_acc), pct(report.aquatic_miou),
            pct(report.acc), pct(report.miou),
        ])
    widths = [max(len(header[i]), *(len(r[i]) for r in body)) for i in range(len(header))]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    for cells in body:
        lines.append("  ".join(c.rjust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines)


def cmd_ablate(args, started: float) -> int:
    dataset_root = _dataset_root(args)
    out = _out_dir(args)
    doc = _load_config_doc(args)
    base_cfg = AquaNetConfig.from_dict(doc.get("model", {}))
    train_cfg = _train_config(doc, args)
    dataset = load_dataset(dataset_root)
    taxonomy = _taxonomy_for(dataset)
    eval_split = "val" if dataset.subset("val").samples else "train"
    rows = []
    for name, toggles in ABLATION_ROWS:
        cfg = dataclasses.replace(base_cfg, **toggles).validate()
        result = training.train(cfg, train_cfg, dataset, taxonomy,
                                out_dir=out / name)
        report = training.evaluate(result.model, dataset, taxonomy,
                                   split=eval_split)
        rows.append((name, cfg, report))
        print(f"[{name}] acc {report.acc:.4f}  miou {report.miou:.4f}")
    table = _render_ablation(rows)
    txt_path = _write_text(out / "ablation.txt", table)
    json_path = _write_json(out / "ablation.json", {
        "eval_split": eval_split,
        "iterations": train_cfg.max_iters,
        "rows": [
            {"name": name, "config": cfg.to_dict(), "metrics": report.to_dict()}
            for name, cfg, report in rows
        ],
    })
    _write_run_manifest(
        out, "ablate", started, seed=train_cfg.seed,
        config={"model": base_cfg.to_dict(), "train": train_cfg.to_dict(),
                "rows": [{"name": n, "config": dataclasses.replace(
                    base_cfg, **t).to_dict()} for n, t in ABLATION_ROWS]},
        inputs={"dataset": _fingerprint(dataset_root)},
        outputs=[txt_path, json_path],
    )
    print(table)
    return 0


def cmd_stats(args, started: float) -> int:
    dataset_root = _dataset_root(args)
    out = _out_dir(args)
    dataset = load_dataset(dataset_root)
    taxonomy = _taxonomy_for(dataset)
    stats = analytics.label_frequency(dataset, taxonomy)
    doc = stats.to_dict()
    try:
        doc["frequency_pixel_correlation"] = analytics.frequency_pixel_correlation(stats)
    except DegenerateVariance:
        doc["frequency_pixel_correlation"] = None
    json_path = _write_json(out / "stats.json", doc)
    _write_run_manifest(
        out, "stats", started,
        inputs={"dataset": _fingerprint(dataset_root)}, outputs=[json_path],
    )
    gf = doc["group_fractions"]
    print(f"{stats.n_images} images, {stats.total_pixels} pixels: "
          f"unlabeled {100 * stats.unlabeled_fraction:.2f}%, "
          f"waterbody {100 * gf['waterbody']:.2f}%, "
          f"general {100 * gf['general']:.2f}%")
    return 0


def cmd_spatial(args, started: float) -> int:
    dataset_root = _dataset_root(args)
    out = _out_dir(args)
    label = _resolve(args, "label", required=True)
    dataset = load_dataset(dataset_root)
    taxonomy = _taxonomy_for(dataset)
    try:
        label_id = int(label)
        if not 0 <= label_id < taxonomy.num_classes:
            raise ConfigInvalid(f"label id {label_id} outside 0..{taxonomy.num_classes - 1}")
        label_name = taxonomy.classes[label_id].name
    except ValueError:
        try:
            label_id = taxonomy.class_by_name(label).id
        except KeyError as exc:
            raise ConfigInvalid(str(exc)) from exc
        label_name = label
    mode_map = analytics.spatial_mode_map(dataset, label_id, taxonomy)
    png_path = out / f"mode_{label_name.replace(' ', '_')}.png"
    save_indexed(png_path, mode_map.grid)
    ids, counts = np.unique(mode_map.grid, return_counts=True)
    json_path = _write_json(out / "mode_map.json", {
        "label": label_id,
        "label_name": label_name,
        "n_images": mode_map.n_images,
        "size": list(mode_map.grid.shape),
        "cell_counts": {int(i): int(c) for i, c in zip(ids, counts)},
    })
    _write_run_manifest(
        out, "spatial", started, config={"label": label_id},
        inputs={"dataset": _fingerprint(dataset_root)},
        outputs=[png_path, json_path],
    )
    print(f"mode map for {label_name!r} over {mode_map.n_images} images -> {png_path}")
    return 0


def cmd_consistency(args, started: float) -> int:
    root = _dataset_root(args)
    out = _out_dir(args)
    ref_root = root / "reference"
    redone_root = root / "redone"
    if not (ref_root / "manifest.csv").exists():
        raise IoFailure(f"no reference dataset at {ref_root}")
    if not redone_root.is_dir():
        raise IoFailure(f"no re-annotation datasets under {redone_root}")
    reference = load_dataset(ref_root)
    merged = []
    for sub in sorted(p for p in redone_root.iterdir() if p.is_dir()):
        merged.extend(load_dataset(sub).samples)
    if not merged:
        raise IoFailure(f"no re-annotation datasets under {redone_root}")
    reannotations = SegDataset(root, merged)
    taxonomy = _taxonomy_for(reference)
    annotator_map = {s.name: s.annotator_id for s in reference}
    rows = analytics.consistency_report(reference, reannotations,
                                        annotator_map, taxonomy)
    table = analytics.render_consistency_table(rows)
    txt_path = _write_text(out / "consistency.txt", table)
    json_path = _write_json(out / "consistency.json",
                            {"annotators": [r.to_dict() for r in rows]})
    _write_run_manifest(
        out, "consistency", started,
        inputs={"dataset": _fingerprint(root)}, outputs=[txt_path, json_path],
    )
    print(table)
    return 0


def cmd_atex(args, started: float) -> int:
    dataset_root = _dataset_root(args)
    out = _out_dir(args)
    seed = _resolve(args, "seed", cast=int, fallback=0)
    iters = _resolve(args, "iters", cast=int, fallback=300)
    dataset = load_dataset(dataset_root)
    taxonomy = _taxonomy_for(dataset)
    label_map = atex.AtexLabelMap.from_taxonomy(taxonomy)
    patches = []
    for sample in dataset:
        patches.extend(atex.extract_patches(
            load_image(sample.image_path), load_mask(sample.mask_path),
            taxonomy, label_map, image_id=sample.name))
    splits = atex.split_patches(patches, seed=seed)
    store_path = atex.save_patches(out / "store", splits)
    config = atex.AtexTrainConfig(max_iters=iters, seed=seed)
    model, _ = atex.atex_train(splits["train"], label_map.num_labels, config)
    report = atex.atex_eval(model, splits["test"], label_names=label_map.labels)
    ckpt_path = save_checkpoint(
        out / "atex_classifier.pt", model,
        {"num_labels": label_map.num_labels, "width": config.width},
        taxonomy, kind="atex_classifier",
        extra={"labels": list(label_map.labels), "iterations": iters, "seed": seed},
    )
    text = atex.render_atex_report(report)
    txt_path = _write_text(out / "atex_report.txt", text)
    json_path = _write_json(out / "atex_report.json", report)
    _write_run_manifest(
        out, "atex", started, seed=seed,
        config={"labels": list(label_map.labels), "iters": iters,
                "splits": {k: len(v) for k, v in splits.items()}},
        inputs={"dataset": _fingerprint(dataset_root)},
        outputs=[store_path, ckpt_path, txt_path, json_path],
    )
    print(text)
    return 0


def cmd_gradcheck(args, started: float) -> int:
    out = _out_dir(args)
    seed = _resolve(args, "seed", cast=int, fallback=0)
    epsilon = _resolve(args, "epsilon", cast=float, fallback=1e-4)
    torch.manual_seed(seed)
    block = ModulateBlock(ModulationNet(in_channels=2, out_channels=2, hidden=8))
    shapes = ((2, 8, 8), (2, 8, 8))
    try:
        max_err = grad_check(block, shapes, epsilon=epsilon, seed=seed)
    except ValueError as exc:
        raise _UsageError(str(exc)) from exc
    passed = max_err < GRADCHECK_THRESHOLD
    json_path = _write_json(out / "gradcheck.json", {
        "max_relative_error": max_err,
        "threshold": GRADCHECK_THRESHOLD,
        "epsilon": epsilon,
        "input_shapes": [list(s) for s in shapes],
        "passed": passed,
    })
    _write_run_manifest(
        out, "gradcheck", started, seed=seed,
        config={"epsilon": epsilon, "input_shapes": [list(s) for s in shapes]},
        outputs=[json_path],
    )
    print(f"max relative error {max_err:.3e}  "
          f"{'PASS' if passed else 'FAIL'} (threshold {GRADCHECK_THRESHOLD:g})")
    return 0 if passed else 2


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="aquanet",
        description="Two-path waterbody segmentation toolkit.",
        epilog=f"Flags may also be set via {ENV_PREFIX}<FLAG> environment "
               f"variables (e.g. {ENV_PREFIX}SEED=7); command-line values win.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    def add(name: str, func, help_: str):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        return p

    p = add("train", cmd_train, "train a segmentation model")
    p.add_argument("--dataset", help="dataset root directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="YAML config with model:/train: sections")
    p.add_argument("--seed", help="root random seed")
    p.add_argument("--iters", help="override train.max_iters")
    p.add_argument("--toggle", action="append", metavar="NAME=on|off",
                   help="set two_paths|lm|cm on or off (repeatable)")

    p = add("eval", cmd_eval, "evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--dataset", help="dataset root directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--split", choices=("train", "val", "test"),
                   help="restrict to one split (default: all samples)")

    p = add("ablate", cmd_ablate, "train and evaluate the 5 component-toggle rows")
    p.add_argument("--dataset", help="dataset root directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="YAML config with model:/train: sections")
    p.add_argument("--seed", help="root random seed")
    p.add_argument("--iters", help="training iterations per row")

    p = add("stats", cmd_stats, "label frequency and pixel-share statistics")
    p.add_argument("--dataset", help="dataset root directory")
    p.add_argument("--out", help="output directory")

    p = add("spatial", cmd_spatial, "spatial mode map for one label")
    p.add_argument("--dataset", help="dataset root directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--label", help="class name or id")

    p = add("consistency", cmd_consistency,
            "annotator consistency against reference masks")
    p.add_argument("--dataset", help="fixture root with reference/ and redone/")
    p.add_argument("--out", help="output directory")

    p = add("atex", cmd_atex, "extract texture patches and train the classifier")
    p.add_argument("--dataset", help="dataset root directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", help="split/train seed")
    p.add_argument("--iters", help="classifier training iterations")

    p = add("synth", cmd_synth, "generate a named test fixture")
    p.add_argument("--fixture", help=f"one of {', '.join(synthgen.FIXTURE_NAMES)}")
    p.add_argument("--out", help="output directory")

    p = add("gradcheck", cmd_gradcheck,
            "finite-difference check of the modulation block")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", help="input seed")
    p.add_argument("--epsilon", help="finite-difference step (default 1e-4)")

    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        if code is None:
            return 0
        return code if isinstance(code, int) else 1
    started = time.monotonic()
    try:
        return args.func(args, started)
    except _UsageError as exc:
        print(f"aquanet: error: {exc}", file=sys.stderr)
        return 1
    except AquanetError as exc:
        print(f"aquanet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"aquanet: io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
