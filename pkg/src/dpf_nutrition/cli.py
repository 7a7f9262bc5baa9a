"""Command-line entry point: ``dpf-nutrition <subcommand>``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 missing data.
Errors are reported on stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_value, resolve_config
from .dataset import (
    INGREDIENTS_FILE,
    TOTALS_FILE,
    TRAIN_IDS_FILE,
    AugmentConfig,
    NutrientVector,
    RGBDSample,
    augment,
    build_split,
    load_samples,
    parse_metadata,
    read_depth_file,
    read_rgb_file,
    ValidationReport,
)
from .depth import DepthCache, DepthProvider, attach_predicted_depth
from .errors import ConfigError, DPFError
from .evaluation import ablation_table_csv, evaluate, run_ablation, write_report
from .explain import write_explanations
from .model import ModelConfig, build_model, predict_nutrients
from .synthetic import read_scenes, synthetic_dataset, write_synthetic_dataset
from .training import fit, load_checkpoint

log = logging.getLogger("dpf_nutrition")


class MissingDataError(DPFError, LookupError):
    pass


# --------------------------------------------------------------------------
# helpers


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(cfg: RunConfig, produced: list, out: Path) -> None:
    resolved = out / "resolved_config.json"
    resolved.write_text(json.dumps(cfg.to_json_dict(), indent=2, sort_keys=True), encoding="utf-8")
    manifest = out / "manifest.json"
    files = sorted({str(p) for p in produced} | {str(resolved), str(manifest)})
    manifest.write_text(json.dumps({"files": files}, indent=2), encoding="utf-8")


def _fit_to_model(samples, mcfg: ModelConfig):
    if mcfg.image_size is None:
        return list(samples)
    aug = AugmentConfig(mcfg.image_size, mcfg.image_size, 0.0)
    rng = np.random.default_rng(0)
    return [augment(s, aug, rng) for s in samples]


def _load_data_dir(cfg: RunConfig):
    """Samples and split for ``data.root``, with depth from the configured provider."""
    root = cfg["data.root"]
    if not root:
        raise MissingDataError("data.root is not set (use --data-root, the config file or DPF_DATA_ROOT)")
    root = Path(root)
    totals = root / TOTALS_FILE
    if not totals.is_file():
        raise MissingDataError(f"metadata not found: {totals}")
    report = ValidationReport()
    ingredients = root / INGREDIENTS_FILE
    with open(totals, "rb") as tf:
        if ingredients.is_file():
            with open(ingredients, "rb") as inf:
                records = parse_metadata(tf, inf, report)
        else:
            records = parse_metadata(tf, None, report)
    for w in report.warnings:
        log.warning(w)
    dcfg = cfg.depth_config()
    policy = cfg["data.depth_policy"] if dcfg.kind == "sensor_passthrough" else "none"
    samples = load_samples(records, root, policy, cfg["data.depth_scale"], cfg["runtime.workers"])
    if dcfg.kind == "synthetic_oracle":
        scenes = read_scenes(root)
        missing = [s.dish_id for s in samples if s.dish_id not in scenes]
        if missing:
            raise MissingDataError(f"no synthetic scene for dishes {missing[:3]} in {root}")
        samples = [replace(s, scene=scenes[s.dish_id]) for s in samples]
    if dcfg.kind != "sensor_passthrough":
        cache = DepthCache(cfg["depth.cache_dir"]) if cfg["depth.cache_dir"] else None
        samples = attach_predicted_depth(samples, DepthProvider(dcfg), cache)
    ids = [s.dish_id for s in samples]
    manifest = root if (root / TRAIN_IDS_FILE).exists() else None
    split = build_split(ids, cfg["data.split_ratio"], cfg["seed"], manifest)
    return samples, split


def _split_samples(samples, split, which: str):
    ids = split.train_ids if which == "train" else split.test_ids
    return [s for s in samples if s.dish_id in ids]


def _load_model(args, cfg: RunConfig):
    explicit = args.config or any(item.startswith("model.") for item in args.set)
    expected = cfg.model_config().config_hash() if explicit else None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ckpt = load_checkpoint(args.checkpoint, expected, force=args.force)
    for w in caught:
        print(json.dumps({"warning": str(w.message)}), file=sys.stderr)
    return ckpt.build_model()


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg: RunConfig) -> list:
    mcfg = cfg.model_config()
    size = mcfg.image_size or (64, 80)
    samples = synthetic_dataset(args.n, seed=cfg["seed"], image_size=size)
    split = build_split([s.dish_id for s in samples], cfg["data.split_ratio"], cfg["seed"])
    root = Path(args.out or cfg["data.root"] or "data")
    written = write_synthetic_dataset(samples, root, split)
    print(json.dumps({"root": str(root), "n": len(samples), "train": len(split.train_ids),
                      "test": len(split.test_ids)}))
    return written


def cmd_train(args, cfg: RunConfig) -> list:
    out = _out_dir(cfg)
    samples, split = _load_data_dir(cfg)
    train = _split_samples(samples, split, "train")
    mcfg = cfg.model_config()
    model = build_model(mcfg, seed=cfg["seed"])
    ckpt_path = out / "checkpoint.dpfn"
    log_path = out / "train_log.jsonl"
    if log_path.exists():
        log_path.unlink()
    result = fit(model, train, cfg.train_config(), log_path=log_path, checkpoint_path=ckpt_path)
    last = result.history[-1]
    print(json.dumps({"checkpoint": str(ckpt_path), "epochs": len(result.history), "L_total": last["L_total"]}))
    return [ckpt_path, log_path]


def _write_reports(report, out: Path, stem: str = "report") -> list:
    written = []
    for fmt, ext in (("json", "json"), ("csv", "csv"), ("text", "txt")):
        path = out / f"{stem}.{ext}"
        path.write_bytes(write_report(report, fmt))
        written.append(path)
    return written


def cmd_evaluate(args, cfg: RunConfig) -> list:
    out = _out_dir(cfg)
    model = _load_model(args, cfg)
    samples, split = _load_data_dir(cfg)
    subset = samples if args.split == "all" else _split_samples(samples, split, args.split)
    subset = _fit_to_model(subset, model.config)
    report = evaluate(model, subset, split=args.split)
    sys.stdout.write(write_report(report, "text").decode("utf-8"))
    return _write_reports(report, out)


def cmd_predict(args, cfg: RunConfig) -> list:
    model = _load_model(args, cfg)
    image = Path(args.image)
    if not image.is_file():
        raise MissingDataError(f"image not found: {image}")
    rgb = read_rgb_file(image)
    depth = None
    if model.uses_depth:
        if args.depth:
            depth = read_depth_file(args.depth, rgb.shape[:2], cfg["data.depth_scale"])
        else:
            dcfg = cfg.depth_config()
            if dcfg.kind != "pretrained":
                raise MissingDataError("this model needs depth: pass --depth or configure a pretrained depth provider")
            depth = DepthProvider(dcfg).predict(rgb).values
    sample = RGBDSample(image.stem, rgb, depth, NutrientVector())
    (pred,) = predict_nutrients(model, _fit_to_model([sample], model.config))
    print(json.dumps({k: getattr(pred, k) for k in ("calories", "mass", "fat", "carb", "protein")}))
    return []


def cmd_ablate(args, cfg: RunConfig) -> list:
    out = _out_dir(cfg)
    mcfg, tcfg = cfg.model_config(), cfg.train_config()
    results = []
    for k in range(cfg["ablation.seeds"]):
        seed = cfg["seed"] + k
        if cfg["data.root"]:
            samples, split = _load_data_dir(cfg)
            train = _fit_to_model(_split_samples(samples, split, "train"), mcfg)
            test = _fit_to_model(_split_samples(samples, split, "test"), mcfg)
        else:
            size = mcfg.image_size or (64, 80)
            train = synthetic_dataset(cfg["data.synthetic_train"], seed=1000 + seed, image_size=size)
            test = synthetic_dataset(cfg["data.synthetic_test"], seed=2000 + seed, image_size=size)
        results.append(run_ablation(train, test, mcfg, tcfg, seed=seed, log=log.info))
    table = out / "ablation_table.csv"
    table.write_bytes(ablation_table_csv(results))
    summary = out / "ablation.json"
    summary.write_text(json.dumps([r.to_dict() for r in results], indent=2), encoding="utf-8")
    text = out / "report.txt"
    seeds = [cfg["seed"] + k for k in range(len(results))]
    text.write_bytes(b"\n".join(f"seed {s}\n".encode() + write_report(r, "text") for s, r in zip(seeds, results)))
    sys.stdout.write(text.read_text(encoding="utf-8"))
    return [table, summary, text]


def cmd_explain(args, cfg: RunConfig) -> list:
    out = _out_dir(cfg)
    model = _load_model(args, cfg)
    samples, split = _load_data_dir(cfg)
    if args.dish_id:
        chosen = [s for s in samples if s.dish_id in set(args.dish_id)]
        if len(chosen) != len(set(args.dish_id)):
            raise MissingDataError(f"unknown dish id among {args.dish_id}")
    else:
        chosen = sorted(_split_samples(samples, split, "test"), key=lambda s: s.dish_id)[: args.limit]
    layer = int(args.layer) if args.layer and args.layer.isdigit() else args.layer
    written = []
    for s in _fit_to_model(chosen, model.config):
        written += write_explanations(model, s, out, layer)
    print(json.dumps({"files": [str(p) for p in written]}))
    return written


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
    "explain": cmd_explain,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpf-nutrition", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--profile", choices=("desk", "full"))
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (data directory for synth)")
    common.add_argument("--data-root")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; repeatable")
    common.add_argument("--force", action="store_true", help="load checkpoints despite a config hash mismatch")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--n", type=int, default=64)
    sub.add_parser("train", parents=[common], help="train a model")
    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p = sub.add_parser("predict", parents=[common], help="predict nutrients for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--depth", help="depth file (16-bit png or raw float32) for depth-using models")
    p = sub.add_parser("ablate", parents=[common], help="run the five-row ablation")
    p.add_argument("--seeds", type=int)
    p = sub.add_parser("explain", parents=[common], help="write Grad-CAM heatmaps and depth renderings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dish-id", action="append")
    p.add_argument("--limit", type=int, default=4)
    p.add_argument("--layer", help="pyramid level 0-4 or a feature name such as F4")
    return parser


def _overrides(args) -> dict:
    o = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"expected KEY=VALUE, got {item!r}", "--set")
        key, value = item.split("=", 1)
        o[key.strip()] = parse_value(key.strip(), value)
    if args.profile:
        o["profile"] = args.profile
    if args.seed is not None:
        o["seed"] = args.seed
    if args.data_root:
        o["data.root"] = args.data_root
    if args.out and args.command != "synth":
        o["output_dir"] = args.out
    if getattr(args, "seeds", None) is not None:
        o["ablation.seeds"] = args.seeds
    return o


def _fail(kind: str, exc: Exception, code: int) -> int:
    err = {"error": kind, "message": str(exc)}
    if getattr(exc, "field", None):
        err["field"] = exc.field
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.config, _overrides(args))
        produced = COMMANDS[args.command](args, cfg)
        out = Path(args.out) if args.command == "synth" and args.out else Path(cfg["output_dir"])
        out.mkdir(parents=True, exist_ok=True)
        _finish(cfg, produced, out)
    except ConfigError as exc:
        return _fail("config", exc, 2)
    except (MissingDataError, FileNotFoundError, LookupError) as exc:
        return _fail("missing_data", exc, 3)
    except DPFError as exc:
        return _fail(type(exc).__name__, exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
