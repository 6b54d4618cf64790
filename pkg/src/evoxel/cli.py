"""Command-line entry point: gen-data, pretrain, eval, ablate, inspect.

Every command that produces files echoes its effective configuration as
JSON into the output directory, so a run can be repeated exactly from its
own echo. Exit codes: 0 success, 2 usage errors (argparse), 3 validation
or runtime failures (one-line diagnostic on stderr).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import events as ev
from .evaluate import (
    FeatureSet,
    extract_features_batch,
    knn_classify,
    linear_probe,
    run_ablation,
)
from .grouping import GroupingSpec, global_random_mask, group_sample
from .imaging import occupancy_image, write_pgm
from .pretrain import (
    TrainConfig,
    derive_seed,
    load_model_params,
    prepare_dataset,
    train_loop,
)
from .voxelize import VoxelSpec, voxelize_stream


def _echo_config(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load_json(path: str | Path) -> dict:
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def _cmd_gen_data(args) -> int:
    if not (1 <= args.classes <= len(ev.SYNTHETIC_CLASSES)):
        raise ValueError(
            f"--classes must be 1..{len(ev.SYNTHETIC_CLASSES)} "
            f"(one shape per class), got {args.classes}"
        )
    if args.per_class < 1 or args.test_per_class < 0:
        raise ValueError("--per-class must be >= 1 and --test-per-class >= 0")
    out = Path(args.out)
    (out / "events").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    entries = []
    n_files = 0
    for label in range(args.classes):
        class_id = ev.SYNTHETIC_CLASSES[label]
        for split, count in (("train", args.per_class), ("test", args.test_per_class)):
            for i in range(count):
                angle = rng.uniform(0.0, 2.0 * math.pi)
                speed = rng.uniform(args.min_speed, args.max_speed)
                velocity = (speed * math.cos(angle), speed * math.sin(angle))
                spec = ev.SyntheticSpec(
                    class_id=class_id,
                    velocity=velocity,
                    sensor_width=args.width,
                    sensor_height=args.height,
                    duration=args.duration_ms * 1000,
                    events_per_edge_crossing=args.events_per_crossing,
                    noise_rate=args.noise_rate,
                )
                noise_seed = int(rng.integers(0, 2**31))
                stream = ev.generate_synthetic(spec, noise_seed)
                rel = f"events/{class_id}_{split}_{i:04d}.evt"
                ev.save_stream(out / rel, stream)
                entries.append(ev.ManifestEntry(label=label, split=split, path=rel))
                n_files += 1
    manifest = ev.DatasetManifest(entries)
    ev.save_manifest(out / "manifest.json", manifest)
    _echo_config(out, {"command": "gen-data", **_args_dict(args)})
    print(f"wrote {n_files} event files + manifest to {out}")
    return 0


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

def _resolve_manifest(config: TrainConfig, config_path: Path) -> TrainConfig:
    if config.manifest is None:
        return config
    m = Path(config.manifest)
    if not m.is_absolute():
        m = (config_path.parent / m).resolve()
    return replace(config, manifest=str(m))


def _cmd_pretrain(args) -> int:
    config_path = Path(args.config)
    config = TrainConfig.from_dict(_load_json(config_path))
    if args.mode:
        config = replace(config, mode=args.mode)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    config = _resolve_manifest(config, config_path)
    out = Path(args.out)
    _echo_config(out, config.to_dict())

    def hook(epoch, row, seconds):
        print(
            f"epoch {epoch}: l_total={row[3]} lr={row[4]} ({seconds:.1f}s)",
            flush=True,
        )

    state = train_loop(
        config, out, resume_from=args.resume, log_hook=hook if args.verbose else None
    )
    print(f"done: {state.global_step} steps -> {out / 'checkpoint_final.ckpt'}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _cmd_eval(args) -> int:
    params, model_cfg, train_cfg = load_model_params(args.checkpoint)
    gspec = train_cfg.grouping if train_cfg else GroupingSpec()
    vspec = train_cfg.voxel if train_cfg else VoxelSpec()
    manifest = ev.load_manifest(args.manifest)
    base = Path(args.manifest).parent
    train_samples, train_labels = prepare_dataset(manifest, vspec, base, "train")
    test_samples, test_labels = prepare_dataset(manifest, vspec, base, "test")
    if not test_samples:
        raise ValueError("manifest has no test split")
    tr = FeatureSet(
        extract_features_batch(params, model_cfg, train_samples, gspec, args.seed),
        train_labels,
    )
    te = FeatureSet(
        extract_features_batch(params, model_cfg, test_samples, gspec, args.seed),
        test_labels,
    )
    do_knn = args.knn is not None or not args.probe
    do_probe = args.probe or args.knn is None
    results: list[tuple[str, float]] = []
    if do_knn:
        k = args.knn if args.knn is not None else 5
        k = min(k, len(tr))
        results.append((f"knn@{k}", knn_classify(tr, te, k)))
    if do_probe:
        results.append(
            ("probe", linear_probe(tr, te, args.probe_epochs, args.probe_lr))
        )
    out = Path(args.out)
    _echo_config(out, {"command": "eval", **_args_dict(args)})
    with open(out / "results.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "accuracy"])
        for name, acc in results:
            writer.writerow([name, repr(acc)])
    for name, acc in results:
        print(f"{name}: {acc:.4f}")
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

_GRID_KEYS = {
    "base", "modes", "strategies", "seeds", "data_fractions",
    "epoch_budgets", "knn_k", "probe_epochs", "probe_lr",
}


def _cmd_ablate(args) -> int:
    grid_path = Path(args.grid)
    grid = _load_json(grid_path)
    unknown = set(grid) - _GRID_KEYS
    if unknown:
        raise ValueError(f"unknown grid keys: {sorted(unknown)}")
    if "base" not in grid:
        raise ValueError("grid needs a 'base' train config")
    base = _resolve_manifest(TrainConfig.from_dict(grid["base"]), grid_path)
    if base.manifest is None:
        raise ValueError("grid base config needs a manifest")
    manifest = ev.load_manifest(base.manifest)
    mdir = Path(base.manifest).parent
    train_samples, train_labels = prepare_dataset(manifest, base.voxel, mdir, "train")
    test_samples, test_labels = prepare_dataset(manifest, base.voxel, mdir, "test")
    out = Path(args.out)
    _echo_config(out, {"command": "ablate", "grid": grid})
    report = run_ablation(
        base,
        train_samples, train_labels, test_samples, test_labels,
        out,
        modes=grid.get("modes", ["dual", "local_only", "mae_voxel"]),
        strategies=grid.get("strategies", ["fps", "random"]),
        seeds=grid.get("seeds", [0, 1, 2]),
        data_fractions=grid.get("data_fractions"),
        epoch_budgets=grid.get("epoch_budgets"),
        knn_k=grid.get("knn_k", 3),
        probe_epochs=grid.get("probe_epochs", 300),
        probe_lr=grid.get("probe_lr", 0.5),
    )
    n_err = sum(1 for r in report.rows if r["status"] != "ok")
    print(f"wrote {out / 'report.csv'} ({len(report.rows)} rows, {n_err} failed)")
    for agg in report.aggregates:
        print(
            f"  {agg['mode']}/{agg['center_strategy']}: "
            f"probe {agg['probe_acc']:.3f}+-{agg['probe_std']:.3f} "
            f"knn {agg['knn_acc']:.3f}+-{agg['knn_std']:.3f}"
        )
    return 0


# ---------------------------------------------------------------------------
# inspect
# ---------------------------------------------------------------------------

def _cmd_inspect(args) -> int:
    stream = ev.load_stream(args.sample)
    vspec = VoxelSpec(
        v_w=args.voxel_w, v_h=args.voxel_h, v_t=args.voxel_t_us, n_sel=args.n_sel
    )
    sample = voxelize_stream(stream, vspec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, {"command": "inspect", **_args_dict(args)})

    with open(out / "sample.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        flen = sample.features.shape[1]
        writer.writerow(
            ["ix", "iy", "it", "event_count", "duplicated"]
            + [f"f{i}" for i in range(flen)]
        )
        for i in range(len(sample)):
            writer.writerow(
                [*sample.coords[i], sample.event_counts[i],
                 int(sample.duplicated_flags[i])]
                + [repr(float(v)) for v in sample.features[i]]
            )
    write_pgm(out / "occupancy.pgm", occupancy_image(sample))

    if args.mask:
        if args.strategy == "uniform":
            gspec = GroupingSpec(
                n_parts=args.n_parts, k_per_part=args.k_per_part, rho1=args.rho1
            )
            _, assignment = group_sample(sample, gspec, args.seed)
            keep = np.unique(assignment.visible)
            name = "visible_uniform.pgm"
        else:
            keep, _ = global_random_mask(len(sample), args.rho1, args.seed)
            name = "visible_global.pgm"
        write_pgm(out / name, occupancy_image(sample, keep=keep))
        print(f"wrote {out / 'occupancy.pgm'} and {out / name}")
    else:
        print(f"wrote {out / 'sample.csv'} and {out / 'occupancy.pgm'}")
    return 0


# ---------------------------------------------------------------------------
# Parser plumbing
# ---------------------------------------------------------------------------

def _args_dict(args) -> dict:
    skip = {"func", "command"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="evoxel",
        description="Self-supervised pre-training on event-camera voxel sets.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic event dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--per-class", type=int, default=80)
    g.add_argument("--test-per-class", type=int, default=0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--duration-ms", type=int, default=100)
    g.add_argument("--noise-rate", type=float, default=5.0)
    g.add_argument("--events-per-crossing", type=int, default=2)
    g.add_argument("--min-speed", type=float, default=0.08)
    g.add_argument("--max-speed", type=float, default=0.35)
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("pretrain", help="run self-supervised pre-training")
    t.add_argument("--config", required=True, help="JSON train config")
    t.add_argument("--mode", choices=["dual", "local_only", "mae_voxel"])
    t.add_argument("--seed", type=int)
    t.add_argument("--out", default="runs/pretrain")
    t.add_argument("--resume", help="training checkpoint to resume from")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=_cmd_pretrain)

    e = sub.add_parser("eval", help="frozen-feature evaluation")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--knn", type=int, help="kNN classification with this k")
    e.add_argument("--probe", action="store_true", help="linear probe")
    e.add_argument("--probe-epochs", type=int, default=300)
    e.add_argument("--probe-lr", type=float, default=0.5)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default="runs/eval")
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("ablate", help="run the ablation grid")
    a.add_argument("--grid", required=True, help="JSON grid config")
    a.add_argument("--out", default="runs/ablate")
    a.set_defaults(func=_cmd_ablate)

    i = sub.add_parser("inspect", help="dump a voxel sample as CSV + PGM")
    i.add_argument("--sample", required=True, help="event stream file")
    i.add_argument("--voxel-w", type=int, default=5)
    i.add_argument("--voxel-h", type=int, default=5)
    i.add_argument("--voxel-t-us", type=int, default=25000)
    i.add_argument("--n-sel", type=int, default=2048)
    i.add_argument("--mask", action="store_true",
                   help="also write the visible-after-mask projection")
    i.add_argument("--strategy", choices=["uniform", "global"], default="uniform")
    i.add_argument("--n-parts", type=int, default=16)
    i.add_argument("--k-per-part", type=int, default=128)
    i.add_argument("--rho1", type=float, default=0.8)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", default="runs/inspect")
    i.set_defaults(func=_cmd_inspect)

    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, ArithmeticError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
