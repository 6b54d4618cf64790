"""Frozen-feature evaluation and the ablation harness.

Features come from the pre-trained encoder with nothing masked: every
cluster is encoded whole, summarized, and the summaries averaged into one
vector per sample. Classifiers on top stay deliberately simple (cosine kNN
and a full-batch logistic-regression probe) so differences reflect the
representation, not the evaluator.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .events import floor_ratio
from .grouping import GroupingSpec, farthest_point_sample, knn_group, random_centers
from .model import ModelConfig, encode_clusters, summarize
from .numerics import (
    Array,
    ParamStore,
    affine,
    softmax_cross_entropy,
)
from .voxelize import VoxelSample


class EvalError(ValueError):
    pass


@dataclass
class FeatureSet:
    features: np.ndarray  # (n, d)
    labels: np.ndarray    # (n,)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise EvalError(
                f"features {self.features.shape} misaligned with "
                f"{len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.labels)


def _unmasked_clusters(
    sample: VoxelSample, gspec: GroupingSpec, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """(members (n_parts, k), coords (n, 3)) with every voxel visible."""
    coords = sample.coords_normalized.copy()
    coords[:, 2] *= gspec.time_scale
    if gspec.center_strategy == "fps":
        centers = farthest_point_sample(coords, gspec.n_parts, seed)
    else:
        centers = random_centers(len(coords), gspec.n_parts, seed)
    clusters = knn_group(coords, centers, gspec.k_per_part)
    return clusters.members, coords


def extract_features(
    params: ParamStore,
    config: ModelConfig,
    sample: VoxelSample,
    gspec: GroupingSpec,
    seed: int = 0,
) -> np.ndarray:
    """One feature vector (stage-S width): mean of whole-cluster summaries."""
    return extract_features_batch(params, config, [sample], gspec, seed)[0]


def extract_features_batch(
    params: ParamStore,
    config: ModelConfig,
    samples: list[VoxelSample],
    gspec: GroupingSpec,
    seed: int = 0,
    chunk: int = 16,
) -> np.ndarray:
    """Feature matrix (n_samples, stage-S width); frozen parameters."""
    if not samples:
        raise EvalError("no samples to extract features from")
    if samples[0].features.shape[1] != config.feature_len:
        raise EvalError(
            f"sample feature length {samples[0].features.shape[1]} does not "
            f"match model feature_len {config.feature_len}"
        )
    n, k = gspec.n_parts, gspec.k_per_part
    out = np.empty((len(samples), config.stage_channels[-1]))
    for lo in range(0, len(samples), chunk):
        part = samples[lo : lo + chunk]
        feats = np.empty((len(part) * n, k, config.feature_len))
        crds = np.empty((len(part) * n, k, 3))
        for i, sample in enumerate(part):
            members, coords = _unmasked_clusters(sample, gspec, seed)
            feats[i * n : (i + 1) * n] = sample.features[members]
            crds[i * n : (i + 1) * n] = coords[members]
        stages = encode_clusters(feats, crds, params, config)
        z = summarize(stages[-1]).data.reshape(len(part), n, -1)
        out[lo : lo + len(part)] = z.mean(axis=1)
    return out


# ---------------------------------------------------------------------------
# Classifiers
# ---------------------------------------------------------------------------

def cosine_distances(a: np.ndarray, b: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """(n, m) matrix of 1 - cos(a_i, b_j) with guarded denominators."""
    na = np.maximum(np.linalg.norm(a, axis=1), eps)
    nb = np.maximum(np.linalg.norm(b, axis=1), eps)
    sim = (a @ b.T) / np.outer(na, nb)
    return 1.0 - sim


def knn_classify(train: FeatureSet, test: FeatureSet, k: int) -> float:
    """Cosine-distance kNN accuracy. Vote ties resolve to the candidate
    label with the smaller mean distance, then the smaller label."""
    if len(train) == 0 or len(test) == 0:
        raise EvalError("knn needs non-empty train and test sets")
    if k > len(train):
        raise EvalError(f"k={k} exceeds train size {len(train)}")
    d = cosine_distances(test.features, train.features)
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    correct = 0
    for i in range(len(test)):
        nbr_labels = train.labels[order[i]]
        nbr_d = d[i, order[i]]
        candidates = {}
        for lab in np.unique(nbr_labels):
            sel = nbr_labels == lab
            candidates[int(lab)] = (int(sel.sum()), float(nbr_d[sel].mean()))
        best = min(
            candidates.items(),
            key=lambda kv: (-kv[1][0], kv[1][1], kv[0]),
        )[0]
        if best == int(test.labels[i]):
            correct += 1
    return correct / len(test)


def linear_probe(
    train: FeatureSet,
    test: FeatureSet,
    epochs: int = 300,
    lr: float = 0.5,
) -> float:
    """Multinomial logistic regression on frozen, train-standardized
    features; full-batch gradient descent from zero weights."""
    classes = np.unique(train.labels)
    if len(classes) < 2:
        raise EvalError("probe needs at least 2 classes")
    n_classes = int(train.labels.max()) + 1
    mu = train.features.mean(axis=0)
    sigma = np.maximum(train.features.std(axis=0), 1e-8)
    xtr = (train.features - mu) / sigma
    xte = (test.features - mu) / sigma

    w = Array(np.zeros((xtr.shape[1], n_classes)), requires_grad=True)
    b = Array(np.zeros(n_classes), requires_grad=True)
    xarr = Array(xtr)
    for _ in range(epochs):
        w.grad = None
        b.grad = None
        loss = softmax_cross_entropy(affine(xarr, w, b), train.labels)
        loss.backward()
        w.data = w.data - lr * w.grad
        b.data = b.data - lr * b.grad
    logits = xte @ w.data + b.data
    pred = logits.argmax(axis=1)
    return float((pred == test.labels).mean())


def probe_loss(features: np.ndarray, labels: np.ndarray, w: Array, b: Array) -> Array:
    """The probe's training objective, exposed for gradient verification."""
    return softmax_cross_entropy(affine(Array(features), w, b), labels)


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------

def nested_subsets(
    n: int, fractions: list[float], seed: int
) -> dict[float, np.ndarray]:
    """Prefixes of one seeded shuffle: smaller fractions nest in larger."""
    perm = np.random.default_rng(seed).permutation(n)
    out = {}
    for f in fractions:
        if not (0.0 < f <= 1.0):
            raise EvalError(f"data fraction must be in (0, 1], got {f}")
        count = n if f == 1.0 else max(1, floor_ratio(f, n))
        out[f] = np.sort(perm[:count])
    return out


@dataclass
class AblationReport:
    rows: list[dict] = field(default_factory=list)
    aggregates: list[dict] = field(default_factory=list)

    COLUMNS = [
        "kind", "mode", "center_strategy", "seed", "data_fraction",
        "epochs", "probe_acc", "knn_acc", "l_local", "l_global", "l_total",
        "probe_std", "knn_std", "status",
    ]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            writer.writeheader()
            for row in self.rows + self.aggregates:
                writer.writerow({c: row.get(c, "") for c in self.COLUMNS})

    def cell(self, mode: str, strategy: str, seed: int) -> dict | None:
        for row in self.rows:
            if (
                row["kind"] == "cell"
                and row["mode"] == mode
                and row["center_strategy"] == strategy
                and row["seed"] == seed
            ):
                return row
        return None


def _final_losses(metrics_path: Path) -> dict:
    out = {"l_local": "", "l_global": "", "l_total": ""}
    if not metrics_path.exists():
        return out
    with open(metrics_path) as fh:
        rows = list(csv.DictReader(fh))
    if rows:
        last = rows[-1]
        for key in out:
            out[key] = last.get(key, "")
    return out


def run_ablation(
    base,
    train_samples: list[VoxelSample],
    train_labels: np.ndarray,
    test_samples: list[VoxelSample],
    test_labels: np.ndarray,
    out_dir: str | Path,
    modes: list[str] = ("dual", "local_only", "mae_voxel"),
    strategies: list[str] = ("fps", "random"),
    seeds: list[int] = (0, 1, 2),
    data_fractions: list[float] | None = None,
    epoch_budgets: list[int] | None = None,
    knn_k: int = 3,
    probe_epochs: int = 300,
    probe_lr: float = 0.5,
) -> AblationReport:
    """Pretrain + probe over the full grid; cell failures are recorded and
    the remaining grid continues.

    Data-fraction cells use nested subsets of one shuffle and scale their
    epoch count so the total optimizer-step budget stays constant.
    """
    from .pretrain import TrainConfig, train_loop  # cycle-free late import

    if not isinstance(base, TrainConfig):
        raise EvalError("base must be a TrainConfig")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = AblationReport()

    def run_cell(tag: str, cfg: TrainConfig, subset: np.ndarray | None, row: dict):
        cell_dir = out_dir / "cells" / tag
        try:
            samples = (
                train_samples
                if subset is None
                else [train_samples[i] for i in subset]
            )
            state = train_loop(cfg, cell_dir, samples=samples)
            feats_tr = extract_features_batch(
                state.params, cfg.model, train_samples, cfg.grouping
            )
            feats_te = extract_features_batch(
                state.params, cfg.model, test_samples, cfg.grouping
            )
            tr = FeatureSet(feats_tr, train_labels)
            te = FeatureSet(feats_te, test_labels)
            row["probe_acc"] = linear_probe(tr, te, probe_epochs, probe_lr)
            row["knn_acc"] = knn_classify(tr, te, knn_k)
            row.update(_final_losses(cell_dir / "metrics.csv"))
            row["status"] = "ok"
        except Exception as e:  # record and continue with the grid
            row["status"] = f"error: {e}"
        report.rows.append(row)

    base_steps = max(1, base.epochs) * max(
        1, -(-len(train_samples) // base.batch_size)
    )
    for mode in modes:
        for strategy in strategies:
            for seed in seeds:
                cfg = replace(
                    base,
                    mode=mode,
                    seed=seed,
                    grouping=replace(base.grouping, center_strategy=strategy),
                )
                row = {
                    "kind": "cell", "mode": mode, "center_strategy": strategy,
                    "seed": seed, "data_fraction": 1.0, "epochs": cfg.epochs,
                }
                run_cell(f"{mode}_{strategy}_s{seed}", cfg, None, row)

    if data_fractions:
        subsets = nested_subsets(len(train_samples), list(data_fractions), base.seed)
        for f in data_fractions:
            subset = subsets[f]
            steps_per_epoch = max(1, -(-len(subset) // base.batch_size))
            epochs_f = max(base.warmup_epochs + 1,
                           round(base_steps / steps_per_epoch))
            cfg = replace(base, epochs=epochs_f)
            row = {
                "kind": "fraction", "mode": base.mode,
                "center_strategy": base.grouping.center_strategy,
                "seed": base.seed, "data_fraction": f, "epochs": epochs_f,
            }
            run_cell(f"frac{f:g}_s{base.seed}", cfg, subset, row)

    if epoch_budgets:
        for budget in epoch_budgets:
            cfg = replace(base, epochs=int(budget))
            row = {
                "kind": "epochs", "mode": base.mode,
                "center_strategy": base.grouping.center_strategy,
                "seed": base.seed, "data_fraction": 1.0, "epochs": int(budget),
            }
            run_cell(f"ep{budget}_s{base.seed}", cfg, None, row)

    for mode in modes:
        for strategy in strategies:
            cells = [
                r for r in report.rows
                if r["kind"] == "cell" and r["mode"] == mode
                and r["center_strategy"] == strategy and r["status"] == "ok"
            ]
            if not cells:
                continue
            probe = np.array([r["probe_acc"] for r in cells], dtype=float)
            knn = np.array([r["knn_acc"] for r in cells], dtype=float)
            report.aggregates.append({
                "kind": "aggregate", "mode": mode, "center_strategy": strategy,
                "probe_acc": probe.mean(), "probe_std": probe.std(),
                "knn_acc": knn.mean(), "knn_std": knn.std(),
                "status": f"n={len(cells)}",
            })

    report.to_csv(out_dir / "report.csv")
    _emit_curves(report, out_dir)
    return report


def _emit_curves(report: AblationReport, out_dir: Path) -> None:
    from .imaging import line_plot, write_pgm

    for kind, fname in (("fraction", "curve_fraction.pgm"),
                        ("epochs", "curve_epochs.pgm")):
        pts = [
            (float(r["data_fraction"] if kind == "fraction" else r["epochs"]),
             float(r["probe_acc"]))
            for r in report.rows
            if r["kind"] == kind and r["status"] == "ok"
        ]
        if len(pts) >= 2:
            pts.sort()
            xs = [p[0] for p in pts]
            ys = [p[1] for p in pts]
            write_pgm(out_dir / fname, line_plot([(xs, ys)], 320, 200))
