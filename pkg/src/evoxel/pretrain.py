"""Self-supervised pre-training: losses, momentum targets, training loop.

Three modes:

- ``dual``: per-cluster masking; the local branch reconstructs masked voxel
  features, the global branch predicts momentum-encoder summaries of
  whole masked clusters from visible-cluster summaries.
- ``local_only``: the local branch alone.
- ``mae_voxel``: one global random split over the whole sample, a single
  encoder pass over the visible voxels, and one decoder reconstructing all
  masked voxel features.

Every random choice derives from (seed, stream, epoch, sample index), so
runs are reproducible and resumable without carrying generator state.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .events import DatasetManifest, load_entry_stream, load_manifest
from .grouping import (
    ClusterSet,
    GroupingSpec,
    global_random_mask,
    group_sample,
    scaled_coords,
)
from .model import (
    ModelConfig,
    init_params,
    interpolate_upsample,
    load_checkpoint,
    local_decode,
    make_config,
    save_checkpoint,
    summarize,
    global_decode,
    encode_clusters,
)
from .numerics import (
    Array,
    EmaState,
    NumericError,
    OptimizerState,
    ParamStore,
    adamw_step,
    batched_gather,
    collect_grads,
    cosine_lr,
    cosine_rows,
    ema_update,
    mul,
    reshape,
    sub,
    sum_all,
)
from .voxelize import VoxelSample, VoxelSpec, voxelize_stream

_STREAM_DATA = 1
_STREAM_MASK = 2

MODES = ("dual", "local_only", "mae_voxel")


class TrainError(RuntimeError):
    pass


def derive_seed(*parts: int) -> int:
    """Stable integer seed from a tuple of integers."""
    ss = np.random.SeedSequence([int(p) for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; epoch/batch/warmup counts are the reference
    recipe (700 epochs, batch 64, 40 warmup epochs, peak 3e-4) scaled down
    by roughly 14x so a run finishes in minutes on a CPU."""

    epochs: int = 50
    batch_size: int = 16
    peak_lr: float = 3e-4
    lr_floor: float = 0.0
    warmup_epochs: int = 3
    lam: float = 1.0
    ema_momentum: float = 0.996
    weight_decay: float = 0.05
    mode: str = "dual"
    seed: int = 0
    checkpoint_every: int = 10
    manifest: str | None = None
    model: ModelConfig = field(default_factory=lambda: make_config("small"))
    grouping: GroupingSpec = field(default_factory=GroupingSpec)
    voxel: VoxelSpec = field(default_factory=VoxelSpec)

    def __post_init__(self):
        if self.mode not in MODES:
            raise TrainError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lam < 0:
            raise TrainError("lam must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise TrainError("epochs must be >= 0 and batch_size >= 1")
        if not (0.0 <= self.ema_momentum <= 1.0):
            raise TrainError("ema_momentum must be in [0, 1]")
        if self.warmup_epochs >= max(self.epochs, 1):
            raise TrainError("warmup_epochs must be < epochs")
        if self.mode == "dual" and self.grouping.n_global_masked < 1:
            raise TrainError(
                "dual mode needs floor(rho2 * n_parts) >= 1 masked clusters"
            )
        if self.model.feature_len != self.voxel.feature_len:
            raise TrainError(
                f"model feature_len {self.model.feature_len} != "
                f"voxel v_w*v_h {self.voxel.feature_len}"
            )

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "peak_lr": self.peak_lr,
            "lr_floor": self.lr_floor,
            "warmup_epochs": self.warmup_epochs,
            "lambda": self.lam,
            "ema_momentum": self.ema_momentum,
            "weight_decay": self.weight_decay,
            "mode": self.mode,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "manifest": self.manifest,
            "model": self.model.to_dict(),
            "grouping": self.grouping.to_dict(),
            "voxel": self.voxel.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {
            "epochs", "batch_size", "peak_lr", "lr_floor", "warmup_epochs",
            "lambda", "ema_momentum", "weight_decay", "mode", "seed",
            "checkpoint_every", "manifest", "model", "grouping", "voxel",
        }
        unknown = set(d) - known
        if unknown:
            raise TrainError(f"unknown config keys: {sorted(unknown)}")
        kw: dict = {}
        for key in known - {"lambda", "model", "grouping", "voxel"}:
            if key in d:
                kw[key] = d[key]
        if "lambda" in d:
            kw["lam"] = float(d["lambda"])
        if "model" in d:
            kw["model"] = ModelConfig.from_dict(d["model"])
        if "grouping" in d:
            kw["grouping"] = GroupingSpec.from_dict(d["grouping"])
        if "voxel" in d:
            kw["voxel"] = VoxelSpec.from_dict(d["voxel"])
        return cls(**kw)


@dataclass
class TrainState:
    config: TrainConfig
    params: ParamStore
    ema: EmaState
    opt: OptimizerState
    epoch: int = 0
    global_step: int = 0
    steps_per_epoch: int = 1

    @classmethod
    def initialize(cls, config: TrainConfig, n_samples: int) -> "TrainState":
        params = init_params(config.model, config.seed)
        ema = EmaState.from_params(params, config.ema_momentum)
        opt = OptimizerState.for_params(params, weight_decay=config.weight_decay)
        steps = max(1, math.ceil(n_samples / config.batch_size))
        return cls(config=config, params=params, ema=ema, opt=opt,
                   steps_per_epoch=steps)

    @property
    def total_steps(self) -> int:
        return max(1, self.config.epochs * self.steps_per_epoch)

    @property
    def warmup_steps(self) -> int:
        return self.config.warmup_epochs * self.steps_per_epoch

    def lr_at(self, step: int) -> float:
        return cosine_lr(
            step, self.warmup_steps, self.total_steps,
            self.config.peak_lr, self.config.lr_floor,
        )


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def local_loss(
    targets: np.ndarray, predictions: Array, keep: np.ndarray | None = None
) -> Array:
    """Average squared residual per masked voxel (scalar).

    targets/predictions: (..., K_m, F). ``keep`` (..., K_m) marks rows that
    count; padding duplicates carry keep=False and drop out of both the sum
    and the denominator.
    """
    targets = np.asarray(targets, dtype=float)
    if predictions.shape != targets.shape:
        raise TrainError(
            f"local loss shapes differ: {predictions.shape} vs {targets.shape}"
        )
    if keep is None:
        keep = np.ones(targets.shape[:-1], dtype=bool)
    count = max(int(keep.sum()), 1)
    w = keep.astype(float)[..., None] / count
    d = sub(predictions, Array(targets))
    return sum_all(mul(mul(d, d), Array(w)))


def global_loss(targets: np.ndarray, predictions: Array) -> Array:
    """Mean over masked clusters of 1 - cos(target, prediction)."""
    targets = np.asarray(targets, dtype=float)
    if predictions.shape != targets.shape:
        raise TrainError(
            f"global loss shapes differ: {predictions.shape} vs {targets.shape}"
        )
    cos = cosine_rows(predictions, Array(targets))
    n = max(cos.data.size, 1)
    ones = Array(np.ones_like(cos.data))
    return sum_all(mul(sub(ones, cos), Array(1.0 / n)))


def total_loss(l_local: Array, l_global: Array | None, lam: float) -> Array:
    if l_global is None or lam == 0.0:
        return l_local
    return l_local + mul(l_global, Array(lam))


def momentum_targets(
    ema: EmaState,
    sample: VoxelSample,
    clusters: ClusterSet,
    cluster_ids: np.ndarray,
    coords: np.ndarray,
    config: ModelConfig,
) -> np.ndarray:
    """Momentum-encoder summaries of the complete clusters ``cluster_ids``.

    The shadow parameters never require gradients, so the result is a plain
    detached array.
    """
    members = clusters.members[cluster_ids]
    feats = sample.features[members]
    crds = coords[members]
    stages = encode_clusters(feats, crds, ema.shadow, config)
    return summarize(stages[-1]).data


# ---------------------------------------------------------------------------
# Training step
# ---------------------------------------------------------------------------

def _mask_seed(config: TrainConfig, epoch: int, sample_index: int) -> int:
    return derive_seed(config.seed, _STREAM_MASK, epoch, sample_index)


def _dual_batch_losses(
    state: TrainState,
    batch: list[VoxelSample],
    indices: list[int],
    epoch: int,
) -> tuple[Array, Array | None]:
    cfg = state.config
    g = cfg.grouping
    b = len(batch)
    n, k = g.n_parts, g.k_per_part
    k_v, k_m = g.k_visible, g.k_masked
    m_g = g.n_global_masked

    vis_feats = np.empty((b * n, k_v, cfg.model.feature_len))
    vis_coords = np.empty((b * n, k_v, 3))
    msk_coords = np.empty((b * n, k_m, 3))
    msk_targets = np.empty((b * n, k_m, cfg.model.feature_len))
    msk_keep = np.empty((b, n, k_m), dtype=bool)
    all_clusters: list[ClusterSet] = []
    all_masked_ids = np.empty((b, m_g), dtype=np.int64)
    all_coords: list[np.ndarray] = []

    for bi, (idx, sample) in enumerate(zip(indices, batch)):
        coords = scaled_coords(sample, g)
        clusters, assignment = group_sample(sample, g, _mask_seed(cfg, epoch, idx))
        sl = slice(bi * n, (bi + 1) * n)
        vis_feats[sl] = sample.features[assignment.visible]
        vis_coords[sl] = coords[assignment.visible]
        msk_coords[sl] = coords[assignment.masked]
        msk_targets[sl] = sample.features[assignment.masked]
        msk_keep[bi] = ~sample.duplicated_flags[assignment.masked]
        all_clusters.append(clusters)
        if m_g:
            all_masked_ids[bi] = assignment.global_masked
        all_coords.append(coords)

    stages = encode_clusters(vis_feats, vis_coords, state.params, cfg.model)
    y_v = interpolate_upsample(stages, vis_coords, state.params, cfg.model)
    preds = local_decode(y_v, msk_coords, state.params, cfg.model)

    # Per-sample mean over its own kept voxels, then mean over the batch,
    # as one weighted reduction.
    counts = np.maximum(msk_keep.reshape(b, -1).sum(axis=1), 1)
    w = msk_keep.astype(float) / counts[:, None, None] / b
    d = sub(preds, Array(msk_targets.reshape(b * n, k_m, -1)))
    l_local = sum_all(mul(mul(d, d), Array(w.reshape(b * n, k_m, 1))))

    if cfg.mode != "dual":
        return l_local, None

    cs = cfg.model.stage_channels[-1]
    z_all = summarize(stages[-1])  # (b*n, cs), rows ordered sample-major
    vis_ids = np.empty((b, n - m_g), dtype=np.int64)
    for bi in range(b):
        mask = np.ones(n, dtype=bool)
        mask[all_masked_ids[bi]] = False
        vis_ids[bi] = np.nonzero(mask)[0]

    z_grid = reshape(z_all, (b, n, cs))
    z_vis = batched_gather(z_grid, vis_ids)

    center_coords = np.stack(
        [all_coords[bi][all_clusters[bi].center_indices] for bi in range(b)]
    )  # (b, n, 3)
    rows = np.arange(b)[:, None]
    vis_centers = center_coords[rows, vis_ids]
    msk_centers = center_coords[rows, all_masked_ids]

    # One shadow-encoder pass over every masked cluster in the batch; each
    # cluster is processed independently, so this equals the per-sample
    # momentum_targets composition exactly.
    tgt_feats = np.empty((b * m_g, k, cfg.model.feature_len))
    tgt_coords = np.empty((b * m_g, k, 3))
    for bi in range(b):
        members = all_clusters[bi].members[all_masked_ids[bi]]
        sl = slice(bi * m_g, (bi + 1) * m_g)
        tgt_feats[sl] = batch[bi].features[members]
        tgt_coords[sl] = all_coords[bi][members]
    tgt_stages = encode_clusters(tgt_feats, tgt_coords, state.ema.shadow, cfg.model)
    targets = summarize(tgt_stages[-1]).data.reshape(b, m_g, cs)

    z_pred = global_decode(z_vis, vis_centers, msk_centers, state.params, cfg.model)
    l_global = global_loss(targets, z_pred)
    return l_local, l_global


def _mae_batch_loss(
    state: TrainState,
    batch: list[VoxelSample],
    indices: list[int],
    epoch: int,
) -> Array:
    cfg = state.config
    g = cfg.grouping
    vis_feats, vis_coords, msk_coords, msk_targets, msk_keep = [], [], [], [], []
    for idx, sample in zip(indices, batch):
        coords = scaled_coords(sample, g)
        visible, masked = global_random_mask(
            len(sample), g.rho1, _mask_seed(cfg, epoch, idx)
        )
        vis_feats.append(sample.features[visible])
        vis_coords.append(coords[visible])
        msk_coords.append(coords[masked])
        msk_targets.append(sample.features[masked])
        msk_keep.append(~sample.duplicated_flags[masked])
    feats = np.stack(vis_feats)
    stages = encode_clusters(feats, np.stack(vis_coords), state.params, cfg.model)
    y_v = interpolate_upsample(stages, np.stack(vis_coords), state.params, cfg.model)
    preds = local_decode(y_v, np.stack(msk_coords), state.params, cfg.model)

    keep = np.stack(msk_keep)  # (b, n_masked)
    b = len(batch)
    counts = np.maximum(keep.sum(axis=1), 1)
    w = keep.astype(float) / counts[:, None] / b
    d = sub(preds, Array(np.stack(msk_targets)))
    return sum_all(mul(mul(d, d), Array(w[:, :, None])))


def train_step(
    state: TrainState,
    batch: list[VoxelSample],
    indices: list[int] | None = None,
) -> dict:
    """One optimizer step over a batch; returns step metrics."""
    cfg = state.config
    if indices is None:
        indices = list(range(len(batch)))
    lr = state.lr_at(state.global_step)
    try:
        if cfg.mode == "mae_voxel":
            l_local = _mae_batch_loss(state, batch, indices, state.epoch)
            l_global = None
        else:
            l_local, l_global = _dual_batch_losses(
                state, batch, indices, state.epoch
            )
        loss = total_loss(l_local, l_global, cfg.lam)
        if not math.isfinite(loss.item()):
            raise NumericError("non-finite loss")
    except NumericError as e:
        raise TrainError(
            f"non-finite loss at step {state.global_step} (lr={lr!r}): {e}"
        ) from e

    state.params.zero_grad()
    loss.backward()
    grads = collect_grads(state.params)
    adamw_step(state.params, grads, state.opt, lr)
    ema_update(state.ema, state.params)
    state.global_step += 1

    metrics = {"l_local": l_local.item(), "l_total": loss.item(), "lr": lr}
    if l_global is not None:
        metrics["l_global"] = l_global.item()
    return metrics


# ---------------------------------------------------------------------------
# Dataset preparation and the loop
# ---------------------------------------------------------------------------

def prepare_dataset(
    manifest: DatasetManifest,
    voxel_spec: VoxelSpec,
    base_dir: str | Path = ".",
    split: str | None = "train",
) -> tuple[list[VoxelSample], np.ndarray]:
    """Voxelize every (optionally split-filtered) manifest entry."""
    entries = manifest.entries if split is None else manifest.subset(split).entries
    samples, labels = [], []
    for entry in entries:
        stream = load_entry_stream(entry, base_dir)
        samples.append(voxelize_stream(stream, voxel_spec))
        labels.append(entry.label)
    return samples, np.asarray(labels, dtype=np.int64)


def _format_float(x: float | None) -> str:
    return "" if x is None else repr(x)


def train_loop(
    config: TrainConfig,
    out_dir: str | Path,
    samples: list[VoxelSample] | None = None,
    resume_from: str | Path | None = None,
    log_hook=None,
) -> TrainState:
    """Run pre-training; writes metrics.csv and periodic checkpoints.

    The metric log has one row per epoch: epoch index, epoch-mean losses,
    and the LR of the epoch's last step. Values are written with repr so a
    resumed run can be compared bit-for-bit.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if samples is None:
        if config.manifest is None:
            raise TrainError("no samples given and no manifest configured")
        manifest = load_manifest(config.manifest)
        samples, _ = prepare_dataset(
            manifest, config.voxel, Path(config.manifest).parent
        )
    if not samples:
        raise TrainError("empty training set")

    state = TrainState.initialize(config, len(samples))
    start_epoch = 0
    if resume_from is not None:
        state = load_train_checkpoint(resume_from, len(samples))
        if state.config.to_dict() != config.to_dict():
            raise TrainError("resume config differs from checkpoint config")
        start_epoch = state.epoch

    log_path = out_dir / "metrics.csv"
    mode = "a" if (resume_from is not None and log_path.exists()) else "w"
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["epoch", "l_local", "l_global", "l_total", "lr"])
        for epoch in range(start_epoch, config.epochs):
            state.epoch = epoch
            order = np.random.default_rng(
                derive_seed(config.seed, _STREAM_DATA, epoch)
            ).permutation(len(samples))
            sums = {"l_local": 0.0, "l_global": 0.0, "l_total": 0.0}
            saw_global = False
            last_lr = 0.0
            n_steps = 0
            t0 = time.monotonic()
            for lo in range(0, len(order), config.batch_size):
                chunk = order[lo : lo + config.batch_size]
                batch = [samples[i] for i in chunk]
                metrics = train_step(state, batch, [int(i) for i in chunk])
                sums["l_local"] += metrics["l_local"]
                sums["l_total"] += metrics["l_total"]
                if "l_global" in metrics:
                    sums["l_global"] += metrics["l_global"]
                    saw_global = True
                last_lr = metrics["lr"]
                n_steps += 1
            row = [
                str(epoch),
                _format_float(sums["l_local"] / n_steps),
                _format_float(sums["l_global"] / n_steps if saw_global else None),
                _format_float(sums["l_total"] / n_steps),
                _format_float(last_lr),
            ]
            writer.writerow(row)
            fh.flush()
            if log_hook is not None:
                log_hook(epoch, row, time.monotonic() - t0)
            state.epoch = epoch + 1
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_train_checkpoint(
                    out_dir / f"checkpoint_epoch{epoch + 1:04d}.ckpt", state
                )
        save_train_checkpoint(out_dir / "checkpoint_final.ckpt", state)
    return state


# ---------------------------------------------------------------------------
# Train-state checkpointing (params + optimizer + EMA + counters)
# ---------------------------------------------------------------------------

def save_train_checkpoint(path: str | Path, state: TrainState) -> None:
    combined = ParamStore()
    for p, arr in state.params.items():
        combined.add(f"model/{p}", arr)
    for p, arr in state.ema.shadow.items():
        combined.add(f"ema/{p}", arr)
    for p in state.params.paths():
        combined.add(f"opt_m/{p}", Array(state.opt.m[p]))
        combined.add(f"opt_v/{p}", Array(state.opt.v[p]))
    extra = {
        "train_config": state.config.to_dict(),
        "epoch": state.epoch,
        "global_step": state.global_step,
        "opt_step": state.opt.step,
    }
    save_checkpoint(path, combined, state.config.model, extra=extra)


def load_train_checkpoint(path: str | Path, n_samples: int) -> TrainState:
    combined, _model_config, extra = load_checkpoint(path)
    if "train_config" not in extra:
        raise TrainError(f"{path}: not a training checkpoint")
    config = TrainConfig.from_dict(extra["train_config"])
    params = ParamStore()
    shadow = ParamStore()
    for p, arr in combined.items():
        if p.startswith("model/"):
            params.add(p[len("model/"):], Array(arr.data, requires_grad=True))
        elif p.startswith("ema/"):
            shadow.add(p[len("ema/"):], Array(arr.data))
    opt = OptimizerState.for_params(params, weight_decay=config.weight_decay)
    opt.step = int(extra["opt_step"])
    for p in params.paths():
        opt.m[p] = combined[f"opt_m/{p}"].data.copy()
        opt.v[p] = combined[f"opt_v/{p}"].data.copy()
    state = TrainState.initialize(config, n_samples)
    state.params = params
    state.ema = EmaState(shadow=shadow, momentum=config.ema_momentum)
    state.opt = opt
    state.epoch = int(extra["epoch"])
    state.global_step = int(extra["global_step"])
    return state


def load_model_params(path: str | Path) -> tuple[ParamStore, ModelConfig, TrainConfig | None]:
    """Model parameters from either a bare or a training checkpoint."""
    store, model_config, extra = load_checkpoint(path)
    if "train_config" in extra:
        params = ParamStore()
        for p, arr in store.items():
            if p.startswith("model/"):
                params.add(p[len("model/"):], Array(arr.data, requires_grad=True))
        return params, model_config, TrainConfig.from_dict(extra["train_config"])
    return store, model_config, None
