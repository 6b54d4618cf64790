"""The pre-trainable set-transformer network.

Pipeline: voxel features are projected to stage-1 width and tagged with a
positional embedding; a 4-stage encoder alternates KNN-restricted attention
blocks with farthest-point downsampling; multi-stage interpolation
(inverse-square-distance, 3 nearest) propagates every stage back to the full
visible set for the local decoder; mean pooling over final-stage tokens
yields one summary vector per cluster for the global decoder. Both decoders
are small full-attention transformers fed learned mask tokens.

All forward functions take a leading batch axis: features (B, N, C), coords
(B, N, 3). Cluster batches flatten (samples x clusters) into B.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .numerics import (
    Array,
    ParamStore,
    add,
    affine,
    batched_gather,
    broadcast_to,
    concat,
    gelu,
    layer_norm,
    matmul,
    mean_pool,
    mul,
    reshape,
    softmax,
    sum_axis,
    transpose,
)


class ModelError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def _default_heads(channels: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(max(1, c // 32) for c in channels)


@dataclass(frozen=True)
class ModelConfig:
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    stage_layers: tuple[int, ...] = (1, 1, 1, 1)
    heads_per_stage: tuple[int, ...] | None = None
    decoder_dim: int = 256
    decoder_layers: int = 2
    decoder_heads: int = 4
    downsample_ratio: float = 0.5
    knn_aggregation_size: int = 8
    feature_len: int = 25
    variant: str = "custom"
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        object.__setattr__(self, "stage_layers", tuple(self.stage_layers))
        if self.heads_per_stage is None:
            object.__setattr__(
                self, "heads_per_stage", _default_heads(self.stage_channels)
            )
        else:
            object.__setattr__(self, "heads_per_stage", tuple(self.heads_per_stage))
        if len(self.stage_channels) != 4 or len(self.stage_layers) != 4:
            raise ModelError("exactly 4 stages expected")
        if list(self.stage_channels) != sorted(set(self.stage_channels)):
            raise ModelError(
                f"stage channels must be strictly increasing, got {self.stage_channels}"
            )
        if any(c < 1 for c in self.stage_channels) or any(
            l < 1 for l in self.stage_layers
        ):
            raise ModelError("channels and layers must be positive")
        for c, h in zip(self.stage_channels, self.heads_per_stage):
            if h < 1 or c % h:
                raise ModelError(f"heads {h} must divide stage width {c}")
        if self.decoder_dim < 1 or self.decoder_dim % self.decoder_heads:
            raise ModelError("decoder_heads must divide decoder_dim")
        if not (0.0 < self.downsample_ratio < 1.0):
            raise ModelError("downsample_ratio must be in (0, 1)")
        if self.knn_aggregation_size < 1:
            raise ModelError("knn_aggregation_size must be positive")
        if self.feature_len < 1:
            raise ModelError("feature_len must be positive")
        if self.dtype not in ("float64", "float32"):
            raise ModelError(f"dtype must be float64/float32, got {self.dtype!r}")

    @property
    def n_stages(self) -> int:
        return len(self.stage_channels)

    def to_dict(self) -> dict:
        return {
            "stage_channels": list(self.stage_channels),
            "stage_layers": list(self.stage_layers),
            "heads_per_stage": list(self.heads_per_stage),
            "decoder_dim": self.decoder_dim,
            "decoder_layers": self.decoder_layers,
            "decoder_heads": self.decoder_heads,
            "downsample_ratio": self.downsample_ratio,
            "knn_aggregation_size": self.knn_aggregation_size,
            "feature_len": self.feature_len,
            "variant": self.variant,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ModelError(f"unknown model keys: {sorted(unknown)}")
        for key in ("stage_channels", "stage_layers", "heads_per_stage"):
            if key in d and d[key] is not None:
                d[key] = tuple(int(v) for v in d[key])
        return cls(**d)


_PRESETS = {
    "small": {"stage_channels": (64, 128, 256, 512), "stage_layers": (1, 1, 1, 1)},
    "base": {"stage_channels": (96, 192, 384, 768), "stage_layers": (2, 2, 2, 2)},
    "tiny": {
        "stage_channels": (16, 32, 64, 128),
        "stage_layers": (1, 1, 1, 1),
        "decoder_dim": 64,
    },
}


def make_config(variant: str, **overrides) -> ModelConfig:
    if variant not in _PRESETS:
        raise ModelError(f"unknown variant {variant!r}; pick from {sorted(_PRESETS)}")
    kw = dict(_PRESETS[variant])
    kw.update(overrides)
    return ModelConfig(variant=variant, **kw)


@dataclass
class TokenSet:
    """features: Array (B, N, C); coords: (B, N, 3); provenance: voxel indices."""

    features: Array
    coords: np.ndarray
    provenance: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        if self.features.shape[:2] != self.coords.shape[:2]:
            raise ModelError(
                f"token features {self.features.shape} vs coords {self.coords.shape}"
            )

    @property
    def n_tokens(self) -> int:
        return self.features.shape[1]


# ---------------------------------------------------------------------------
# Parameter layout
# ---------------------------------------------------------------------------

def _block_shapes(prefix: str, c: int) -> dict[str, tuple]:
    hidden = 4 * c
    return {
        f"{prefix}/ln1/g": (c,),
        f"{prefix}/ln1/b": (c,),
        f"{prefix}/attn/wq": (c, c),
        f"{prefix}/attn/bq": (c,),
        f"{prefix}/attn/wk": (c, c),
        f"{prefix}/attn/bk": (c,),
        f"{prefix}/attn/wv": (c, c),
        f"{prefix}/attn/bv": (c,),
        f"{prefix}/attn/wo": (c, c),
        f"{prefix}/attn/bo": (c,),
        f"{prefix}/ln2/g": (c,),
        f"{prefix}/ln2/b": (c,),
        f"{prefix}/ffn/w1": (c, hidden),
        f"{prefix}/ffn/b1": (hidden,),
        f"{prefix}/ffn/w2": (hidden, c),
        f"{prefix}/ffn/b2": (c,),
    }


def _pos_shapes(name: str, width: int) -> dict[str, tuple]:
    return {
        f"{name}/w1": (3, width),
        f"{name}/b1": (width,),
        f"{name}/w2": (width, width),
        f"{name}/b2": (width,),
    }


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Every learned parameter path and its shape."""
    f = config.feature_len
    c1 = config.stage_channels[0]
    cs = config.stage_channels[-1]
    d = config.decoder_dim
    shapes: dict[str, tuple] = {
        "embed/w": (f, c1),
        "embed/b": (c1,),
    }
    shapes.update(_pos_shapes("pos_enc", c1))
    shapes.update(_pos_shapes("pos_dec_l", d))
    shapes.update(_pos_shapes("pos_dec_g", d))
    for j, (c, layers) in enumerate(zip(config.stage_channels, config.stage_layers)):
        for i in range(layers):
            shapes.update(_block_shapes(f"enc/stage{j}/block{i:02d}", c))
        if j + 1 < config.n_stages:
            shapes[f"enc/down{j}/w"] = (c, config.stage_channels[j + 1])
            shapes[f"enc/down{j}/b"] = (config.stage_channels[j + 1],)
    shapes["interp/w"] = (sum(config.stage_channels), d)
    shapes["interp/b"] = (d,)
    shapes["dec_l/mask_token"] = (d,)
    for i in range(config.decoder_layers):
        shapes.update(_block_shapes(f"dec_l/block{i:02d}", d))
    shapes["dec_l/ln_f/g"] = (d,)
    shapes["dec_l/ln_f/b"] = (d,)
    shapes["dec_l/head/w"] = (d, f)
    shapes["dec_l/head/b"] = (f,)
    shapes["dec_g/in/w"] = (cs, d)
    shapes["dec_g/in/b"] = (d,)
    shapes["dec_g/mask_token"] = (d,)
    for i in range(config.decoder_layers):
        shapes.update(_block_shapes(f"dec_g/block{i:02d}", d))
    shapes["dec_g/ln_f/g"] = (d,)
    shapes["dec_g/ln_f/b"] = (d,)
    shapes["dec_g/head/w"] = (d, cs)
    shapes["dec_g/head/b"] = (cs,)
    return shapes


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def _trunc_normal(rng: np.random.Generator, shape: tuple, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


_WEIGHT_SUFFIXES = ("/w", "/w1", "/w2", "/wq", "/wk", "/wv", "/wo")


def init_params(config: ModelConfig, seed: int) -> ParamStore:
    """Truncated-normal (std 0.02, clipped at 2 sigma) weights and mask
    tokens; unit layer-norm gains; zero biases. Deterministic in seed."""
    rng = np.random.default_rng(seed)
    dtype = np.float64 if config.dtype == "float64" else np.float32
    params = ParamStore()
    for path, shape in sorted(param_shapes(config).items()):
        if path.endswith(_WEIGHT_SUFFIXES) or path.endswith("mask_token"):
            data = _trunc_normal(rng, shape, 0.02)
        elif path.endswith("/g"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params.add(path, Array(data.astype(dtype), requires_grad=True))
    return params


# ---------------------------------------------------------------------------
# Geometry helpers (plain numpy; gradients never flow through coordinates)
# ---------------------------------------------------------------------------

def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(B, N, 3) x (B, M, 3) -> (B, N, M) squared distances."""
    diff = a[:, :, None, :] - b[:, None, :, :]
    return np.einsum("bnmk,bnmk->bnm", diff, diff)


def batched_fps(coords: np.ndarray, n_out: int) -> np.ndarray:
    """Farthest-point sampling per batch row; same walk as the grouping
    module (centroid-nearest start, smallest-index distance ties)."""
    b, n, _ = coords.shape
    if n_out > n:
        raise ModelError(f"cannot downsample {n} tokens to {n_out}")
    centroid = coords.mean(axis=1, keepdims=True)
    d_c = ((coords - centroid) ** 2).sum(axis=2)
    chosen = np.empty((b, n_out), dtype=np.int64)
    chosen[:, 0] = np.argmin(d_c, axis=1)
    rows = np.arange(b)
    min_d = ((coords - coords[rows, chosen[:, 0]][:, None, :]) ** 2).sum(axis=2)
    for i in range(1, n_out):
        nxt = np.argmax(min_d, axis=1)
        chosen[:, i] = nxt
        d = ((coords - coords[rows, nxt][:, None, :]) ** 2).sum(axis=2)
        np.minimum(min_d, d, out=min_d)
    return chosen


def _knn_attention_bias(coords: np.ndarray, k: int, dtype) -> Array | None:
    """Additive (B, 1, N, N) bias: 0 for a query's k nearest keys, -1e30
    elsewhere. None when every key is already in range."""
    b, n, _ = coords.shape
    if k >= n:
        return None
    d2 = _pairwise_sq(coords, coords)
    neighbors = np.argsort(d2, axis=2, kind="stable")[:, :, :k]
    bias = np.full((b, n, n), -1e30, dtype=dtype)
    np.put_along_axis(bias, neighbors, 0.0, axis=2)
    return Array(bias[:, None, :, :])


def _ceil_count(x: float) -> int:
    r = round(x)
    if abs(x - r) < 1e-9:
        return int(r)
    return int(math.ceil(x))


def stage_token_counts(n_input: int, config: ModelConfig) -> list[int]:
    """Token count per stage: ceil(n_input * ratio^(j-1)), at least 1."""
    return [
        max(1, _ceil_count(n_input * config.downsample_ratio**j))
        for j in range(config.n_stages)
    ]


# ---------------------------------------------------------------------------
# Shared transformer pieces
# ---------------------------------------------------------------------------

def _ln_affine(x: Array, params: ParamStore, prefix: str) -> Array:
    return add(mul(layer_norm(x), params[f"{prefix}/g"]), params[f"{prefix}/b"])


def _attention(
    x: Array, params: ParamStore, prefix: str, heads: int, bias: Array | None
) -> Array:
    b, n, c = x.shape
    dh = c // heads

    def split(t: Array) -> Array:
        return transpose(reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split(affine(x, params[f"{prefix}/wq"], params[f"{prefix}/bq"]))
    k = split(affine(x, params[f"{prefix}/wk"], params[f"{prefix}/bk"]))
    v = split(affine(x, params[f"{prefix}/wv"], params[f"{prefix}/bv"]))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), Array(1.0 / math.sqrt(dh)))
    if bias is not None:
        scores = add(scores, bias)
    weights = softmax(scores, axis=-1)
    out = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (b, n, c))
    return affine(out, params[f"{prefix}/wo"], params[f"{prefix}/bo"])


def _ffn(x: Array, params: ParamStore, prefix: str) -> Array:
    h = gelu(affine(x, params[f"{prefix}/w1"], params[f"{prefix}/b1"]))
    return affine(h, params[f"{prefix}/w2"], params[f"{prefix}/b2"])


def _transformer_block(
    x: Array, params: ParamStore, prefix: str, heads: int, bias: Array | None
) -> Array:
    x = add(x, _attention(_ln_affine(x, params, f"{prefix}/ln1"), params,
                          f"{prefix}/attn", heads, bias))
    x = add(x, _ffn(_ln_affine(x, params, f"{prefix}/ln2"), params, f"{prefix}/ffn"))
    return x


def positional_embedding(
    coords: np.ndarray, params: ParamStore, name: str
) -> Array:
    c = Array(np.asarray(coords, dtype=float))
    h = gelu(affine(c, params[f"{name}/w1"], params[f"{name}/b1"]))
    return affine(h, params[f"{name}/w2"], params[f"{name}/b2"])


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------

def embed_voxels(
    features: np.ndarray,
    coords: np.ndarray,
    params: ParamStore,
    config: ModelConfig,
    provenance: np.ndarray | None = None,
) -> TokenSet:
    """Affine lift of voxel features to stage-1 width plus the encoder
    positional embedding. Accepts (N, F) or (B, N, F)."""
    feats = np.asarray(features, dtype=float)
    crds = np.asarray(coords, dtype=float)
    if feats.ndim == 2:
        feats = feats[None]
        crds = crds[None]
    if feats.shape[-1] != config.feature_len:
        raise ModelError(
            f"voxel feature length {feats.shape[-1]} != {config.feature_len}"
        )
    x = affine(Array(feats), params["embed/w"], params["embed/b"])
    x = add(x, positional_embedding(crds, params, "pos_enc"))
    return TokenSet(features=x, coords=crds, provenance=provenance)


def encoder_forward(
    tokens: TokenSet, params: ParamStore, config: ModelConfig
) -> list[TokenSet]:
    """All stage outputs; FPS downsampling plus channel lift between stages."""
    if tokens.n_tokens < 1:
        raise ModelError("encoder needs at least one token")
    h = tokens.features
    coords = tokens.coords
    prov = tokens.provenance
    counts = stage_token_counts(tokens.n_tokens, config)
    dtype = h.data.dtype
    rows = np.arange(h.shape[0])[:, None]
    stages: list[TokenSet] = []
    for j in range(config.n_stages):
        if j > 0:
            idx = batched_fps(coords, counts[j])
            h = batched_gather(h, idx)
            h = affine(h, params[f"enc/down{j-1}/w"], params[f"enc/down{j-1}/b"])
            coords = coords[rows, idx]
            prov = prov[rows, idx] if prov is not None else None
        bias = _knn_attention_bias(coords, config.knn_aggregation_size, dtype)
        for i in range(config.stage_layers[j]):
            h = _transformer_block(
                h, params, f"enc/stage{j}/block{i:02d}",
                config.heads_per_stage[j], bias,
            )
        stages.append(TokenSet(features=h, coords=coords, provenance=prov))
    return stages


# ---------------------------------------------------------------------------
# Interpolation upsampling
# ---------------------------------------------------------------------------

def _interp_neighbors(
    targets: np.ndarray, sources: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """3 nearest sources per target: (indices, normalized inverse-square
    weights), both (B, T, m). A zero-distance source takes weight 1."""
    m = min(3, sources.shape[1])
    d2 = _pairwise_sq(targets, sources)
    idx = np.argsort(d2, axis=2, kind="stable")[:, :, :m]
    d2s = np.take_along_axis(d2, idx, axis=2)
    exact = d2s[:, :, :1] <= 0.0
    with np.errstate(divide="ignore"):
        inv = np.where(d2s > 0.0, 1.0 / np.maximum(d2s, 1e-300), 0.0)
    weights = np.where(
        exact,
        np.eye(m)[0][None, None, :],
        inv / np.maximum(inv.sum(axis=2, keepdims=True), 1e-300),
    )
    return idx, weights


def interpolate_upsample(
    stages: list[TokenSet],
    target_coords: np.ndarray,
    params: ParamStore,
    config: ModelConfig,
) -> TokenSet:
    """Propagate every stage to the target coordinates and fuse.

    Per stage: inverse-square-distance interpolation over the 3 nearest
    tokens. The per-stage interpolants are concatenated channelwise and
    projected to decoder width.
    """
    if not stages:
        raise ModelError("no stages to interpolate from")
    targets = np.asarray(target_coords, dtype=float)
    b, t = targets.shape[:2]
    parts: list[Array] = []
    for ts in stages:
        idx, w = _interp_neighbors(targets, ts.coords)
        m = idx.shape[2]
        gathered = batched_gather(ts.features, idx.reshape(b, t * m))
        gathered = reshape(gathered, (b, t, m, ts.features.shape[-1]))
        weighted = sum_axis(mul(gathered, Array(w[:, :, :, None])), axis=2)
        parts.append(weighted)
    fused = concat(parts, axis=2)
    out = affine(fused, params["interp/w"], params["interp/b"])
    return TokenSet(features=out, coords=targets)


# ---------------------------------------------------------------------------
# Decoders and pooling
# ---------------------------------------------------------------------------

def _decoder_stack(
    seq: Array, params: ParamStore, name: str, config: ModelConfig
) -> Array:
    for i in range(config.decoder_layers):
        seq = _transformer_block(
            seq, params, f"{name}/block{i:02d}", config.decoder_heads, bias=None
        )
    return _ln_affine(seq, params, f"{name}/ln_f")


def _broadcast_token(token: Array, b: int, n: int) -> Array:
    d = token.shape[0]
    return broadcast_to(reshape(token, (1, 1, d)), (b, n, d))


def local_decode(
    visible: TokenSet,
    masked_coords: np.ndarray,
    params: ParamStore,
    config: ModelConfig,
) -> Array:
    """Predict masked voxel features: (B, K_m, v_w*v_h).

    Sequence = [visible tokens + pos ; mask token + pos] through the shared
    full-attention decoder; only masked rows pass the output head.
    """
    masked_coords = np.asarray(masked_coords, dtype=float)
    b, n_vis = visible.features.shape[:2]
    n_mask = masked_coords.shape[1]
    if n_vis < 1:
        raise ModelError("local decoder needs at least one visible token")
    if n_mask == 0:
        dtype = visible.features.data.dtype
        return Array(np.zeros((b, 0, config.feature_len), dtype=dtype))
    vis = add(visible.features, positional_embedding(visible.coords, params, "pos_dec_l"))
    msk = add(
        _broadcast_token(params["dec_l/mask_token"], b, n_mask),
        positional_embedding(masked_coords, params, "pos_dec_l"),
    )
    seq = concat([vis, msk], axis=1)
    seq = _decoder_stack(seq, params, "dec_l", config)
    tail = np.tile(np.arange(n_vis, n_vis + n_mask), (b, 1))
    masked_rows = batched_gather(seq, tail)
    return affine(masked_rows, params["dec_l/head/w"], params["dec_l/head/b"])


def summarize(final_stage: TokenSet) -> Array:
    """Mean over final-stage tokens: one summary vector per cluster."""
    return mean_pool(final_stage.features, axis=1)


def global_decode(
    visible_summaries: Array,
    visible_coords: np.ndarray,
    masked_coords: np.ndarray,
    params: ParamStore,
    config: ModelConfig,
) -> Array:
    """Predict summaries of masked clusters from visible ones: (B, M, C_S).

    Inputs are projected to decoder width; positional embeddings use cluster
    center coordinates; the head maps back to final-stage width.
    """
    visible_coords = np.asarray(visible_coords, dtype=float)
    masked_coords = np.asarray(masked_coords, dtype=float)
    b, n_vis = visible_summaries.shape[:2]
    n_mask = masked_coords.shape[1]
    if n_vis < 1:
        raise ModelError("global decoder needs at least one visible cluster")
    if n_mask < 1:
        raise ModelError(
            "global decoder called with no masked clusters; "
            "disable the global branch instead"
        )
    zin = affine(visible_summaries, params["dec_g/in/w"], params["dec_g/in/b"])
    vis = add(zin, positional_embedding(visible_coords, params, "pos_dec_g"))
    msk = add(
        _broadcast_token(params["dec_g/mask_token"], b, n_mask),
        positional_embedding(masked_coords, params, "pos_dec_g"),
    )
    seq = concat([vis, msk], axis=1)
    seq = _decoder_stack(seq, params, "dec_g", config)
    tail = np.tile(np.arange(n_vis, n_vis + n_mask), (b, 1))
    masked_rows = batched_gather(seq, tail)
    return affine(masked_rows, params["dec_g/head/w"], params["dec_g/head/b"])


def encode_clusters(
    features: np.ndarray,
    coords: np.ndarray,
    params: ParamStore,
    config: ModelConfig,
) -> list[TokenSet]:
    """embed_voxels + encoder_forward in one call."""
    return encoder_forward(embed_voxels(features, coords, params, config), params, config)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"EVOXCKPT1\n"
_CKPT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    params: ParamStore,
    config: ModelConfig,
    extra: dict | None = None,
) -> None:
    """Versioned container: JSON header (config echo, paths, shapes, payload
    checksum) followed by the raw little-endian float64 payload."""
    chunks = []
    entries = []
    for p, arr in params.items():
        data = np.ascontiguousarray(arr.data, dtype="<f8")
        entries.append({"path": p, "shape": list(arr.data.shape)})
        chunks.append(data.tobytes())
    payload = b"".join(chunks)
    header = {
        "format_version": _CKPT_VERSION,
        "config": config.to_dict(),
        "params": entries,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode() + b"\n"
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path: str | Path) -> tuple[ParamStore, ModelConfig, dict]:
    """Returns (params, config, extra). Verifies magic and checksum."""
    raw = Path(path).read_bytes()
    if not raw.startswith(_CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body = raw[len(_CKPT_MAGIC):]
    nl = body.index(b"\n")
    try:
        header = json.loads(body[:nl])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from None
    if header.get("format_version") != _CKPT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format_version {header.get('format_version')}"
        )
    payload = body[nl + 1:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    config = ModelConfig.from_dict(header["config"])
    dtype = np.float64 if config.dtype == "float64" else np.float32
    params = ParamStore()
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(payload, dtype="<f8", count=n, offset=offset)
        offset += n * 8
        params.add(
            entry["path"],
            Array(data.reshape(shape).astype(dtype), requires_grad=True),
        )
    if offset != len(payload):
        raise CheckpointError(f"{path}: payload length mismatch")
    return params, config, header.get("extra", {})
