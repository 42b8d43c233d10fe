"""Encoder-decoder over agents, time, and road-graph elements.

The encoder alternates attention along the time and agent axes (with
road-graph cross-attention interleaved), appends a mean-pooled artificial
agent row and time column for summary features, and the decoder tiles the
encoding per future before four more attention layers and the output heads.

forward() is pure given (scene, mask, params); concurrent forwards over
distinct scenes may share params read-only. The one sanctioned mutation is
the batch-norm running statistics, updated in place only when the caller
passes bn_update=True (the trainer does, during its own step).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields, replace

import numpy as np

from . import masking, scene as sc, tensor as T

ENCODER_SCHEDULE = (
    "time",
    "agents",
    "time",
    "agents",
    "time",
    "agents",
    "cross_static",
    "cross_dynamic",
    "time",
    "agents",
    "cross_static",
    "cross_dynamic",
    "time",
    "agents",
)
DECODER_SCHEDULE = ("time", "agents", "time", "agents")
# the artificial agent/time is appended after the first time+agent pair
ARTIFICIAL_AFTER = 2

UNFACTORIZED_SCHEDULE = (
    "joint",
    "joint",
    "joint",
    "cross_static",
    "cross_dynamic",
    "joint",
    "cross_static",
    "cross_dynamic",
    "joint",
)
UNFACTORIZED_ARTIFICIAL_AFTER = 1

# positions decode as scaled offsets from each agent's last revealed pose;
# desk-scale training converges far faster than raw absolute regression
POSITION_OUTPUT_SCALE = 10.0

LAYER_PARAM_NAMES = (
    "ln1/gain",
    "ln1/bias",
    "wq",
    "bq",
    "wk",
    "bk",
    "wv",
    "bv",
    "rescale",
    "wo",
    "bo",
    "ff1/w",
    "ff1/b",
    "ff2/w",
    "ff2/b",
    "ln2/gain",
    "ln2/bias",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 256
    num_heads: int = 4
    ff_multiplier: int = 4
    num_futures: int = 6
    pos_embed_channels: int = 32
    time_embed_channels: int = 32
    pos_min_timescale: float = 4.0
    pos_max_timescale: float = 256.0
    time_min_timescale: float = 6.0
    time_max_timescale: float = 80.0
    max_agents: int = 64
    max_steps: int = 128
    max_static: int = 256
    max_dynamic: int = 16

    def validate(self) -> None:
        if self.feature_dim % self.num_heads != 0:
            raise ConfigError(
                f"head count {self.num_heads} does not divide feature dim {self.feature_dim}"
            )
        if self.num_futures < 1:
            raise ConfigError("need at least one future")
        if self.pos_embed_channels % 2 or self.time_embed_channels % 2:
            raise ConfigError("embedding channel counts must be even")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ModelParams:
    """Every learned weight, addressable by hierarchical name."""

    def __init__(self, config: ModelConfig, entries: dict[str, T.Tensor]):
        self.config = config
        self.entries = entries

    def __getitem__(self, name: str) -> T.Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def trainable(self) -> list[tuple[str, T.Tensor]]:
        return [(n, t) for n, t in self.entries.items() if t.requires_grad]

    @classmethod
    def build(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        config.validate()
        d = config.feature_dim
        entries: dict[str, T.Tensor] = {}

        def weight(name, fan_in, fan_out, shape=None):
            entries[name] = T.Tensor(_glorot(rng, fan_in, fan_out, shape or (fan_in, fan_out)), requires_grad=True)

        def bias(name, n):
            entries[name] = T.Tensor(np.zeros(n), requires_grad=True)

        def norm(prefix, n):
            entries[prefix + "/gain"] = T.Tensor(np.ones(n), requires_grad=True)
            entries[prefix + "/bias"] = T.Tensor(np.zeros(n), requires_grad=True)

        def batch_norm(prefix, n):
            norm(prefix, n)
            entries[prefix + "/mean"] = T.Tensor(np.zeros(n), requires_grad=False)
            entries[prefix + "/var"] = T.Tensor(np.ones(n), requires_grad=False)

        def embedding(prefix, width_in):
            weight(prefix + "/w1", width_in, d)
            bias(prefix + "/b1", d)
            batch_norm(prefix + "/bn1", d)
            weight(prefix + "/w2", d, d)
            bias(prefix + "/b2", d)
            batch_norm(prefix + "/bn2", d)

        def transformer(prefix):
            norm(prefix + "/ln1", d)
            for w, b in (("wq", "bq"), ("wk", "bk"), ("wv", "bv")):
                weight(prefix + "/" + w, d, d)
                bias(prefix + "/" + b, d)
            entries[prefix + "/rescale"] = T.Tensor(
                np.full(d // config.num_heads, 1.0 / np.sqrt(d / config.num_heads)), requires_grad=True
            )
            weight(prefix + "/wo", d, d)
            bias(prefix + "/bo", d)
            kd = config.ff_multiplier * d
            weight(prefix + "/ff1/w", d, kd)
            bias(prefix + "/ff1/b", kd)
            weight(prefix + "/ff2/w", kd, d)
            bias(prefix + "/ff2/b", d)
            norm(prefix + "/ln2", d)

        def head(prefix):
            weight(prefix + "/w1", d, d)
            bias(prefix + "/b1", d)
            weight(prefix + "/w2", d, 1)
            bias(prefix + "/b2", 1)

        embedding("embed/agent", sc.agent_feature_width(config))
        embedding("embed/static", sc.static_point_feature_width(config))
        embedding("embed/dynamic", sc.dynamic_feature_width(config))
        for i, kind in enumerate(ENCODER_SCHEDULE):
            transformer(f"enc/{i:02d}_{kind}")
        weight("dec/futures/w", d + config.num_futures, d)
        bias("dec/futures/b", d)
        for i, kind in enumerate(DECODER_SCHEDULE):
            transformer(f"dec/{i:02d}_{kind}")
        norm("dec/out_ln", d)
        weight("dec/traj/w", d, 7)
        bias("dec/traj/b", 7)
        head("head/joint")
        head("head/marginal")
        return cls(config, entries)

    @classmethod
    def build_unfactorized(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        """Parameters for the ablation encoder (joint attention layers)."""
        base = cls.build(config, rng)
        entries = {n: t for n, t in base.entries.items() if n.startswith("embed/")}
        for i, kind in enumerate(UNFACTORIZED_SCHEDULE):
            _build_single_layer(entries, f"unf/{i:02d}_{kind}", config, rng)
        return cls(config, entries)


def _build_single_layer(entries: dict, prefix: str, config: ModelConfig, rng: np.random.Generator) -> None:
    d = config.feature_dim
    kd = config.ff_multiplier * d

    def weight(name, fan_in, fan_out):
        entries[name] = T.Tensor(_glorot(rng, fan_in, fan_out, (fan_in, fan_out)), requires_grad=True)

    entries[prefix + "/ln1/gain"] = T.Tensor(np.ones(d), requires_grad=True)
    entries[prefix + "/ln1/bias"] = T.Tensor(np.zeros(d), requires_grad=True)
    for w, b in (("wq", "bq"), ("wk", "bk"), ("wv", "bv")):
        weight(prefix + "/" + w, d, d)
        entries[prefix + "/" + b] = T.Tensor(np.zeros(d), requires_grad=True)
    entries[prefix + "/rescale"] = T.Tensor(
        np.full(d // config.num_heads, 1.0 / np.sqrt(d / config.num_heads)), requires_grad=True
    )
    weight(prefix + "/wo", d, d)
    entries[prefix + "/bo"] = T.Tensor(np.zeros(d), requires_grad=True)
    weight(prefix + "/ff1/w", d, kd)
    entries[prefix + "/ff1/b"] = T.Tensor(np.zeros(kd), requires_grad=True)
    weight(prefix + "/ff2/w", kd, d)
    entries[prefix + "/ff2/b"] = T.Tensor(np.zeros(d), requires_grad=True)
    entries[prefix + "/ln2/gain"] = T.Tensor(np.ones(d), requires_grad=True)
    entries[prefix + "/ln2/bias"] = T.Tensor(np.zeros(d), requires_grad=True)


@dataclass
class PredictionSet:
    """Decoded futures: [F, A, T, 7] trajectories plus scoring logits.

    Trajectory channels are x, y, z, the three positive Laplace scales
    (longitudinal, lateral, vertical), and heading. future_logits score
    whole futures (joint); trajectory_logits score per-agent trajectories
    (marginal).
    """

    trajectories: T.Tensor  # [F, A, T, 7]
    future_logits: T.Tensor  # [F]
    trajectory_logits: T.Tensor  # [F, A]

    def future_probs(self) -> np.ndarray:
        z = self.future_logits.data - self.future_logits.data.max()
        e = np.exp(z)
        return e / e.sum()

    def trajectory_probs(self) -> np.ndarray:
        z = self.trajectory_logits.data - self.trajectory_logits.data.max(axis=0, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=0, keepdims=True)


def transformer_layer(
    x: T.Tensor,
    kv: T.Tensor | None,
    valid_q: np.ndarray,
    valid_kv: np.ndarray,
    params,
    prefix: str,
    cfg: ModelConfig,
    capture: list | None = None,
) -> T.Tensor:
    """Pre-norm multi-head attention plus feed-forward, two skips, post-norm.

    x is [B, Nq, D]; kv is None for self-attention or [Bk, Nkv, D] with Bk
    equal to B or 1. Padded keys get attention weight exactly 0; rows with
    no valid key fall back to the skip and feed-forward paths.
    """
    d, h = cfg.feature_dim, cfg.num_heads
    dh = d // h
    b, nq = x.shape[0], x.shape[1]

    def p(name):
        return params[prefix + "/" + name]

    hnorm = T.layer_norm(x, p("ln1/gain"), p("ln1/bias"))
    kv_src = hnorm if kv is None else kv
    bk, nkv = kv_src.shape[0], kv_src.shape[1]

    q = T.matmul(hnorm, p("wq")) + p("bq")
    q = T.reshape(q, (b, nq, h, dh)) * p("rescale")
    q = T.transpose(q, (0, 2, 1, 3))  # [B, H, Nq, Dh]
    k = T.matmul(kv_src, p("wk")) + p("bk")
    k = T.transpose(T.reshape(k, (bk, nkv, h, dh)), (0, 2, 3, 1))  # [Bk, H, Dh, Nkv]
    v = T.matmul(kv_src, p("wv")) + p("bv")
    v = T.transpose(T.reshape(v, (bk, nkv, h, dh)), (0, 2, 1, 3))  # [Bk, H, Nkv, Dh]

    logits = T.matmul(q, k)  # [B, H, Nq, Nkv]
    weights = T.masked_softmax(logits, valid_kv[:, None, None, :])
    if capture is not None:
        capture.append(weights.data.copy())
    att = T.matmul(weights, v)  # [B, H, Nq, Dh]
    att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (b, nq, d))
    y2 = T.matmul(att, p("wo")) + p("bo")
    y2 = y2 * valid_q.astype(np.float64)[..., None]

    u = hnorm + y2
    f = T.matmul(T.relu(T.matmul(u, p("ff1/w")) + p("ff1/b")), p("ff2/w")) + p("ff2/b")
    out = x + y2 + f
    return T.layer_norm(out, p("ln2/gain"), p("ln2/bias"))


def append_artificial(x: T.Tensor, valid: np.ndarray) -> tuple[T.Tensor, np.ndarray]:
    """Append the mean-over-agents row and mean-over-time column.

    Means use valid cells only; the corner summarizes the whole grid. The
    artificial cells stay valid wherever they aggregated at least one cell.
    """
    a, t, d = x.shape
    m = T.Tensor(valid.astype(np.float64)[..., None])
    xm = x * m
    cnt_t = np.maximum(valid.sum(axis=0), 1)[:, None]
    row = T.tsum(xm, axis=0) * T.Tensor(1.0 / cnt_t)  # [T, D]
    cnt_a = np.maximum(valid.sum(axis=1), 1)[:, None]
    col = T.tsum(xm, axis=1) * T.Tensor(1.0 / cnt_a)  # [A, D]
    corner = T.tsum(xm, axis=(0, 1)) * (1.0 / max(valid.sum(), 1))  # [D]

    left = T.concat([x, T.reshape(col, (a, 1, d))], axis=1)  # [A, T+1, D]
    bottom = T.concat([row, T.reshape(corner, (1, d))], axis=0)  # [T+1, D]
    out = T.concat([left, T.reshape(bottom, (1, t + 1, d))], axis=0)  # [A+1, T+1, D]

    valid2 = np.zeros((a + 1, t + 1), dtype=bool)
    valid2[:a, :t] = valid
    valid2[:a, t] = valid.any(axis=1)
    valid2[a, :t] = valid.any(axis=0)
    valid2[a, t] = valid.any()
    return out, valid2


def _apply_axis_layer(
    z: T.Tensor,
    cell_valid: np.ndarray,
    kind: str,
    static: T.Tensor | None,
    dynamic: tuple[T.Tensor, np.ndarray] | None,
    params,
    prefix: str,
    cfg: ModelConfig,
    capture: list | None,
) -> T.Tensor:
    """One scheduled layer on an [A', T', D] grid (encoder shapes)."""
    a1, t1, d = z.shape
    if kind == "time":
        return transformer_layer(z, None, cell_valid, cell_valid, params, prefix, cfg, capture)
    if kind == "agents":
        zt = T.transpose(z, (1, 0, 2))
        out = transformer_layer(zt, None, cell_valid.T, cell_valid.T, params, prefix, cfg, capture)
        return T.transpose(out, (1, 0, 2))
    if kind == "joint":
        flat = T.reshape(z, (1, a1 * t1, d))
        fv = cell_valid.reshape(1, a1 * t1)
        out = transformer_layer(flat, None, fv, fv, params, prefix, cfg, capture)
        return T.reshape(out, (a1, t1, d))
    if kind == "cross_static":
        if static is None:
            return z
        gs = static.shape[0]
        zt = T.transpose(z, (1, 0, 2))  # queries batched per time step
        kv = T.reshape(static, (1, gs, d))
        out = transformer_layer(
            zt, kv, cell_valid.T, np.ones((1, gs), dtype=bool), params, prefix, cfg, capture
        )
        return T.transpose(out, (1, 0, 2))
    if kind == "cross_dynamic":
        if dynamic is None:
            return z
        dyn_feats, dyn_valid = dynamic
        gd, t_real = dyn_valid.shape[0], dyn_valid.shape[1]
        kv = T.transpose(dyn_feats, (1, 0, 2))  # [T, G_D, D]
        key_valid = dyn_valid.T  # [T, G_D]
        if t_real < t1:  # artificial time column has no paired dynamic step
            pad = T.Tensor(np.zeros((t1 - t_real, gd, d)))
            kv = T.concat([kv, pad], axis=0)
            key_valid = np.concatenate([key_valid, np.zeros((t1 - t_real, gd), dtype=bool)], axis=0)
        zt = T.transpose(z, (1, 0, 2))
        out = transformer_layer(zt, kv, cell_valid.T, key_valid, params, prefix, cfg, capture)
        return T.transpose(out, (1, 0, 2))
    raise ValueError(f"unknown layer kind {kind!r}")


def encode(
    agent_embed: T.Tensor,
    agent_valid: np.ndarray,
    static: T.Tensor | None,
    dynamic: tuple[T.Tensor, np.ndarray] | None,
    params,
    cfg: ModelConfig,
    capture: list | None = None,
) -> tuple[T.Tensor, np.ndarray]:
    """Run the factorized encoder; returns ([A+1, T+1, D], cell validity)."""
    z, valid = agent_embed, agent_valid
    for i, kind in enumerate(ENCODER_SCHEDULE):
        if i == ARTIFICIAL_AFTER:
            z, valid = append_artificial(z, valid)
        z = _apply_axis_layer(z, valid, kind, static, dynamic, params, f"enc/{i:02d}_{kind}", cfg, capture)
    return z, valid


def encode_unfactorized(
    agent_embed: T.Tensor,
    agent_valid: np.ndarray,
    static: T.Tensor | None,
    dynamic: tuple[T.Tensor, np.ndarray] | None,
    params,
    cfg: ModelConfig,
    capture: list | None = None,
) -> tuple[T.Tensor, np.ndarray]:
    """Ablation encoder: each time+agent pair becomes one joint layer over
    the flattened (A+1)(T+1) axis. Used only by the ablation harness."""
    z, valid = agent_embed, agent_valid
    for i, kind in enumerate(UNFACTORIZED_SCHEDULE):
        if i == UNFACTORIZED_ARTIFICIAL_AFTER:
            z, valid = append_artificial(z, valid)
        z = _apply_axis_layer(z, valid, kind, static, dynamic, params, f"unf/{i:02d}_{kind}", cfg, capture)
    return z, valid


def _head(x: T.Tensor, params, prefix: str) -> T.Tensor:
    h = T.relu(T.matmul(x, params[prefix + "/w1"]) + params[prefix + "/b1"])
    return T.matmul(h, params[prefix + "/w2"]) + params[prefix + "/b2"]


def decode(
    encoded: T.Tensor,
    cell_valid: np.ndarray,
    params,
    cfg: ModelConfig,
    anchors: np.ndarray | None = None,
    capture: list | None = None,
) -> PredictionSet:
    """Tile per future, run the decoder layers, and apply the output heads.

    anchors is an optional [A, 3] array of per-agent reference positions
    (each agent's last revealed pose); decoded positions are emitted as
    anchor + POSITION_OUTPUT_SCALE * raw, still absolute coordinates.
    """
    f = cfg.num_futures
    a1, t1, d = encoded.shape
    a, t = a1 - 1, t1 - 1

    z = T.tile_leading(encoded, f)  # [F, A+1, T+1, D]
    one_hot = np.zeros((f, a1, t1, f))
    for i in range(f):
        one_hot[i, :, :, i] = 1.0
    z = T.concat([z, T.Tensor(one_hot)], axis=-1)
    z = T.relu(T.matmul(z, params["dec/futures/w"]) + params["dec/futures/b"])

    valid_f = np.broadcast_to(cell_valid, (f,) + cell_valid.shape)
    for i, kind in enumerate(DECODER_SCHEDULE):
        prefix = f"dec/{i:02d}_{kind}"
        if kind == "time":
            zb = T.reshape(z, (f * a1, t1, d))
            vq = valid_f.reshape(f * a1, t1)
            zb = transformer_layer(zb, None, vq, vq, params, prefix, cfg, capture)
            z = T.reshape(zb, (f, a1, t1, d))
        else:
            zb = T.reshape(T.transpose(z, (0, 2, 1, 3)), (f * t1, a1, d))
            vq = valid_f.transpose(0, 2, 1).reshape(f * t1, a1)
            zb = transformer_layer(zb, None, vq, vq, params, prefix, cfg, capture)
            z = T.transpose(T.reshape(zb, (f, t1, a1, d)), (0, 2, 1, 3))

    z = T.layer_norm(z, params["dec/out_ln/gain"], params["dec/out_ln/bias"])

    real = z[:, :a, :t, :]
    raw = T.matmul(real, params["dec/traj/w"]) + params["dec/traj/b"]  # [F, A, T, 7]
    mu = raw[:, :, :, 0:3] * POSITION_OUTPUT_SCALE
    if anchors is not None:
        mu = mu + T.Tensor(anchors[None, :, None, :])
    scales = T.softplus(raw[:, :, :, 3:6]) + 1e-3
    heading = raw[:, :, :, 6:7]
    trajectories = T.concat([mu, scales, heading], axis=-1)

    corner = z[:, a, t, :]  # [F, D]
    future_logits = T.reshape(_head(corner, params, "head/joint"), (f,))
    per_agent = z[:, :a, t, :]  # [F, A, D]
    trajectory_logits = T.reshape(_head(per_agent, params, "head/marginal"), (f, a))
    return PredictionSet(trajectories, future_logits, trajectory_logits)


def forward(
    scene_in: sc.Scene,
    mask: masking.MaskSpec,
    params: ModelParams,
    training: bool = False,
    bn_update: bool = False,
    centered: bool = False,
    capture: list | None = None,
) -> PredictionSet:
    """Full pipeline: center, build features, encode, decode.

    Outputs are in the centered frame (absolute meters relative to the
    agent of interest). Pass centered=True when the scene has already been
    centered (the trainer does this so augmentation rotations survive).
    """
    cfg = params.config
    if not centered:
        scene_in, _ = sc.center_scene(scene_in)
    if scene_in.num_agents > cfg.max_agents or scene_in.num_steps > cfg.max_steps:
        raise ConfigError(
            f"scene size ({scene_in.num_agents} agents, {scene_in.num_steps} steps) "
            f"exceeds configured caps ({cfg.max_agents}, {cfg.max_steps})"
        )
    valid = ~masking.effective_padding(scene_in, mask)
    feats = sc.build_agent_features(scene_in, mask, cfg)
    x = sc.embedding_mlp(feats, valid, params, "embed/agent", training, bn_update)
    static = sc.encode_polylines(scene_in.roadgraph, params, cfg, training, bn_update)
    dynamic = sc.encode_dynamic(scene_in.roadgraph, scene_in.current_step, params, cfg, training, bn_update)
    encoded, cell_valid = encode(x, valid, static, dynamic, params, cfg, capture)
    anchors = revealed_anchors(scene_in, mask)
    return decode(encoded, cell_valid, params, cfg, anchors, capture)


def revealed_anchors(scene_in: sc.Scene, mask: masking.MaskSpec) -> np.ndarray:
    """Each agent's position at its last visible step up to the current one.

    Uses only revealed cells, so hidden ground truth can never leak through
    the anchor. Agents with no visible history anchor at the origin.
    """
    a_count, t_count = scene_in.num_agents, scene_in.num_steps
    anchors = np.zeros((a_count, 3))
    for i, agent in enumerate(scene_in.agents):
        visible = ~mask.hidden[i, : scene_in.current_step + 1] & ~agent.padding[: scene_in.current_step + 1]
        steps = np.nonzero(visible)[0]
        if steps.size:
            anchors[i] = agent.positions[steps[-1]]
    return anchors


def count_parameters(params: ModelParams) -> tuple[list[tuple[str, int]], int]:
    """Per-layer learned-parameter counts plus the total.

    At the reference configuration (D=256, H=4, k=4) each Transformer layer
    must contain exactly 789,824 parameters; the trajectory head 1,799 and
    the decoder output norm 512.
    """
    groups: dict[str, int] = {}
    for name, t in params.entries.items():
        if not t.requires_grad:
            continue  # batch-norm running statistics are state, not weights
        parts = name.split("/")
        if parts[0] in ("enc", "dec", "unf", "head") and len(parts) > 2:
            key = "/".join(parts[:2])
        else:
            key = "/".join(parts[:2])
        groups[key] = groups.get(key, 0) + t.data.size
    rows = sorted(groups.items())
    total = sum(c for _, c in rows)

    cfg = params.config
    if (cfg.feature_dim, cfg.num_heads, cfg.ff_multiplier) == (256, 4, 4):
        for key, count in rows:
            base = key.split("/")[-1]
            if any(base.endswith(k) for k in ("_time", "_agents", "_joint", "_cross_static", "_cross_dynamic")):
                if count != 789824:
                    raise AssertionError(f"layer {key} has {count} parameters, expected 789824")
        if "dec/traj" in groups and groups["dec/traj"] != 1799:
            raise AssertionError(f"dec/traj has {groups['dec/traj']} parameters, expected 1799")
        if "dec/out_ln" in groups and groups["dec/out_ln"] != 512:
            raise AssertionError(f"dec/out_ln has {groups['dec/out_ln']} parameters, expected 512")
    return rows, total


# ---------------------------------------------------------------------------
# checkpoint format: flat container of named float64 tensors


CHECKPOINT_MAGIC = b"SMCK"
CHECKPOINT_VERSION = 1


def _config_bytes(cfg: ModelConfig) -> bytes:
    lines = [f"{f.name}={getattr(cfg, f.name)!r}" for f in fields(cfg)]
    return "\n".join(lines).encode()


def _config_from_bytes(blob: bytes) -> ModelConfig:
    kwargs = {}
    valid_names = {f.name: f.type for f in fields(ModelConfig)}
    for line in blob.decode().splitlines():
        key, _, value = line.partition("=")
        if key not in valid_names:
            raise ValueError(f"unknown config field {key!r} in checkpoint")
        kwargs[key] = eval(value, {"__builtins__": {}})  # noqa: S307 - literals only
    return ModelConfig(**kwargs)


def save_checkpoint(path, params: ModelParams, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write params (and optional extra arrays, e.g. optimizer state) to disk.

    Little-endian float64 payload behind a header with a format version, a
    config record, and a name/shape/offset entry table. Byte-exact across
    save/load round trips.
    """
    arrays: dict[str, np.ndarray] = {n: t.data for n, t in params.entries.items()}
    for name, arr in (extra or {}).items():
        arrays[name] = np.asarray(arr, dtype=np.float64)
    names = sorted(arrays)

    table = io.BytesIO()
    offset = 0
    for name in names:
        arr = arrays[name]
        nb = name.encode()
        table.write(struct.pack("<H", len(nb)))
        table.write(nb)
        table.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            table.write(struct.pack("<Q", dim))
        table.write(struct.pack("<Q", offset))
        offset += arr.size * 8

    cfg_blob = _config_bytes(params.config)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(cfg_blob)))
        f.write(cfg_blob)
        f.write(struct.pack("<Q", len(names)))
        f.write(table.getvalue())
        for name in names:
            f.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", blob, 8)
    pos = 12
    cfg = _config_from_bytes(blob[pos : pos + cfg_len])
    pos += cfg_len
    (n_entries,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    metas = []
    for _ in range(n_entries):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode()
        pos += name_len
        (rank,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}Q", blob, pos) if rank else ()
        pos += 8 * rank
        (offset,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        metas.append((name, shape, offset))
    data_start = pos
    entries: dict[str, np.ndarray] = {}
    for name, shape, offset in metas:
        size = int(np.prod(shape)) if shape else 1
        start = data_start + offset
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=start).reshape(shape)
        entries[name] = arr.astype(np.float64).copy()
    return cfg, entries


def params_from_checkpoint(path) -> tuple[ModelParams, dict[str, np.ndarray]]:
    """Rebuild ModelParams from a checkpoint; extra arrays come back separately."""
    cfg, entries = load_checkpoint(path)
    reference = ModelParams.build(cfg, np.random.default_rng(0))
    missing = set(reference.entries) - set(entries)
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:5]}...")
    # preserve the canonical entry order so iteration-order-sensitive
    # consumers behave identically to a freshly built model
    out: dict[str, T.Tensor] = {}
    for name, ref in reference.entries.items():
        arr = entries[name]
        if ref.data.shape != arr.shape:
            raise ValueError(f"checkpoint entry {name} has shape {arr.shape}, expected {ref.data.shape}")
        out[name] = T.Tensor(arr, requires_grad=ref.requires_grad)
    extra = {name: arr for name, arr in entries.items() if name not in reference.entries}
    return ModelParams(cfg, out), extra
