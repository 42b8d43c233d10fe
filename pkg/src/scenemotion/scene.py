"""Scene data model: agent tracks, road graph, padding semantics, and the
scene-centric coordinate transform plus raw-feature / embedding builders.

Scene values are immutable after construction and safe to share across
threads; the feature builders are pure functions of (scene, mask, params).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T

AGENT_TYPES = ("vehicle", "pedestrian", "cyclist")
LANE_TYPES = (
    "lane_center",
    "lane_boundary",
    "road_edge",
    "stop_line",
    "crosswalk",
    "bike_lane",
    "driveway",
    "sign",
)
DYNAMIC_STATES = ("unknown", "red", "yellow", "green")
MAX_POLYLINE_POINTS = 20


def wrap_angle_array(h: np.ndarray) -> np.ndarray:
    """Wrap angles into [-pi, pi); values already in range pass through exactly."""
    h = np.asarray(h, dtype=np.float64)
    in_range = (h >= -math.pi) & (h < math.pi)
    wrapped = -math.pi + np.mod(h + math.pi, 2.0 * math.pi)
    return np.where(in_range, h, wrapped)


@dataclass
class AgentTrack:
    """One agent's observed state over T steps; padded steps carry no data."""

    positions: np.ndarray  # [T, 3] meters
    heading: np.ndarray  # [T] radians, in [-pi, pi) where unpadded
    velocity: np.ndarray  # [T, 2] m/s
    extent: tuple[float, float, float]  # length, width, height meters
    agent_type: str
    padding: np.ndarray  # [T] bool, True = no observation
    is_predicted: bool = False
    is_av: bool = False

    def num_steps(self) -> int:
        return self.positions.shape[0]


@dataclass
class Polyline:
    points: np.ndarray  # [n, 3] meters, 1 <= n <= MAX_POLYLINE_POINTS
    lane_type: str = "lane_center"


@dataclass
class DynamicElement:
    """A spatially static element whose state varies over time (e.g. a light)."""

    position: np.ndarray  # [3] meters
    state: np.ndarray  # [T] int indices into DYNAMIC_STATES
    padding: np.ndarray  # [T] bool


@dataclass
class RoadGraph:
    static_polylines: list[Polyline] = field(default_factory=list)
    dynamic_elements: list[DynamicElement] = field(default_factory=list)


@dataclass
class Scene:
    agents: list[AgentTrack]
    roadgraph: RoadGraph
    agent_of_interest: int
    current_step: int
    dt: float

    @property
    def num_agents(self) -> int:
        return len(self.agents)

    @property
    def num_steps(self) -> int:
        return self.agents[0].num_steps()

    def padding_grid(self) -> np.ndarray:
        return np.stack([a.padding for a in self.agents])

    def validate(self) -> None:
        if not self.agents:
            raise ValueError("scene has no agents")
        t = self.num_steps
        if not 0 < self.current_step < t:
            raise ValueError(f"current_step {self.current_step} outside (0, {t})")
        if not 0 <= self.agent_of_interest < len(self.agents):
            raise ValueError(f"invalid agent_of_interest {self.agent_of_interest}")
        aoi = self.agents[self.agent_of_interest]
        if aoi.padding[self.current_step]:
            raise ValueError("agent_of_interest has no observation at current_step")
        for i, a in enumerate(self.agents):
            if a.positions.shape != (t, 3) or a.heading.shape != (t,):
                raise ValueError(f"agent {i} track shape mismatch")
            if a.velocity.shape != (t, 2) or a.padding.shape != (t,):
                raise ValueError(f"agent {i} track shape mismatch")
            if a.agent_type not in AGENT_TYPES:
                raise ValueError(f"agent {i} has unknown type {a.agent_type!r}")
            live = ~a.padding
            h = a.heading[live]
            if live.any() and ((h < -math.pi).any() or (h >= math.pi).any()):
                raise ValueError(f"agent {i} heading outside [-pi, pi)")
        for j, p in enumerate(self.roadgraph.static_polylines):
            n = p.points.shape[0]
            if not 1 <= n <= MAX_POLYLINE_POINTS:
                raise ValueError(f"polyline {j} has {n} points (limit {MAX_POLYLINE_POINTS})")
            if p.lane_type not in LANE_TYPES:
                raise ValueError(f"polyline {j} has unknown lane type {p.lane_type!r}")
        for j, d in enumerate(self.roadgraph.dynamic_elements):
            if d.state.shape != (t,) or d.padding.shape != (t,):
                raise ValueError(f"dynamic element {j} state shape mismatch")


@dataclass
class SceneFrame:
    """Rigid motion applied by center_scene; apply_inverse undoes it exactly."""

    rotation: np.ndarray  # [2, 2], orthonormal, det +1
    translation: np.ndarray  # [3]

    def apply_inverse_xy(self, xy: np.ndarray) -> np.ndarray:
        return xy @ self.rotation + self.translation[:2]

    def apply_inverse_points(self, pts: np.ndarray) -> np.ndarray:
        out = pts.copy()
        out[..., :2] = pts[..., :2] @ self.rotation
        return out + self.translation


def split_polyline_points(points: np.ndarray) -> list[np.ndarray]:
    """Split a point array into consecutive chunks of at most 20 points."""
    return [points[i : i + MAX_POLYLINE_POINTS] for i in range(0, len(points), MAX_POLYLINE_POINTS)]


def _rotate_xy(xy: np.ndarray, rot: np.ndarray) -> np.ndarray:
    # rot rows are the new basis; equivalent to (rot @ xy.T).T
    return xy @ rot.T


def center_scene(scene: Scene) -> tuple[Scene, SceneFrame]:
    """Move the agent of interest's current pose to the origin, heading 0.

    Every agent track and road-graph coordinate gets the same rigid motion;
    the returned SceneFrame inverts it exactly.
    """
    scene.validate()
    aoi = scene.agents[scene.agent_of_interest]
    origin = aoi.positions[scene.current_step].copy()
    theta = float(aoi.heading[scene.current_step])
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, s], [-s, c]])  # rotation by -theta

    def move(a: AgentTrack) -> AgentTrack:
        pos = a.positions - origin
        pos = np.concatenate([_rotate_xy(pos[:, :2], rot), pos[:, 2:]], axis=1)
        return replace(
            a,
            positions=pos,
            heading=wrap_angle_array(a.heading - theta),
            velocity=_rotate_xy(a.velocity, rot),
            padding=a.padding.copy(),
        )

    def move_points(pts: np.ndarray) -> np.ndarray:
        p = pts - origin
        return np.concatenate([_rotate_xy(p[:, :2], rot), p[:, 2:]], axis=1)

    rg = RoadGraph(
        static_polylines=[replace(p, points=move_points(p.points)) for p in scene.roadgraph.static_polylines],
        dynamic_elements=[
            replace(d, position=move_points(d.position[None])[0], state=d.state.copy(), padding=d.padding.copy())
            for d in scene.roadgraph.dynamic_elements
        ],
    )
    centered = Scene(
        agents=[move(a) for a in scene.agents],
        roadgraph=rg,
        agent_of_interest=scene.agent_of_interest,
        current_step=scene.current_step,
        dt=scene.dt,
    )
    return centered, SceneFrame(rotation=rot, translation=origin)


# ---------------------------------------------------------------------------
# raw input features


def _embed_xyz(pos: np.ndarray, cfg) -> np.ndarray:
    """Concatenated sinusoidal embeddings of the x, y, z coordinates."""
    blocks = [
        T.sinusoidal_embedding(
            pos[..., i], cfg.pos_embed_channels, cfg.pos_min_timescale, cfg.pos_max_timescale
        ).data
        for i in range(3)
    ]
    return np.concatenate(blocks, axis=-1)


def _embed_time(num_agents: int, num_steps: int, cfg) -> np.ndarray:
    steps = np.broadcast_to(np.arange(num_steps, dtype=np.float64), (num_agents, num_steps))
    return T.sinusoidal_embedding(
        steps, cfg.time_embed_channels, cfg.time_min_timescale, cfg.time_max_timescale
    ).data


def agent_feature_width(cfg) -> int:
    return 3 * cfg.pos_embed_channels + len(AGENT_TYPES) + 6 + 1 + cfg.time_embed_channels


def dynamic_feature_width(cfg) -> int:
    return 3 * cfg.pos_embed_channels + len(DYNAMIC_STATES) + 1 + cfg.time_embed_channels


def static_point_feature_width(cfg) -> int:
    return 3 * cfg.pos_embed_channels + len(LANE_TYPES)


def build_agent_features(scene: Scene, mask, cfg) -> T.Tensor:
    """Per agent-step input features as an [A, T, W] constant tensor.

    Layout: xyz sinusoidal embeddings, one-hot agent type, yaw, extent,
    velocity, hidden indicator, temporal embedding. Hidden or padded steps
    are zeroed except the temporal embedding and the hidden indicator, so
    no future value can leak through the inputs.
    """
    hidden = np.asarray(mask.hidden, dtype=bool)
    a_count, t_count = scene.num_agents, scene.num_steps
    pos = np.stack([a.positions for a in scene.agents])
    visible = ~(hidden | scene.padding_grid())

    blocks = [_embed_xyz(pos, cfg)]
    one_hot = np.zeros((a_count, t_count, len(AGENT_TYPES)))
    for i, a in enumerate(scene.agents):
        one_hot[i, :, AGENT_TYPES.index(a.agent_type)] = 1.0
    blocks.append(one_hot)
    blocks.append(np.stack([a.heading for a in scene.agents])[..., None])
    blocks.append(np.broadcast_to(np.array([a.extent for a in scene.agents])[:, None, :], (a_count, t_count, 3)))
    blocks.append(np.stack([a.velocity for a in scene.agents]))
    feats = np.concatenate(blocks, axis=-1) * visible[..., None]

    indicator = hidden.astype(np.float64)[..., None]
    time_emb = _embed_time(a_count, t_count, cfg)
    return T.Tensor(np.concatenate([feats, indicator, time_emb], axis=-1))


# ---------------------------------------------------------------------------
# embedding networks (MLP + padding-aware batch norm)


def masked_batch_norm(
    x: T.Tensor,
    valid: np.ndarray,
    params,
    prefix: str,
    training: bool,
    bn_update: bool,
    momentum: float = 0.99,
    eps: float = 1e-6,
) -> T.Tensor:
    """Per-channel normalization with statistics taken over valid cells only.

    Normalization always uses the running statistics (treated as constants);
    bn_update folds the current batch's valid-cell statistics into them
    afterwards, so training and evaluation see the same normalizer. Batches
    here are single scenes (~A*T cells), whose per-batch statistics swing
    too much to normalize with directly.
    """
    gain = params[prefix + "/gain"]
    bias = params[prefix + "/bias"]
    run_mean = params[prefix + "/mean"]
    run_var = params[prefix + "/var"]
    out = (x - run_mean) / T.sqrt(run_var + eps) * gain + bias
    if training and bn_update:
        m = valid.astype(np.float64)[..., None]
        cnt = max(float(m.sum()), 1.0)
        axes = tuple(range(x.ndim - 1))
        mu = (x.data * m).sum(axis=axes) / cnt
        var = (((x.data - mu) ** 2) * m).sum(axis=axes) / cnt
        run_mean.data[...] = momentum * run_mean.data + (1.0 - momentum) * mu
        run_var.data[...] = momentum * run_var.data + (1.0 - momentum) * var
    return out


def embedding_mlp(
    x: T.Tensor,
    valid: np.ndarray,
    params,
    prefix: str,
    training: bool,
    bn_update: bool,
) -> T.Tensor:
    """Two affine+BN+ReLU stages with hidden and output width D."""
    h = T.matmul(x, params[prefix + "/w1"]) + params[prefix + "/b1"]
    h = masked_batch_norm(h, valid, params, prefix + "/bn1", training, bn_update)
    h = T.relu(h)
    h = T.matmul(h, params[prefix + "/w2"]) + params[prefix + "/b2"]
    h = masked_batch_norm(h, valid, params, prefix + "/bn2", training, bn_update)
    return T.relu(h)


def encode_polylines(
    roadgraph: RoadGraph,
    params,
    cfg,
    training: bool = False,
    bn_update: bool = False,
) -> T.Tensor | None:
    """One feature vector per polyline: per-point MLP then max pool.

    Returns an [G_S, D] tensor, or None when the road graph has no
    static polylines.
    """
    polys = roadgraph.static_polylines
    if not polys:
        return None
    longest = max(p.points.shape[0] for p in polys)
    raw = np.zeros((len(polys), longest, static_point_feature_width(cfg)))
    point_valid = np.zeros((len(polys), longest), dtype=bool)
    for i, p in enumerate(polys):
        n = p.points.shape[0]
        point_valid[i, :n] = True
        one_hot = np.zeros((n, len(LANE_TYPES)))
        one_hot[:, LANE_TYPES.index(p.lane_type)] = 1.0
        raw[i, :n] = np.concatenate([_embed_xyz(p.points, cfg), one_hot], axis=-1)

    feats = embedding_mlp(T.Tensor(raw), point_valid, params, "embed/static", training, bn_update)
    # masked max pool: invalid points cannot win
    sink = np.where(point_valid[..., None], 0.0, -1e30)
    pooled = T.reduce_max(feats * T.Tensor(point_valid.astype(np.float64)[..., None]) + T.Tensor(sink), axis=1)
    return pooled


def encode_dynamic(
    roadgraph: RoadGraph,
    current_step: int,
    params,
    cfg,
    training: bool = False,
    bn_update: bool = False,
) -> tuple[T.Tensor, np.ndarray] | None:
    """Per element-step features for dynamic road elements.

    Future states (beyond current_step) are hidden regardless of the task
    mask; padded steps are zeroed except the time embedding and indicator.
    Returns ([G_D, T, D], key validity [G_D, T]) or None when empty.
    """
    elems = roadgraph.dynamic_elements
    if not elems:
        return None
    t_count = elems[0].state.shape[0]
    g = len(elems)
    padding = np.stack([d.padding for d in elems])
    hidden = padding | (np.arange(t_count) > current_step)
    visible = ~hidden

    pos = np.broadcast_to(np.stack([d.position for d in elems])[:, None, :], (g, t_count, 3))
    states = np.stack([d.state for d in elems])
    one_hot = np.zeros((g, t_count, len(DYNAMIC_STATES)))
    for s in range(len(DYNAMIC_STATES)):
        one_hot[..., s] = states == s
    feats = np.concatenate([_embed_xyz(pos, cfg), one_hot], axis=-1) * visible[..., None]
    raw = np.concatenate([feats, hidden.astype(np.float64)[..., None], _embed_time(g, t_count, cfg)], axis=-1)

    out = embedding_mlp(T.Tensor(raw), ~padding, params, "embed/dynamic", training, bn_update)
    return out, ~padding
