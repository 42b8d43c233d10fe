"""Deterministic procedural generator of desk-scale multi-agent scenes,
plus the line-delimited scene file format.

Scenes come from four map templates. With probability interaction_rate a
scene contains an interacting pair (the AV plus one other vehicle) whose
paths meet at a conflict point; a latent coin decides which of the two
yields. The coin only affects motion after the current step, so the two
outcomes are indistinguishable from history alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scene import (
    AGENT_TYPES,
    DYNAMIC_STATES,
    LANE_TYPES,
    AgentTrack,
    DynamicElement,
    Polyline,
    RoadGraph,
    Scene,
    split_polyline_points,
    wrap_angle_array,
)

SCENE_FORMAT_VERSION = 1

TEMPLATES = ("straight_road", "intersection", "merge", "narrow_passage")


@dataclass
class GenConfig:
    seed: int = 0
    num_agents: tuple[int, int] = (3, 5)  # inclusive range, interacting pair included
    num_steps: int = 30
    current_step: int = 10
    dt: float = 0.1
    template: str = "intersection"
    interaction_rate: float = 1.0
    speed_range: tuple[float, float] = (5.0, 8.0)
    promote_moving_background: bool = False  # mark fast background agents predicted

    def validate(self) -> None:
        if self.template not in TEMPLATES:
            raise ValueError(f"unknown template {self.template!r}")
        if not 0 < self.current_step < self.num_steps:
            raise ValueError("current_step must lie strictly inside the horizon")
        if self.num_agents[0] < 2 or self.num_agents[1] < self.num_agents[0]:
            raise ValueError(f"bad agent count range {self.num_agents}")
        if not 0.0 <= self.interaction_rate <= 1.0:
            raise ValueError("interaction_rate must be a probability")
        if not 0.0 < self.speed_range[0] <= self.speed_range[1]:
            raise ValueError(f"bad speed range {self.speed_range}")


class _Path:
    """Dense 2-D polyline with arc-length lookup of position and tangent."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        seg = np.diff(self.points[:, :2], axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.headings = np.arctan2(seg[:, 1], seg[:, 0])

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def sample(self, s: float) -> tuple[np.ndarray, float]:
        # extrapolate linearly past either end so motion never freezes
        if s < 0.0:
            h = float(self.headings[0])
            d = np.array([math.cos(h), math.sin(h), 0.0])
            return self.points[0] + s * d, h
        if s > self.length:
            h = float(self.headings[-1])
            d = np.array([math.cos(h), math.sin(h), 0.0])
            return self.points[-1] + (s - self.length) * d, h
        i = int(np.searchsorted(self.cum, s, side="right") - 1)
        i = min(i, len(self.seg_len) - 1)
        frac = (s - self.cum[i]) / self.seg_len[i]
        p0, p1 = self.points[i], self.points[i + 1]
        return p0 + frac * (p1 - p0), float(self.headings[i])

    def arclength_of_closest(self, point_xy: np.ndarray) -> float:
        d = np.hypot(self.points[:, 0] - point_xy[0], self.points[:, 1] - point_xy[1])
        return float(self.cum[int(np.argmin(d))])


def _line(p0, p1, spacing=0.5) -> np.ndarray:
    p0, p1 = np.asarray(p0, dtype=np.float64), np.asarray(p1, dtype=np.float64)
    n = max(2, int(math.ceil(np.hypot(*(p1 - p0)[:2]) / spacing)) + 1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    return p0 + t * (p1 - p0)


def _blend(p0, mid, p1, spacing=0.5) -> np.ndarray:
    """Quadratic Bezier through a corner, so tangents vary smoothly."""
    p0, mid, p1 = (np.asarray(p, dtype=np.float64) for p in (p0, mid, p1))
    n = max(8, int((np.hypot(*(mid - p0)[:2]) + np.hypot(*(p1 - mid)[:2])) / spacing))
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * mid + t**2 * p1


@dataclass
class _MapDef:
    paths: list[_Path]
    conflict: np.ndarray | None  # xy of the interaction conflict point
    conflict_paths: tuple[int, int] | None
    polylines: list[Polyline] = field(default_factory=list)
    light_position: np.ndarray | None = None


def _road_polylines(paths: list[_Path], extra: list[tuple[np.ndarray, str]]) -> list[Polyline]:
    out = []
    for p in paths:
        pts = p.points[:: max(1, len(p.points) // 28)]
        for chunk in split_polyline_points(pts):
            out.append(Polyline(points=chunk.copy(), lane_type="lane_center"))
    for pts, lane_type in extra:
        for chunk in split_polyline_points(pts):
            out.append(Polyline(points=chunk.copy(), lane_type=lane_type))
    return out


def _build_map(template: str) -> _MapDef:
    z = 0.0
    if template == "straight_road":
        paths = [
            _Path(_line((-80, -3.5, z), (80, -3.5, z))),
            _Path(_line((-80, 0.0, z), (80, 0.0, z))),
            _Path(_line((80, 3.5, z), (-80, 3.5, z))),
        ]
        extra = [
            (_line((-80, -5.5, z), (80, -5.5, z), spacing=4.0), "road_edge"),
            (_line((-80, 5.5, z), (80, 5.5, z), spacing=4.0), "road_edge"),
        ]
        return _MapDef(paths, None, None, _road_polylines(paths, extra))
    if template == "intersection":
        paths = [
            _Path(_line((-80, -1.75, z), (80, -1.75, z))),  # eastbound
            _Path(_line((-1.75, -80, z), (-1.75, 80, z))),  # northbound
            _Path(_line((80, 1.75, z), (-80, 1.75, z))),  # westbound
        ]
        conflict = np.array([-1.75, -1.75])
        extra = [
            (_line((-80, -5.0, z), (-6, -5.0, z), spacing=4.0), "road_edge"),
            (_line((6, -5.0, z), (80, -5.0, z), spacing=4.0), "road_edge"),
            (_line((-80, 5.0, z), (-6, 5.0, z), spacing=4.0), "road_edge"),
            (_line((6, 5.0, z), (80, 5.0, z), spacing=4.0), "road_edge"),
            (_line((-5.0, -6.5, z), (5.0, -6.5, z), spacing=2.0), "crosswalk"),
            (np.array([[0.0, 8.0, z]]), "sign"),
        ]
        m = _MapDef(paths, conflict, (0, 1), _road_polylines(paths, extra))
        m.light_position = np.array([4.0, 5.0, z])
        return m
    if template == "merge":
        main = _Path(_line((-80, 0.0, z), (80, 0.0, z)))
        # the ramp stays wide of the main lane until just before the junction
        # (a stopped yielder stays laterally clear of the corner), then takes
        # a tangent-matched rounding so headings vary smoothly
        steep = _blend((-70, 12.0, z), (-4.0, 12.0, z), (2.8, 1.66, z))
        rounding = _blend((2.8, 1.66, z), (3.89, 0.0, z), (9.0, 0.0, z))
        ramp_pts = np.concatenate([steep[:-1], rounding[:-1], _line((9, 0.0, z), (80, 0.0, z))])
        ramp = _Path(ramp_pts)
        conflict = np.array([9.0, 0.0])
        extra = [(_line((-80, -2.5, z), (80, -2.5, z), spacing=4.0), "road_edge")]
        return _MapDef([main, ramp], conflict, (0, 1), _road_polylines([main, ramp], extra))
    if template == "narrow_passage":
        east = _Path(
            np.concatenate(
                [
                    _line((-80, -2.6, z), (-16, -2.6, z))[:-1],
                    _blend((-16, -2.6, z), (-8, -1.5, z), (0, -1.5, z))[:-1],
                    _blend((0, -1.5, z), (8, -1.5, z), (16, -2.6, z))[:-1],
                    _line((16, -2.6, z), (80, -2.6, z)),
                ]
            )
        )
        west = _Path(
            np.concatenate(
                [
                    _line((80, 2.6, z), (16, 2.6, z))[:-1],
                    _blend((16, 2.6, z), (8, 1.5, z), (0, 1.5, z))[:-1],
                    _blend((0, 1.5, z), (-8, 1.5, z), (-16, 2.6, z))[:-1],
                    _line((-16, 2.6, z), (-80, 2.6, z)),
                ]
            )
        )
        conflict = np.array([0.0, 0.0])
        extra = [
            (_line((-80, -4.4, z), (80, -4.4, z), spacing=4.0), "road_edge"),
            (_line((-80, 4.4, z), (-18, 4.4, z), spacing=4.0), "road_edge"),
            (_line((18, 4.4, z), (80, 4.4, z), spacing=4.0), "road_edge"),
            (_line((-18, 4.4, z), (18, 4.4, z), spacing=2.0), "lane_boundary"),
        ]
        return _MapDef([east, west], conflict, (0, 1), _road_polylines([east, west], extra))
    raise ValueError(f"unknown template {template!r}")


def _rollout(path: _Path, s0: float, speeds: np.ndarray, dt: float) -> AgentTrack:
    t_count = len(speeds)
    s = s0 + np.concatenate([[0.0], np.cumsum(speeds[:-1])]) * dt
    positions = np.zeros((t_count, 3))
    heading = np.zeros(t_count)
    for t in range(t_count):
        positions[t], heading[t] = path.sample(float(s[t]))
    velocity = speeds[:, None] * np.stack([np.cos(heading), np.sin(heading)], axis=1)
    return AgentTrack(
        positions=positions,
        heading=wrap_angle_array(heading),
        velocity=velocity,
        extent=(4.5, 2.0, 1.6),
        agent_type="vehicle",
        padding=np.zeros(t_count, dtype=bool),
        is_predicted=False,
        is_av=False,
    )


def _yield_profile(
    v: float, t_count: int, t_brake: int, t_conf: int, target_deficit: float, dt: float
) -> np.ndarray:
    """Yielding speed profile sized so the agent trails the conflict point by
    roughly target_deficit meters when the other agent crosses it.

    Braking starts strictly after the current step so the two outcomes of
    the latent coin share an identical history. After the conflict clears
    the yielder crawls briefly, then resumes below its nominal speed so it
    never catches up within the horizon.
    """
    window = max(1, t_conf - t_brake)
    slow_frac = min(0.85, target_deficit / (v * window * dt))
    crawl_end = min(t_count, t_conf + 5)
    speeds = np.full(t_count, v)
    for t in range(t_count):
        if t_brake <= t < t_conf:
            speeds[t] = v * (1.0 - slow_frac)
        elif t_conf <= t < crawl_end:
            speeds[t] = 0.12 * v
        elif t >= crawl_end:
            frac = min(1.0, (t - crawl_end + 1) / 6.0)
            speeds[t] = 0.12 * v + frac * (0.7 - 0.12) * v
    return speeds


def generate_scene(config: GenConfig, index: int) -> Scene:
    """Build one scene, fully determined by (config.seed, index)."""
    config.validate()
    rng = np.random.default_rng([config.seed, index, 0x5CE7E])
    m = _build_map(config.template)
    t_count, t_cur, dt = config.num_steps, config.current_step, config.dt
    agents: list[AgentTrack] = []
    interacting = rng.random() < config.interaction_rate and m.conflict is not None

    if interacting:
        ia, ib = m.conflict_paths
        pa, pb = m.paths[ia], m.paths[ib]
        sa = pa.arclength_of_closest(m.conflict)
        sb = pb.arclength_of_closest(m.conflict)
        # deficit targets: merging pairs share a lane afterwards and need more
        # than a car length; crossings need clearance without drifting past
        # the 5 m interaction envelope. Merge also wants moderate corner
        # speeds so headings stay consistent with displacement.
        if config.template == "merge":
            lead, deficit = 12, 6.5
            lo = min(max(config.speed_range[0], 6.4), 7.2)
            pair_speeds = (lo, min(max(lo, config.speed_range[1]), 7.2))
        elif config.template == "narrow_passage":
            lead, deficit = 8, 3.2
            pair_speeds = config.speed_range
        else:
            lead, deficit = 10, 4.0
            pair_speeds = config.speed_range
        t_conf = int(rng.integers(t_cur + lead, max(t_cur + lead + 1, t_count - 4)))
        va = float(rng.uniform(*pair_speeds))
        vb = float(rng.uniform(*pair_speeds))
        coin = int(rng.integers(2))  # who yields; invisible before t_cur + 1
        t_brake = t_cur + 1
        speeds_a = np.full(t_count, va) if coin else _yield_profile(va, t_count, t_brake, t_conf, deficit, dt)
        speeds_b = _yield_profile(vb, t_count, t_brake, t_conf, deficit, dt) if coin else np.full(t_count, vb)
        start_a = sa - va * t_conf * dt
        start_b = sb - vb * t_conf * dt
        av = _rollout(pa, start_a, speeds_a, dt)
        other = _rollout(pb, start_b, speeds_b, dt)
        av.is_av = True
        av.is_predicted = True
        other.is_predicted = True
        agents += [av, other]
    else:
        path_id = int(rng.integers(len(m.paths)))
        v = float(rng.uniform(*config.speed_range))
        path = m.paths[path_id]
        av_start = float(rng.uniform(0.1, 0.4)) * path.length
        av = _rollout(path, av_start, np.full(t_count, v), dt)
        av.is_av = True
        av.is_predicted = True
        agents.append(av)

    # paths that join share one headway group, in junction-aligned coordinates
    if config.template == "merge":
        group = {pid: 0 for pid in range(len(m.paths))}
        offset = {pid: -m.paths[pid].arclength_of_closest(m.conflict) for pid in range(len(m.paths))}
    else:
        group = {pid: pid for pid in range(len(m.paths))}
        offset = {pid: 0.0 for pid in range(len(m.paths))}

    placements: dict[int, list[tuple[float, float, float]]] = {}

    def place(pid: int, s0: float, v_lo: float, v_hi: float) -> None:
        placements.setdefault(group[pid], []).append((s0 + offset[pid], v_lo, v_hi))

    def headway_ok(pid: int, s0: float, speed: float) -> bool:
        # gap must keep its sign and stay >= 9 m over the other agent's whole
        # speed envelope (a yielding pair member may slow to a crawl)
        s0 = s0 + offset[pid]
        for s_other, v_lo, v_hi in placements.get(group[pid], []):
            g0 = s0 - s_other
            for v_other in (v_lo, v_hi):
                g1 = g0 + (speed - v_other) * t_count * dt
                if min(abs(g0), abs(g1)) < 9.0 or g0 * g1 <= 0.0:
                    return False
        return True

    if interacting:
        place(ia, start_a, 0.08 * va, va)
        place(ib, start_b, 0.08 * vb, vb)
    else:
        place(path_id, av_start, v, v)

    total = int(rng.integers(config.num_agents[0], config.num_agents[1] + 1))
    attempts = 0
    while len(agents) < total and attempts < total * 8:
        attempts += 1
        pid = int(rng.integers(len(m.paths)))
        path = m.paths[pid]
        kind = rng.random()
        if kind < 0.2:
            speed = float(rng.uniform(0.8, 1.6))
            extent, agent_type = (0.6, 0.6, 1.8), "pedestrian"
        elif kind < 0.35:
            speed = float(rng.uniform(2.5, 4.5))
            extent, agent_type = (1.8, 0.6, 1.7), "cyclist"
        else:
            speed = float(rng.uniform(*config.speed_range))
            extent, agent_type = (4.5, 2.0, 1.6), "vehicle"
        # keep background starts clear of the conflict region
        s0 = float(rng.uniform(0.05, 0.9)) * path.length
        if m.conflict is not None:
            s_conf = path.arclength_of_closest(m.conflict)
            if abs(s0 - s_conf) < 25.0 or s0 < s_conf <= s0 + speed * t_count * dt + 8.0:
                s0 = max(0.0, s_conf - 60.0 - float(rng.uniform(0.0, 15.0)))
        if not headway_ok(pid, s0, speed):
            continue
        place(pid, s0, speed, speed)
        track = _rollout(path, s0, np.full(t_count, speed), dt)
        track.extent = extent
        track.agent_type = agent_type
        if rng.random() < 0.25:  # late-appearing agent
            spawn = int(rng.integers(1, t_count - 2))
            track.padding[:spawn] = True
        if config.promote_moving_background and not track.padding.any():
            moved = np.linalg.norm(track.positions[-1, :2] - track.positions[0, :2])
            if moved >= 6.0:
                track.is_predicted = True
        agents.append(track)

    if not interacting:
        # mark one background agent predicted so every scene has at least two
        for a in agents[1:]:
            if not a.padding[: t_cur + 1].any():
                a.is_predicted = True
                break

    dynamic = []
    if m.light_position is not None:
        # one signal per approach, on opposite phases
        switch = int(rng.integers(2, t_count - 2))
        state = np.full(t_count, DYNAMIC_STATES.index("red"))
        state[switch:] = DYNAMIC_STATES.index("green")
        other = np.full(t_count, DYNAMIC_STATES.index("green"))
        other[switch:] = DYNAMIC_STATES.index("red")
        mirrored = m.light_position * np.array([-1.0, -1.0, 1.0])
        dynamic.append(
            DynamicElement(position=m.light_position.copy(), state=state, padding=np.zeros(t_count, dtype=bool))
        )
        dynamic.append(
            DynamicElement(position=mirrored, state=other, padding=np.zeros(t_count, dtype=bool))
        )

    scene = Scene(
        agents=agents,
        roadgraph=RoadGraph(static_polylines=[Polyline(p.points.copy(), p.lane_type) for p in m.polylines], dynamic_elements=dynamic),
        agent_of_interest=0,
        current_step=t_cur,
        dt=dt,
    )
    scene.validate()
    return scene


# ---------------------------------------------------------------------------
# scene file format (line-delimited text, one scene per file)


class SceneParseError(ValueError):
    """Malformed scene file; message carries the line number and field."""


def _fmt(x: float) -> str:
    return repr(float(x))


def write_scene(path, scene: Scene) -> None:
    rg = scene.roadgraph
    lines = [
        f"scenemotion-scene {SCENE_FORMAT_VERSION}",
        f"dt {_fmt(scene.dt)}",
        f"num_steps {scene.num_steps}",
        f"current_step {scene.current_step}",
        f"agent_of_interest {scene.agent_of_interest}",
        f"num_agents {scene.num_agents}",
        f"num_polylines {len(rg.static_polylines)}",
        f"num_dynamic {len(rg.dynamic_elements)}",
    ]
    for i, a in enumerate(scene.agents):
        ext = " ".join(_fmt(e) for e in a.extent)
        lines.append(f"agent {i} {a.agent_type} {ext} {int(a.is_av)} {int(a.is_predicted)}")
        for t in range(scene.num_steps):
            x, y, z = a.positions[t]
            vx, vy = a.velocity[t]
            lines.append(
                f"track {i} {t} {int(a.padding[t])} {_fmt(x)} {_fmt(y)} {_fmt(z)} "
                f"{_fmt(a.heading[t])} {_fmt(vx)} {_fmt(vy)}"
            )
    for i, p in enumerate(rg.static_polylines):
        lines.append(f"polyline {i} {p.lane_type} {p.points.shape[0]}")
        for j in range(p.points.shape[0]):
            x, y, z = p.points[j]
            lines.append(f"point {i} {j} {_fmt(x)} {_fmt(y)} {_fmt(z)}")
    for i, d in enumerate(rg.dynamic_elements):
        x, y, z = d.position
        lines.append(f"dynamic {i} {_fmt(x)} {_fmt(y)} {_fmt(z)}")
        for t in range(scene.num_steps):
            lines.append(f"dstate {i} {t} {int(d.padding[t])} {DYNAMIC_STATES[int(d.state[t])]}")
    lines.append("end")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


class _Reader:
    def __init__(self, path):
        with open(path) as f:
            self.lines = f.read().splitlines()
        self.pos = 0

    def next(self, expected: str) -> list[str]:
        if self.pos >= len(self.lines):
            raise SceneParseError(f"line {self.pos + 1}: file truncated, expected {expected!r}")
        parts = self.lines[self.pos].split()
        self.pos += 1
        if not parts or parts[0] != expected:
            raise SceneParseError(f"line {self.pos}: expected {expected!r}, got {self.lines[self.pos - 1]!r}")
        return parts[1:]


def read_scene(path) -> Scene:
    r = _Reader(path)
    header = r.next("scenemotion-scene")
    version = int(header[0])
    if version != SCENE_FORMAT_VERSION:
        raise SceneParseError(f"line 1: unsupported scene format version {version}")
    try:
        dt = float(r.next("dt")[0])
        t_count = int(r.next("num_steps")[0])
        t_cur = int(r.next("current_step")[0])
        aoi = int(r.next("agent_of_interest")[0])
        n_agents = int(r.next("num_agents")[0])
        n_polys = int(r.next("num_polylines")[0])
        n_dyn = int(r.next("num_dynamic")[0])

        agents = []
        for i in range(n_agents):
            f = r.next("agent")
            if int(f[0]) != i:
                raise SceneParseError(f"line {r.pos}: agent index {f[0]} out of order")
            if f[1] not in AGENT_TYPES:
                raise SceneParseError(f"line {r.pos}: unknown agent type {f[1]!r}")
            track = AgentTrack(
                positions=np.zeros((t_count, 3)),
                heading=np.zeros(t_count),
                velocity=np.zeros((t_count, 2)),
                extent=(float(f[2]), float(f[3]), float(f[4])),
                agent_type=f[1],
                padding=np.zeros(t_count, dtype=bool),
                is_av=bool(int(f[5])),
                is_predicted=bool(int(f[6])),
            )
            for t in range(t_count):
                g = r.next("track")
                if int(g[0]) != i or int(g[1]) != t:
                    raise SceneParseError(f"line {r.pos}: track row out of order")
                track.padding[t] = bool(int(g[2]))
                track.positions[t] = [float(g[3]), float(g[4]), float(g[5])]
                track.heading[t] = float(g[6])
                track.velocity[t] = [float(g[7]), float(g[8])]
            agents.append(track)

        polylines = []
        for i in range(n_polys):
            f = r.next("polyline")
            if int(f[0]) != i:
                raise SceneParseError(f"line {r.pos}: polyline index out of order")
            if f[1] not in LANE_TYPES:
                raise SceneParseError(f"line {r.pos}: unknown lane type {f[1]!r}")
            n_points = int(f[2])
            pts = np.zeros((n_points, 3))
            for j in range(n_points):
                g = r.next("point")
                if int(g[0]) != i or int(g[1]) != j:
                    raise SceneParseError(f"line {r.pos}: point row out of order")
                pts[j] = [float(g[2]), float(g[3]), float(g[4])]
            polylines.append(Polyline(points=pts, lane_type=f[1]))

        dynamic = []
        for i in range(n_dyn):
            f = r.next("dynamic")
            if int(f[0]) != i:
                raise SceneParseError(f"line {r.pos}: dynamic index out of order")
            elem = DynamicElement(
                position=np.array([float(f[1]), float(f[2]), float(f[3])]),
                state=np.zeros(t_count, dtype=np.int64),
                padding=np.zeros(t_count, dtype=bool),
            )
            for t in range(t_count):
                g = r.next("dstate")
                if int(g[0]) != i or int(g[1]) != t:
                    raise SceneParseError(f"line {r.pos}: dstate row out of order")
                elem.padding[t] = bool(int(g[2]))
                if g[3] not in DYNAMIC_STATES:
                    raise SceneParseError(f"line {r.pos}: unknown dynamic state {g[3]!r}")
                elem.state[t] = DYNAMIC_STATES.index(g[3])
            dynamic.append(elem)

        r.next("end")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, SceneParseError):
            raise
        raise SceneParseError(f"line {r.pos}: bad field value ({exc})") from exc

    scene = Scene(
        agents=agents,
        roadgraph=RoadGraph(static_polylines=polylines, dynamic_elements=dynamic),
        agent_of_interest=aoi,
        current_step=t_cur,
        dt=dt,
    )
    scene.validate()
    return scene
