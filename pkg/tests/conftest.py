import numpy as np
import pytest

from scenemotion import model as M
from scenemotion.scene import AgentTrack, DynamicElement, Polyline, RoadGraph, Scene


def make_track(positions, heading=None, speed=5.0, agent_type="vehicle", padding=None, **kw):
    positions = np.asarray(positions, dtype=np.float64)
    t = positions.shape[0]
    if heading is None:
        heading = np.zeros(t)
    heading = np.asarray(heading, dtype=np.float64)
    velocity = speed * np.stack([np.cos(heading), np.sin(heading)], axis=1)
    if padding is None:
        padding = np.zeros(t, dtype=bool)
    return AgentTrack(
        positions=positions,
        heading=heading,
        velocity=velocity,
        extent=kw.pop("extent", (4.5, 2.0, 1.6)),
        agent_type=agent_type,
        padding=np.asarray(padding, dtype=bool),
        **kw,
    )


def straight_track(start, heading, speed, t_count, dt=0.1, anchor_step=0, **kw):
    """Constant-velocity track whose position at anchor_step is exactly start."""
    direction = np.array([np.cos(heading), np.sin(heading), 0.0])
    steps = np.arange(t_count)[:, None] - anchor_step
    positions = np.asarray(start, dtype=np.float64) + steps * speed * dt * direction
    return make_track(positions, heading=np.full(t_count, heading), speed=speed, **kw)


def simple_scene(t_count=8, t_cur=3, n_agents=2, with_dynamic=True):
    """Small hand-built centered scene: the AV sits at the origin with
    heading zero at the current step; others run on parallel lanes."""
    agents = [
        straight_track((0.0, 0.0, 0.0), 0.0, 6.0, t_count, anchor_step=t_cur, is_av=True, is_predicted=True)
    ]
    for i in range(1, n_agents):
        agents.append(
            straight_track((5.0 * i, 4.0 * i, 0.0), 0.3 * i, 4.0, t_count, is_predicted=(i == 1))
        )
    polys = [
        Polyline(points=np.array([[x, -2.0, 0.0] for x in range(-10, 12, 2)], dtype=float), lane_type="lane_center"),
        Polyline(points=np.array([[-5.0, 6.0, 0.0]]), lane_type="sign"),
    ]
    dyn = []
    if with_dynamic:
        dyn = [
            DynamicElement(
                position=np.array([3.0, 5.0, 0.0]),
                state=np.array([1] * (t_count // 2) + [3] * (t_count - t_count // 2)),
                padding=np.zeros(t_count, dtype=bool),
            ),
            DynamicElement(
                position=np.array([-3.0, -5.0, 0.0]),
                state=np.full(t_count, 3),
                padding=np.zeros(t_count, dtype=bool),
            ),
        ]
    scene = Scene(
        agents=agents,
        roadgraph=RoadGraph(static_polylines=polys, dynamic_elements=dyn),
        agent_of_interest=0,
        current_step=t_cur,
        dt=0.1,
    )
    scene.validate()
    return scene


@pytest.fixture
def tiny_config():
    return M.ModelConfig(
        feature_dim=16,
        num_heads=2,
        ff_multiplier=2,
        num_futures=2,
        pos_embed_channels=4,
        time_embed_channels=4,
    )


@pytest.fixture
def tiny_params(tiny_config):
    return M.ModelParams.build(tiny_config, np.random.default_rng(7))
