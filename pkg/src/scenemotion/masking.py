"""Hidden-indicator grids that turn one model into three tasks, plus the
padding/hidden interaction rules and training-time scene augmentation.

A cell marked hidden (True) is removed from the model input; padded cells
are always hidden. If masking leaves an agent without a single visible
non-padded step, the whole agent is treated as padded and drops out of
attention and the loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .scene import Scene, wrap_angle_array

MOTION_PREDICTION = "motion_prediction"
CONDITIONAL = "conditional_motion_prediction"
GOAL_CONDITIONED = "goal_conditioned"
STRATEGIES = (MOTION_PREDICTION, CONDITIONAL, GOAL_CONDITIONED)


@dataclass
class MaskSpec:
    hidden: np.ndarray  # [A, T] bool, True = hidden from the model
    strategy: str
    conditioned_agent: int | None = None


@dataclass
class AugmentConfig:
    dropout_prob: float = 0.1
    rotation_range: float = math.pi / 2.0


def effective_padding(scene: Scene, mask: MaskSpec) -> np.ndarray:
    """Padding grid after the full-agent rule: an agent with no visible
    non-padded step under the mask is padded everywhere."""
    pad = scene.padding_grid()
    no_visible = ~(~pad & ~mask.hidden).any(axis=1)
    out = pad.copy()
    out[no_visible] = True
    return out


def _mp_hidden(scene: Scene) -> np.ndarray:
    t = scene.num_steps
    hidden = np.broadcast_to(np.arange(t) > scene.current_step, (scene.num_agents, t)).copy()
    hidden |= scene.padding_grid()
    return hidden


def make_mp_mask(scene: Scene) -> MaskSpec:
    """History visible, every agent's future hidden."""
    scene.validate()
    return MaskSpec(hidden=_mp_hidden(scene), strategy=MOTION_PREDICTION)


def make_cmp_mask(scene: Scene, conditioned_agent: int) -> MaskSpec:
    """As MP, except one agent's entire non-padded trajectory stays visible."""
    scene.validate()
    if not 0 <= conditioned_agent < scene.num_agents:
        raise ValueError(f"conditioned agent {conditioned_agent} out of range")
    agent = scene.agents[conditioned_agent]
    future = np.arange(scene.num_steps) > scene.current_step
    if not (~agent.padding & future).any():
        raise ValueError(f"conditioned agent {conditioned_agent} has no future observations")
    hidden = _mp_hidden(scene)
    hidden[conditioned_agent] = agent.padding.copy()
    return MaskSpec(hidden=hidden, strategy=CONDITIONAL, conditioned_agent=conditioned_agent)


def find_av(scene: Scene) -> int | None:
    for i, a in enumerate(scene.agents):
        if a.is_av:
            return i
    return None


def make_gcp_mask(scene: Scene) -> MaskSpec:
    """As MP, except the autonomous vehicle's final step stays visible."""
    scene.validate()
    av = find_av(scene)
    if av is None:
        raise ValueError("scene has no autonomous vehicle agent")
    if scene.agents[av].padding[-1]:
        raise ValueError("autonomous vehicle is padded at the final step")
    hidden = _mp_hidden(scene)
    hidden[av, -1] = False
    return MaskSpec(hidden=hidden, strategy=GOAL_CONDITIONED)


def _cmp_candidates(scene: Scene) -> list[int]:
    future = np.arange(scene.num_steps) > scene.current_step
    out = []
    for i, a in enumerate(scene.agents):
        if a.is_predicted and not a.is_av and (~a.padding & future).any():
            out.append(i)
    return out


def sample_training_mask(scene: Scene, rng: np.random.Generator, mode: str) -> MaskSpec:
    """Draw a task mask: mp_only is always MP; multi_task draws each
    strategy 1/3 of the time (CMP falls back to MP when no agent qualifies)."""
    if mode == "mp_only":
        return make_mp_mask(scene)
    if mode != "multi_task":
        raise ValueError(f"unknown mask mode {mode!r}")
    draw = int(rng.integers(3))
    if draw == 1:
        candidates = _cmp_candidates(scene)
        if candidates:
            pick = candidates[int(rng.integers(len(candidates)))]
            return make_cmp_mask(scene, pick)
        return make_mp_mask(scene)
    if draw == 2:
        av = find_av(scene)
        if av is not None and not scene.agents[av].padding[-1]:
            return make_gcp_mask(scene)
        return make_mp_mask(scene)
    return make_mp_mask(scene)


def apply_augmentation(scene: Scene, rng: np.random.Generator, config: AugmentConfig) -> Scene:
    """Agent dropout plus one global rotation; expects a centered scene.

    Non-predicted, non-AV agents are each removed with dropout_prob; the
    whole scene (coordinates, headings, velocities) then rotates by a single
    angle uniform in [-rotation_range, rotation_range].
    """
    keep = []
    for i, a in enumerate(scene.agents):
        protected = a.is_predicted or a.is_av or i == scene.agent_of_interest
        if protected or rng.random() >= config.dropout_prob:
            keep.append(i)
    theta = float(rng.uniform(-config.rotation_range, config.rotation_range))
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])

    def spin(a):
        pos = np.concatenate([a.positions[:, :2] @ rot.T, a.positions[:, 2:]], axis=1)
        return replace(
            a,
            positions=pos,
            heading=wrap_angle_array(a.heading + theta),
            velocity=a.velocity @ rot.T,
            padding=a.padding.copy(),
        )

    def spin_points(pts):
        return np.concatenate([pts[:, :2] @ rot.T, pts[:, 2:]], axis=1)

    rg = scene.roadgraph
    new_rg = replace(
        rg,
        static_polylines=[replace(p, points=spin_points(p.points)) for p in rg.static_polylines],
        dynamic_elements=[
            replace(d, position=spin_points(d.position[None])[0], state=d.state.copy(), padding=d.padding.copy())
            for d in rg.dynamic_elements
        ],
    )
    return Scene(
        agents=[spin(scene.agents[i]) for i in keep],
        roadgraph=new_rg,
        agent_of_interest=keep.index(scene.agent_of_interest),
        current_step=scene.current_step,
        dt=scene.dt,
    )
