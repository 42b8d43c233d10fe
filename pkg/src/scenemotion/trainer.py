"""Training loop and evaluation orchestration.

Training is deterministic given (config, seed): batch order, augmentation,
and mask sampling all derive from stateless per-step generators, so a run
resumed from a checkpoint continues bit-identically. Scenes are processed
one at a time with gradient accumulation standing in for larger batches.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import loss as L, masking, metrics as MT, model as M, scene as sc, tensor as T


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    grad_clip_norm: float = 5.0
    batch_size: int = 4
    total_epochs: int = 150
    warmup_fraction: float = 0.1  # epochs
    loss_mode: str = "joint"
    mask_mode: str = "mp_only"
    dropout_prob: float = 0.1
    rotation_range: float = math.pi / 2
    label_smoothing: float = 0.0
    classification_weight: float = 0.1
    regression_weight: float = 1.0
    seed: int = 0
    eval_every: int = 200

    def validate(self) -> None:
        for name in ("lr", "beta1", "beta2", "grad_clip_norm", "batch_size", "total_epochs", "warmup_fraction"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.warmup_fraction >= self.total_epochs:
            raise ValueError("warmup_fraction must be below total_epochs")
        if self.loss_mode not in ("joint", "marginal"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")
        if self.mask_mode not in ("mp_only", "multi_task"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")

    def augment(self) -> masking.AugmentConfig:
        return masking.AugmentConfig(dropout_prob=self.dropout_prob, rotation_range=self.rotation_range)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: M.ModelParams) -> "AdamState":
        return cls(
            m={n: np.zeros_like(t.data) for n, t in params.trainable()},
            v={n: np.zeros_like(t.data) for n, t in params.trainable()},
        )


def clip_by_global_norm(grads: dict[str, np.ndarray], clip_norm: float) -> tuple[dict[str, np.ndarray], float]:
    # summed in sorted name order so the result is independent of dict order
    total = math.sqrt(sum(float((grads[n] * grads[n]).sum()) for n in sorted(grads)))
    if total > clip_norm:
        scale = clip_norm / total
        grads = {n: g * scale for n, g in grads.items()}
    return grads, total


def adam_step(
    params: M.ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
    warmup_steps: int,
) -> None:
    """One optimizer update: global-norm clip, moment update with bias
    correction, linear learning-rate ramp over the warmup steps."""
    for name, g in grads.items():
        if params[name].data.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {params[name].data.shape}")
    grads, _ = clip_by_global_norm(grads, config.grad_clip_norm)
    state.step += 1
    t = state.step
    lr_t = config.lr * min(1.0, t / max(1, warmup_steps))
    b1, b2 = config.beta1, config.beta2
    for name, tensor in params.trainable():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor.data)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        mhat = state.m[name] / (1.0 - b1**t)
        vhat = state.v[name] / (1.0 - b2**t)
        tensor.data[...] = tensor.data - lr_t * mhat / (np.sqrt(vhat) + config.adam_epsilon)


def _assert_mask_safe(scene_in: sc.Scene, mask: masking.MaskSpec) -> None:
    """Multi-task masks may only reveal future cells their strategy allows."""
    mp_hidden = masking.make_mp_mask(scene_in).hidden
    extra = mp_hidden & ~mask.hidden  # future cells the strategy revealed
    if mask.strategy == masking.MOTION_PREDICTION:
        assert not extra.any(), "MP mask revealed future cells"
    elif mask.strategy == masking.GOAL_CONDITIONED:
        av = masking.find_av(scene_in)
        allowed = np.zeros_like(extra)
        allowed[av, -1] = True
        assert not (extra & ~allowed).any(), "GCP mask revealed more than the AV goal"
    elif mask.strategy == masking.CONDITIONAL:
        allowed = np.zeros_like(extra)
        allowed[mask.conditioned_agent] = True
        assert not (extra & ~allowed).any(), "CMP mask revealed beyond the conditioned agent"


@dataclass
class TrainResult:
    params: M.ModelParams
    state: AdamState
    curve: list[tuple[int, float]] = field(default_factory=list)


def train(
    scenes: list[sc.Scene],
    params: M.ModelParams,
    config: TrainConfig,
    steps: int,
    state: AdamState | None = None,
    start_step: int = 0,
    out_dir: str | None = None,
    eval_scenes: list[sc.Scene] | None = None,
) -> TrainResult:
    """Run optimizer steps; resumable via (state, start_step).

    Per batch element: center, augment, sample a task mask, forward, loss,
    backward, then one Adam update on the accumulated mean gradient. A
    non-finite loss aborts with the offending scene index.
    """
    config.validate()
    if not scenes:
        raise ValueError("no training scenes")
    state = state or AdamState.init(params)
    steps_per_epoch = max(1, math.ceil(len(scenes) / config.batch_size))
    warmup_steps = max(1, round(config.warmup_fraction * steps_per_epoch))
    augment_cfg = config.augment()
    curve: list[tuple[int, float]] = []

    for step in range(start_step, start_step + steps):
        epoch, slot = divmod(step, steps_per_epoch)
        order = np.random.default_rng([config.seed, 7919, epoch]).permutation(len(scenes))
        picks = [int(order[(slot * config.batch_size + i) % len(scenes)]) for i in range(config.batch_size)]

        accum: dict[str, np.ndarray] = {}
        batch_loss = 0.0
        for i, scene_idx in enumerate(picks):
            rng = np.random.default_rng([config.seed, step, i])
            centered, _ = sc.center_scene(scenes[scene_idx])
            aug = masking.apply_augmentation(centered, rng, augment_cfg)
            mask = masking.sample_training_mask(aug, rng, config.mask_mode)
            _assert_mask_safe(aug, mask)
            graph = T.Graph()
            with graph:
                pred = M.forward(aug, mask, params, training=True, bn_update=True, centered=True)
                breakdown = L.scene_loss(
                    pred,
                    aug,
                    mask,
                    config.loss_mode,
                    smoothing=config.label_smoothing,
                    classification_weight=config.classification_weight,
                    regression_weight=config.regression_weight,
                )
            value = float(breakdown.total.data)
            if not math.isfinite(value):
                raise RuntimeError(f"non-finite loss at step {step} on scene index {scene_idx}")
            batch_loss += value
            grads = graph.backward(breakdown.total)
            for name, tensor in params.trainable():
                g = grads.get(tensor)
                if g is not None:
                    accum[name] = accum.get(name, 0.0) + g

        mean_grads = {n: g / config.batch_size for n, g in accum.items()}
        adam_step(params, mean_grads, state, config, warmup_steps)
        curve.append((step, batch_loss / config.batch_size))

        if out_dir and eval_scenes and (step + 1) % config.eval_every == 0:
            report = evaluate(params, eval_scenes, loss_mode=config.loss_mode)["mp"]
            with open(os.path.join(out_dir, "eval_log.txt"), "a") as f:
                f.write(f"step {step + 1}\n")
                for line in report.lines():
                    f.write(line + "\n")
            save_training_checkpoint(os.path.join(out_dir, "checkpoint.bin"), params, state)

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_training_checkpoint(os.path.join(out_dir, "checkpoint.bin"), params, state)
        write_curve(os.path.join(out_dir, "loss_curve.csv"), curve)
    return TrainResult(params=params, state=state, curve=curve)


def write_curve(path, curve: list[tuple[int, float]]) -> None:
    with open(path, "w") as f:
        f.write("step,loss\n")
        for step, value in curve:
            f.write(f"{step},{value!r}\n")


def save_training_checkpoint(path, params: M.ModelParams, state: AdamState | None = None) -> None:
    extra: dict[str, np.ndarray] = {}
    if state is not None:
        for name, arr in state.m.items():
            extra["adam/m/" + name] = arr
        for name, arr in state.v.items():
            extra["adam/v/" + name] = arr
        extra["adam/step"] = np.array([float(state.step)])
    M.save_checkpoint(path, params, extra)


def load_training_checkpoint(path) -> tuple[M.ModelParams, AdamState | None]:
    params, extra = M.params_from_checkpoint(path)
    if "adam/step" not in extra:
        return params, None
    state = AdamState.init(params)
    state.step = int(extra["adam/step"][0])
    for name in state.m:
        state.m[name] = extra["adam/m/" + name]
        state.v[name] = extra["adam/v/" + name]
    return params, state


# ---------------------------------------------------------------------------
# evaluation


def _cmp_eval_agent(scene_in: sc.Scene) -> int | None:
    future = np.arange(scene_in.num_steps) > scene_in.current_step
    for i, a in enumerate(scene_in.agents):
        if a.is_predicted and not a.is_av and (~a.padding & future).any():
            return i
    return None


def _mask_for_task(scene_in: sc.Scene, task: str) -> masking.MaskSpec | None:
    if task == "mp":
        return masking.make_mp_mask(scene_in)
    if task == "cmp":
        agent = _cmp_eval_agent(scene_in)
        return None if agent is None else masking.make_cmp_mask(scene_in, agent)
    if task == "gcp":
        av = masking.find_av(scene_in)
        if av is None or scene_in.agents[av].padding[-1]:
            return None
        return masking.make_gcp_mask(scene_in)
    raise ValueError(f"unknown task {task!r}")


def evaluate(
    params: M.ModelParams,
    scenes: list[sc.Scene],
    tasks: tuple[str, ...] = ("mp",),
    loss_mode: str = "joint",
    horizon: float | None = None,
    goal_override: np.ndarray | None = None,
) -> dict[str, MT.MetricReport]:
    """Run inference under each requested task mask and aggregate metrics.

    Marginal metrics are computed directly. Scene-level metrics come from
    the model's own futures for a joint model, or from top-6-of-36 pairing
    for a marginal model on two-agent scenes. Under CMP the conditioned
    agent is excluded from aggregation; under GCP the AV's metrics are also
    reported separately (agent type "av").
    """
    reports: dict[str, MT.MetricReport] = {}
    f_count = params.config.num_futures
    for task in tasks:
        ade_acc: dict[str, list[float]] = {}
        fde_acc: dict[str, list[float]] = {}
        miss_acc: dict[str, list[bool]] = {}
        ap_entries: dict[str, list[tuple[object, float, float]]] = {}
        sade_acc: dict[str, list[float]] = {}
        sfde_acc: dict[str, list[float]] = {}
        smr_acc: dict[str, list[bool]] = {}
        flagged_total = [0, 0]
        horizon_used = 0.0

        for scene_idx, raw_scene in enumerate(scenes):
            centered, _ = sc.center_scene(raw_scene)
            mask = _mask_for_task(centered, task)
            if mask is None:
                continue
            if task == "gcp" and goal_override is not None:
                av = masking.find_av(centered)
                centered.agents[av].positions[-1, :2] = goal_override
            pred = M.forward(centered, mask, params, training=False, centered=True)
            t_cur, t_count, dt = centered.current_step, centered.num_steps, centered.dt
            last = t_count - 1 if horizon is None else min(t_count - 1, t_cur + int(round(horizon / dt)))
            horizon_used = max(horizon_used, (last - t_cur) * dt)
            future = (np.arange(t_count) > t_cur) & (np.arange(t_count) <= last)

            scored = []
            for i, agent in enumerate(centered.agents):
                if not agent.is_predicted:
                    continue
                if task == "cmp" and i == mask.conditioned_agent:
                    continue
                valid = future & ~agent.padding
                if not valid.any():
                    continue
                scored.append(i)

            trajs = pred.trajectories.data
            probs = pred.future_probs() if loss_mode == "joint" else pred.trajectory_probs()
            for i in scored:
                agent = centered.agents[i]
                valid = future & ~agent.padding
                gt = agent.positions
                buckets = ["all", agent.agent_type]
                if task == "gcp" and agent.is_av:
                    buckets.append("av")
                a_probs = probs if loss_mode == "joint" else probs[:, i]
                fde_each = MT.displacement(trajs[:, i], gt)[:, MT._final_valid(valid)]
                for b in buckets:
                    ade_acc.setdefault(b, []).append(MT.min_ade(trajs[:, i], gt, valid))
                    fde_acc.setdefault(b, []).append(MT.min_fde(trajs[:, i], gt, valid))
                    miss_acc.setdefault(b, []).append(MT.is_miss(trajs[:, i], gt, valid))
                    for f in range(f_count):
                        ap_entries.setdefault(b, []).append(((scene_idx, i), float(a_probs[f]), float(fde_each[f])))

            if scored:
                gt_all = np.stack([centered.agents[i].positions for i in scored])
                valid_all = np.stack([future & ~centered.agents[i].padding for i in scored])
                types = {centered.agents[i].agent_type for i in scored}
                buckets = ["all"] + ([types.pop()] if len(types) == 1 else [])
                joint_pred = None
                if loss_mode == "joint":
                    joint_pred = trajs[:, scored]
                elif len(scored) == 2:
                    pa, pb = probs[:, scored[0]], probs[:, scored[1]]
                    pairs = MT.marginal_to_joint(pa, pb)
                    joint_pred = np.stack(
                        [np.stack([trajs[i, scored[0]], trajs[j, scored[1]]]) for i, j, _ in pairs]
                    )
                if joint_pred is not None:
                    result = MT.scene_metrics(joint_pred, gt_all, valid_all)
                    if result is not None:
                        for b in buckets:
                            sade_acc.setdefault(b, []).append(result[0])
                            sfde_acc.setdefault(b, []).append(result[1])
                            smr_acc.setdefault(b, []).append(result[2])

                # overlap of the best predicted boxes
                if loss_mode == "joint":
                    best_f = int(np.argmax(probs))
                    best = trajs[best_f, scored]
                    best_heading = trajs[best_f, scored][:, :, 6]
                else:
                    rows = [int(np.argmax(probs[:, i])) for i in scored]
                    best = np.stack([trajs[r, i] for r, i in zip(rows, scored)])
                    best_heading = best[:, :, 6]
                extents = np.array([centered.agents[i].extent for i in scored])
                rate = MT.overlap_rate(
                    best[:, :, :3], best_heading, extents, valid=valid_all
                )
                flagged_total[0] += rate * len(scored)
                flagged_total[1] += len(scored)

        report = MT.MetricReport(horizon=horizon_used, k=f_count)
        for b, values in ade_acc.items():
            report.min_ade[b] = float(np.mean(values))
            report.min_fde[b] = float(np.mean(fde_acc[b]))
            report.miss_rate[b] = float(np.mean(miss_acc[b]))
            report.ap[b] = MT.endpoint_ap(ap_entries[b])
        for b, values in sade_acc.items():
            report.min_sade[b] = float(np.mean(values))
            report.min_sfde[b] = float(np.mean(sfde_acc[b]))
            report.smr[b] = float(np.mean(smr_acc[b]))
        if flagged_total[1]:
            report.overlap_rate = flagged_total[0] / flagged_total[1]
        reports[task] = report
    return reports


# ---------------------------------------------------------------------------
# config file surface (exact field names; unknown keys rejected)


def _coerce(value: str, target_type):
    if target_type is bool:
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    if target_type is str:
        return value
    if target_type is tuple or (hasattr(target_type, "__origin__") and target_type.__origin__ is tuple):
        parts = [p.strip() for p in value.split(",")]
        return tuple(float(p) if "." in p or "e" in p.lower() else int(p) for p in parts)
    raise ValueError(f"unsupported config field type {target_type}")


_FIELD_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def _field_type(f):
    if isinstance(f.type, str):
        base = f.type.split("[")[0]
        return _FIELD_TYPES.get(base, tuple if base == "tuple" else str)
    return f.type


def parse_config_text(lines) -> dict[str, str]:
    out = {}
    for i, rawline in enumerate(lines, start=1):
        line = rawline.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {i}: expected key = value, got {rawline!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_configs(
    path: str | None,
    overrides: dict[str, str] | None = None,
) -> tuple[TrainConfig, M.ModelConfig, "object"]:
    """Build (TrainConfig, ModelConfig, GenConfig) from a key = value file
    plus overrides. Model fields use a model. prefix, generator fields a
    gen. prefix; unknown keys are rejected."""
    from .synthgen import GenConfig

    raw: dict[str, str] = {}
    if path:
        with open(path) as f:
            raw.update(parse_config_text(f))
    raw.update(overrides or {})

    train_fields = {f.name: f for f in fields(TrainConfig)}
    model_fields = {f.name: f for f in fields(M.ModelConfig)}
    gen_fields = {f.name: f for f in fields(GenConfig)}
    train_kwargs, model_kwargs, gen_kwargs = {}, {}, {}
    for key, value in raw.items():
        if key.startswith("model."):
            name = key[len("model.") :]
            if name not in model_fields:
                raise ValueError(f"unknown config key {key!r}")
            model_kwargs[name] = _coerce(value, _field_type(model_fields[name]))
        elif key.startswith("gen."):
            name = key[len("gen.") :]
            if name not in gen_fields:
                raise ValueError(f"unknown config key {key!r}")
            gen_kwargs[name] = _coerce(value, _field_type(gen_fields[name]))
        else:
            if key not in train_fields:
                raise ValueError(f"unknown config key {key!r}")
            train_kwargs[key] = _coerce(value, _field_type(train_fields[key]))
    train_cfg = TrainConfig(**train_kwargs)
    train_cfg.validate()
    model_cfg = M.ModelConfig(**model_kwargs)
    model_cfg.validate()
    gen_cfg = GenConfig(**gen_kwargs)
    gen_cfg.validate()
    return train_cfg, model_cfg, gen_cfg
