"""Command-line surface: generate scenes, train, evaluate, predict, and
render scenes with predictions as SVG images.

Output files are written atomically (temp file, then rename); every
subcommand is deterministic given identical inputs.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import tempfile

import numpy as np

from . import masking, model as M, scene as sc, synthgen as sg, trainer as TR

LANE_COLORS = {
    "lane_center": "#9aa5b1",
    "lane_boundary": "#f0b429",
    "road_edge": "#323f4b",
    "stop_line": "#d64545",
    "crosswalk": "#7b8794",
    "bike_lane": "#2f9e44",
    "driveway": "#bcccdc",
    "sign": "#b8860b",
}
FUTURE_COLORS = ("#d64545", "#2f6fed", "#2f9e44", "#b36bd4", "#e8871e", "#12a4a4")


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise SystemExit(f"override {pair!r} is not key=value")
        key, _, value = pair.partition("=")
        out[key.strip()] = value.strip()
    return out


def _load_scene_dir(path: str) -> list[tuple[str, sc.Scene]]:
    names = sorted(n for n in os.listdir(path) if n.endswith(".scene"))
    if not names:
        raise SystemExit(f"no .scene files found in {path}")
    return [(n, sg.read_scene(os.path.join(path, n))) for n in names]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    _, _, gen_cfg = TR.load_configs(args.config, _parse_overrides(args.set))
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.count):
        scene = sg.generate_scene(gen_cfg, args.start_index + i)
        path = os.path.join(args.out, f"scene_{args.start_index + i:05d}.scene")
        tmp_scene = path + ".tmp"
        sg.write_scene(tmp_scene, scene)
        os.replace(tmp_scene, path)
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    train_cfg, model_cfg, _ = TR.load_configs(args.config, _parse_overrides(args.set))
    scenes = [s for _, s in _load_scene_dir(args.data)]
    holdout = max(1, len(scenes) // 10)
    eval_scenes = scenes[-holdout:]
    train_scenes = scenes[:-holdout] or scenes
    os.makedirs(args.out, exist_ok=True)

    if args.resume:
        params, state = TR.load_training_checkpoint(args.resume)
        start = state.step if state else 0
    else:
        params = M.ModelParams.build(model_cfg, np.random.default_rng(train_cfg.seed))
        state, start = None, 0
    steps_per_epoch = max(1, math.ceil(len(train_scenes) / train_cfg.batch_size))
    steps = args.steps if args.steps else train_cfg.total_epochs * steps_per_epoch
    result = TR.train(
        train_scenes,
        params,
        train_cfg,
        steps=steps,
        state=state,
        start_step=start,
        out_dir=args.out,
        eval_scenes=eval_scenes,
    )
    print(f"trained {steps} steps; final loss {result.curve[-1][1]:.4f}")
    print(f"checkpoint: {os.path.join(args.out, 'checkpoint.bin')}")
    return 0


def cmd_eval(args) -> int:
    train_cfg, _, _ = TR.load_configs(args.config, _parse_overrides(args.set))
    params, _ = TR.load_training_checkpoint(args.checkpoint)
    scenes = [s for _, s in _load_scene_dir(args.data)]
    tasks = tuple(args.tasks.split(","))
    reports = TR.evaluate(params, scenes, tasks=tasks, loss_mode=train_cfg.loss_mode, horizon=args.horizon)
    os.makedirs(args.out, exist_ok=True)
    for task, report in reports.items():
        text = "\n".join(report.lines()) + "\n"
        _atomic_write(os.path.join(args.out, f"metrics_{task}.txt"), text)
        print(f"[{task}]")
        for line in report.lines():
            print(" ", line)
    return 0


def _predict_scene(scene: sc.Scene, params: M.ModelParams, task: str, condition_agent: int | None, goal):
    centered, _ = sc.center_scene(scene)
    if task == "mp":
        mask = masking.make_mp_mask(centered)
    elif task == "cmp":
        agent = condition_agent if condition_agent is not None else TR._cmp_eval_agent(centered)
        if agent is None:
            raise ValueError("no eligible agent to condition on")
        mask = masking.make_cmp_mask(centered, agent)
    elif task == "gcp":
        if goal is not None:
            av = masking.find_av(centered)
            if av is None:
                raise ValueError("scene has no autonomous vehicle agent")
            centered.agents[av].positions[-1, :2] = goal
            centered.agents[av].padding[-1] = False
        mask = masking.make_gcp_mask(centered)
    else:
        raise ValueError(f"unknown task {task!r}")
    pred = M.forward(centered, mask, params, training=False, centered=True)
    return centered, mask, pred


def _prediction_text(pred: M.PredictionSet) -> str:
    f_count, a_count, t_count, _ = pred.trajectories.shape
    lines = [f"scenemotion-prediction 1", f"futures {f_count}", f"agents {a_count}", f"steps {t_count}"]
    for f, p in enumerate(pred.future_probs()):
        lines.append(f"future_prob {f} {p!r}")
    traj_probs = pred.trajectory_probs()
    for f in range(f_count):
        for a in range(a_count):
            lines.append(f"traj_prob {f} {a} {traj_probs[f, a]!r}")
    data = pred.trajectories.data
    for f in range(f_count):
        for a in range(a_count):
            for t in range(t_count):
                vals = " ".join(repr(float(v)) for v in data[f, a, t])
                lines.append(f"traj {f} {a} {t} {vals}")
    lines.append("end")
    return "\n".join(lines) + "\n"


def cmd_predict(args) -> int:
    train_cfg, _, _ = TR.load_configs(args.config, _parse_overrides(args.set))
    params, _ = TR.load_training_checkpoint(args.checkpoint)
    goal = None
    if args.goal:
        parts = args.goal.split(",")
        if len(parts) != 2:
            raise SystemExit(f"--goal expects x,y, got {args.goal!r}")
        goal = np.array([float(parts[0]), float(parts[1])])
    os.makedirs(args.out, exist_ok=True)
    for name, scene in _load_scene_dir(args.data):
        try:
            _, _, pred = _predict_scene(scene, params, args.task, args.condition_agent, goal)
        except ValueError as exc:
            raise SystemExit(f"scene {name}: {exc}") from exc
        out_path = os.path.join(args.out, name.replace(".scene", ".pred"))
        _atomic_write(out_path, _prediction_text(pred))
    print(f"wrote predictions to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# SVG rendering


def _svg_path(points: np.ndarray, transform) -> str:
    cmds = [f"{'M' if i == 0 else 'L'} {transform(p)[0]:.2f} {transform(p)[1]:.2f}" for i, p in enumerate(points)]
    return " ".join(cmds)


def render_scene_svg(
    scene: sc.Scene,
    pred: M.PredictionSet | None = None,
    probs: np.ndarray | None = None,
    goal_xy: np.ndarray | None = None,
    size: int = 900,
) -> str:
    """Vector image of the road graph, ground-truth tracks, and predicted
    futures with per-future probability labels."""
    pts = [p.points[:, :2] for p in scene.roadgraph.static_polylines]
    pts += [a.positions[~a.padding][:, :2] for a in scene.agents if (~a.padding).any()]
    allp = np.concatenate(pts, axis=0)
    lo, hi = allp.min(axis=0) - 8.0, allp.max(axis=0) + 8.0
    span = max(hi[0] - lo[0], hi[1] - lo[1])
    scale = (size - 20) / span

    def tf(p):
        return (10 + (p[0] - lo[0]) * scale, size - 10 - (p[1] - lo[1]) * scale)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="#f5f7fa"/>',
    ]
    for poly in scene.roadgraph.static_polylines:
        color = LANE_COLORS.get(poly.lane_type, "#9aa5b1")
        if poly.points.shape[0] == 1:
            x, y = tf(poly.points[0])
            parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="{color}"/>')
        else:
            parts.append(
                f'<path d="{_svg_path(poly.points[:, :2], tf)}" fill="none" stroke="{color}" stroke-width="1.5"/>'
            )
    for d in scene.roadgraph.dynamic_elements:
        state = sc.DYNAMIC_STATES[int(d.state[scene.current_step])]
        color = {"red": "#d64545", "yellow": "#f0b429", "green": "#2f9e44"}.get(state, "#7b8794")
        x, y = tf(d.position)
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="6" fill="{color}" stroke="#323f4b"/>')

    for i, agent in enumerate(scene.agents):
        live = ~agent.padding
        if not live.any():
            continue
        past = agent.positions[: scene.current_step + 1][live[: scene.current_step + 1]]
        if len(past):
            parts.append(f'<path d="{_svg_path(past[:, :2], tf)}" fill="none" stroke="#323f4b" stroke-width="2"/>')
        future = agent.positions[scene.current_step :][live[scene.current_step :]]
        if len(future):
            parts.append(
                f'<path d="{_svg_path(future[:, :2], tf)}" fill="none" stroke="#7b8794" '
                f'stroke-width="2" stroke-dasharray="5,4"/>'
            )
        x, y = tf(agent.positions[scene.current_step])
        fill = "#2f6fed" if agent.is_av else ("#17b26a" if agent.is_predicted else "#7b8794")
        length, width = agent.extent[0] * scale, agent.extent[1] * scale
        heading = float(agent.heading[scene.current_step])
        parts.append(
            f'<rect x="{-length / 2:.2f}" y="{-width / 2:.2f}" width="{length:.2f}" height="{width:.2f}" '
            f'fill="{fill}" fill-opacity="0.85" '
            f'transform="translate({x:.2f} {y:.2f}) rotate({-math.degrees(heading):.1f})"/>'
        )

    if pred is not None:
        trajs = pred.trajectories.data
        probs = pred.future_probs() if probs is None else probs
        f_count, a_count = trajs.shape[0], trajs.shape[1]
        for f in range(f_count):
            color = FUTURE_COLORS[f % len(FUTURE_COLORS)]
            opacity = 0.25 + 0.7 * float(probs[f]) / max(float(probs.max()), 1e-9)
            for a in range(a_count):
                steps = trajs[f, a, scene.current_step + 1 :, :2]
                for p in steps[:: max(1, len(steps) // 15)]:
                    x, y = tf(p)
                    parts.append(
                        f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="{color}" fill-opacity="{opacity:.2f}"/>'
                    )
            x0, y0 = 14, 20 + 16 * f
            parts.append(
                f'<text x="{x0}" y="{y0}" font-size="13" fill="{color}">future {f}: p={float(probs[f]):.3f}</text>'
            )
    if goal_xy is not None:
        x, y = tf(goal_xy)
        star = []
        for k in range(10):
            r = 10 if k % 2 == 0 else 4
            ang = math.pi / 2 + k * math.pi / 5
            star.append(f"{x + r * math.cos(ang):.2f},{y - r * math.sin(ang):.2f}")
        parts.append(f'<polygon points="{" ".join(star)}" fill="#f0b429" stroke="#323f4b"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_render(args) -> int:
    params = None
    train_cfg = None
    if args.checkpoint:
        train_cfg, _, _ = TR.load_configs(args.config, _parse_overrides(args.set))
        params, _ = TR.load_training_checkpoint(args.checkpoint)
    goal = None
    if args.goal:
        parts = args.goal.split(",")
        goal = np.array([float(parts[0]), float(parts[1])])
    os.makedirs(args.out, exist_ok=True)
    for name, scene in _load_scene_dir(args.data):
        pred = None
        shown = scene
        if params is not None:
            try:
                shown, _, pred = _predict_scene(scene, params, args.task, args.condition_agent, goal)
            except ValueError as exc:
                raise SystemExit(f"scene {name}: {exc}") from exc
        svg = render_scene_svg(shown, pred, goal_xy=goal)
        _atomic_write(os.path.join(args.out, name.replace(".scene", ".svg")), svg)
    print(f"wrote renders to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scenemotion", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen", help="generate synthetic scenes")
    common(p)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--start-index", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a scene directory")
    common(p)
    p.add_argument("--data", required=True, help="directory of .scene files")
    p.add_argument("--steps", type=int, default=None, help="override the step count")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", default="mp", help="comma list of mp,cmp,gcp")
    p.add_argument("--horizon", type=float, default=None, help="seconds of future to score")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write prediction files for scenes")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", default="mp", choices=("mp", "cmp", "gcp"))
    p.add_argument("--condition-agent", type=int, default=None)
    p.add_argument("--goal", default=None, help="x,y goal override for gcp")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("render", help="render scenes (and predictions) as SVG")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--task", default="mp", choices=("mp", "cmp", "gcp"))
    p.add_argument("--condition-agent", type=int, default=None)
    p.add_argument("--goal", default=None)
    p.set_defaults(func=cmd_render)
    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except SystemExit as exc:
        if exc.code and not isinstance(exc.code, int):
            print(str(exc.code), file=sys.stderr)
            return 2
        return int(exc.code or 0)
    except (ValueError, RuntimeError, OSError, sg.SceneParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    raise SystemExit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
