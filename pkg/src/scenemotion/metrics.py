"""Motion-forecasting evaluation: marginal and scene-level displacement
metrics, oriented-box overlap measurement, marginal-to-joint conversion,
redundant-trajectory merging, and a pooled endpoint average precision.

Displacement metrics use xy only; z stays a trained output but follows
standard benchmark practice of not being scored.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MISS_THRESHOLD = 2.0
OVERLAP_IOU_THRESHOLD = 0.01
MERGE_RADIUS = 3.2


@dataclass
class MetricReport:
    """Aggregated metric values for one evaluation run at one horizon."""

    min_ade: dict[str, float] = field(default_factory=dict)  # per agent type + "all"
    min_fde: dict[str, float] = field(default_factory=dict)
    miss_rate: dict[str, float] = field(default_factory=dict)
    ap: dict[str, float] = field(default_factory=dict)
    min_sade: dict[str, float] = field(default_factory=dict)
    min_sfde: dict[str, float] = field(default_factory=dict)
    smr: dict[str, float] = field(default_factory=dict)
    overlap_rate: float = float("nan")
    horizon: float = 0.0  # seconds of future scored
    k: int = 0  # futures evaluated

    def lines(self) -> list[str]:
        out = []
        h = f"{self.horizon:g}s"
        for name, table in [
            ("minADE", self.min_ade),
            ("minFDE", self.min_fde),
            ("miss_rate", self.miss_rate),
            ("ap", self.ap),
            ("minSADE", self.min_sade),
            ("minSFDE", self.min_sfde),
            ("smr", self.smr),
        ]:
            for agent_type in sorted(table):
                out.append(f"{name}.{agent_type}.{h} {table[agent_type]!r}")
        out.append(f"overlap_rate.all.{h} {self.overlap_rate!r}")
        out.append(f"k.all.{h} {self.k}")
        return out


# ---------------------------------------------------------------------------
# marginal metrics (one agent at a time)


def displacement(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """L2 displacement per future and step, xy only. pred [F, T, C], gt [T, C]."""
    delta = pred[..., :2] - gt[..., :2]
    return np.linalg.norm(delta, axis=-1)


def min_ade(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> float | None:
    """Minimum over futures of the mean displacement over valid steps."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        return None
    d = displacement(pred, gt)[:, valid]
    return float(d.mean(axis=1).min())


def _final_valid(valid: np.ndarray) -> int | None:
    idx = np.nonzero(valid)[0]
    return int(idx[-1]) if idx.size else None


def min_fde(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> float | None:
    """Minimum over futures of the displacement at the last valid step."""
    t = _final_valid(np.asarray(valid, dtype=bool))
    if t is None:
        return None
    return float(displacement(pred, gt)[:, t].min())


def is_miss(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray, threshold: float = MISS_THRESHOLD) -> bool | None:
    """Miss when every future's final displacement exceeds the threshold.

    Exactly `threshold` meters counts as a hit (inclusive boundary).
    """
    fde = min_fde(pred, gt, valid)
    if fde is None:
        return None
    return fde > threshold


# ---------------------------------------------------------------------------
# scene-level joint metrics


def scene_metrics(
    pred: np.ndarray,
    gt: np.ndarray,
    valid: np.ndarray,
    threshold: float = MISS_THRESHOLD,
) -> tuple[float, float, bool] | None:
    """minSADE / minSFDE / SMR over one scene's predicted agents.

    pred is [F, A, T, C], gt [A, T, C], valid [A, T] (already restricted to
    the agents being scored). One future index serves all agents: minSADE
    takes the per-agent ADE, averages over agents, then minimizes over
    futures; SMR is a miss unless some single future puts every agent
    within the threshold at its final valid step.
    """
    valid = np.asarray(valid, dtype=bool)
    agent_ok = valid.any(axis=1)
    if not agent_ok.any():
        return None
    f = pred.shape[0]
    ades = np.zeros((f, int(agent_ok.sum())))
    fdes = np.zeros_like(ades)
    for col, a in enumerate(np.nonzero(agent_ok)[0]):
        d = displacement(pred[:, a], gt[a])
        ades[:, col] = d[:, valid[a]].mean(axis=1)
        fdes[:, col] = d[:, _final_valid(valid[a])]
    min_sade = float(ades.mean(axis=1).min())
    min_sfde = float(fdes.mean(axis=1).min())
    smr_miss = bool((fdes > threshold).any(axis=1).all())
    return min_sade, min_sfde, smr_miss


# ---------------------------------------------------------------------------
# oriented-box overlap


def box_corners(center_xy: np.ndarray, length: float, width: float, heading: float) -> np.ndarray:
    """Counterclockwise corners of an upright box footprint."""
    c, s = np.cos(heading), np.sin(heading)
    rot = np.array([[c, -s], [s, c]])
    half = np.array(
        [[length / 2, width / 2], [-length / 2, width / 2], [-length / 2, -width / 2], [length / 2, -width / 2]]
    )
    return half @ rot.T + center_xy


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon by a convex CCW clipper."""
    output = [p for p in subject]
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        a, b = clipper[i], clipper[(i + 1) % n]
        edge = b - a
        inputs, output = output, []
        for j, p in enumerate(inputs):
            q = inputs[(j + 1) % len(inputs)]
            p_in = edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) >= 0
            q_in = edge[0] * (q[1] - a[1]) - edge[1] * (q[0] - a[0]) >= 0
            if p_in:
                output.append(p)
            if p_in != q_in:
                d = q - p
                denom = edge[0] * d[1] - edge[1] * d[0]
                t = (edge[0] * (a[1] - p[1]) - edge[1] * (a[0] - p[0])) / denom
                output.append(p + t * d)
    return np.array(output) if output else np.zeros((0, 2))


def box_iou(
    center_a: np.ndarray,
    extent_a,
    heading_a: float,
    center_b: np.ndarray,
    extent_b,
    heading_b: float,
) -> float:
    """IoU of two upright 3-D boxes: clipped footprint area times vertical
    interval overlap, over the union volume."""
    la, wa, ha = extent_a
    lb, wb, hb = extent_b
    pa = box_corners(np.asarray(center_a[:2]), la, wa, heading_a)
    pb = box_corners(np.asarray(center_b[:2]), lb, wb, heading_b)
    inter_area = polygon_area(clip_polygon(pa, pb))
    if inter_area <= 0.0:
        return 0.0
    za0, za1 = center_a[2] - ha / 2, center_a[2] + ha / 2
    zb0, zb1 = center_b[2] - hb / 2, center_b[2] + hb / 2
    dz = max(0.0, min(za1, zb1) - max(za0, zb0))
    inter = inter_area * dz
    union = la * wa * ha + lb * wb * hb - inter
    return inter / union if union > 0.0 else 0.0


def overlap_rate(
    trajectories: np.ndarray,
    headings: np.ndarray,
    extents: np.ndarray,
    valid: np.ndarray | None = None,
    iou_threshold: float = OVERLAP_IOU_THRESHOLD,
) -> float:
    """Fraction of agents whose best-trajectory box intersects any other
    agent's at any step (IoU above the threshold).

    trajectories [A, T, 3], headings [A, T], extents [A, 3]; valid [A, T]
    limits which steps participate.
    """
    a_count, t_count = headings.shape
    if valid is None:
        valid = np.ones((a_count, t_count), dtype=bool)
    flagged = np.zeros(a_count, dtype=bool)
    for t in range(t_count):
        for i in range(a_count):
            if not valid[i, t]:
                continue
            for j in range(i + 1, a_count):
                if not valid[j, t]:
                    continue
                if flagged[i] and flagged[j]:
                    continue
                # cheap reject before polygon clipping
                reach = (max(extents[i][:2]) + max(extents[j][:2])) / 1.4
                if np.linalg.norm(trajectories[i, t, :2] - trajectories[j, t, :2]) > reach:
                    continue
                iou = box_iou(
                    trajectories[i, t], extents[i], headings[i, t], trajectories[j, t], extents[j], headings[j, t]
                )
                if iou > iou_threshold:
                    flagged[i] = True
                    flagged[j] = True
    return float(flagged.sum() / a_count) if a_count else 0.0


# ---------------------------------------------------------------------------
# marginal-to-joint conversion and trajectory merging


def marginal_to_joint(
    probs_a: np.ndarray, probs_b: np.ndarray, top_k: int = 6
) -> list[tuple[int, int, float]]:
    """Score all pairs of two agents' futures by probability product and keep
    the top_k, renormalized to sum 1. Ties order lexicographically by
    (i, j)."""
    f_a, f_b = len(probs_a), len(probs_b)
    pairs = [(i, j, float(probs_a[i] * probs_b[j])) for i in range(f_a) for j in range(f_b)]
    pairs.sort(key=lambda p: (-p[2], p[0], p[1]))
    kept = pairs[:top_k]
    z = sum(p[2] for p in kept)
    if z > 0:
        kept = [(i, j, s / z) for i, j, s in kept]
    else:
        kept = [(i, j, 1.0 / len(kept)) for i, j, _ in kept]
    return kept


def merge_redundant(
    trajectories: np.ndarray, probabilities: np.ndarray, radius: float = MERGE_RADIUS
) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Combine one agent's near-duplicate trajectories.

    Greedy by descending probability: a trajectory whose final position
    lies strictly within `radius` of an already-kept one donates its
    probability to that one and is dropped. Returns (trajectories,
    probabilities, kept indices); probabilities still sum to 1.
    """
    order = sorted(range(len(probabilities)), key=lambda i: (-probabilities[i], i))
    kept: list[int] = []
    merged = probabilities.astype(np.float64).copy()
    for i in order:
        end = trajectories[i, -1, :2]
        target = None
        for k in kept:
            if np.linalg.norm(end - trajectories[k, -1, :2]) < radius:
                target = k
                break
        if target is None:
            kept.append(i)
        else:
            merged[target] += merged[i]
    kept.sort()
    return trajectories[kept], merged[kept], kept


def endpoint_ap(
    predictions: list[tuple[object, float, float]], threshold: float = MISS_THRESHOLD
) -> float:
    """Average precision over pooled trajectory predictions.

    Each entry is (agent key, probability, final displacement error). All
    entries are sorted by descending probability; a prediction is a true
    positive when its error is within the threshold and its agent is not
    already matched. AP is the trapezoidal area under precision(recall),
    anchored at (recall 0, precision 1).
    """
    total = len({key for key, _, _ in predictions})
    if total == 0:
        return 0.0
    order = sorted(range(len(predictions)), key=lambda i: (-predictions[i][1], i))
    matched: set = set()
    tp = fp = 0
    recalls, precisions = [0.0], [1.0]
    for i in order:
        key, _, err = predictions[i]
        if err <= threshold and key not in matched:
            matched.add(key)
            tp += 1
        else:
            fp += 1
        recalls.append(tp / total)
        precisions.append(tp / (tp + fp))
    return float(np.trapezoid(precisions, recalls))
