"""Rollout metrics and the structured experiments built on them."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass, field, is_dataclass

import numpy as np

from . import scene
from .actions import DEFAULT_SPEC, POSITION_DOFS, as_mask, l1_distance, nad
from .defenses import SWEEP_GRID, DefenseSpec
from .patch import Placement, patch_side

EVAL_SEED_BASE = 100_000
GRID_OFFSETS = (-3, 0, 3)

# Left-corner patch locations used on 224x224 frames, keyed by the task kind
# that plays the same role in this suite.
BASE_POINTS_224 = {
    "reach": (120, 160),
    "pick": (30, 150),
    "place": (15, 158),
    "pick-and-place": (5, 160),
}


def base_placement(task_kind, side=14, image_side=scene.IMAGE_SIDE, margin=max(GRID_OFFSETS)):
    """Rescale the 224-px base point to ``image_side`` and keep the 9-point grid in frame."""
    x, y = BASE_POINTS_224[task_kind]
    s = image_side / 224.0
    px, py = int(round(x * s)), int(round(y * s))
    hi = image_side - side - margin
    return Placement(int(np.clip(px, margin, hi)), int(np.clip(py, margin, hi)))


def config_digest(obj):
    """SHA-256 over a canonical JSON rendering of ``obj``."""

    def norm(o):
        if is_dataclass(o):
            return norm(asdict(o))
        if isinstance(o, dict):
            return {str(k): norm(v) for k, v in sorted(o.items(), key=lambda kv: str(kv[0]))}
        if isinstance(o, (list, tuple)):
            return [norm(v) for v in o]
        if isinstance(o, np.ndarray):
            return norm(o.tolist())
        if isinstance(o, (np.integer,)):
            return int(o)
        if isinstance(o, (np.floating,)):
            return float(o)
        return o

    blob = json.dumps(norm(obj), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def failure_rate(logs):
    if not logs:
        raise ValueError("failure rate of an empty episode list is undefined")
    return 1.0 - sum(bool(l.success) for l in logs) / len(logs)


def episode_nad(log, spec=DEFAULT_SPEC, mask=POSITION_DOFS):
    """Mean per-step NAD between predicted and benign reference actions."""
    if len(log) == 0:
        return 0.0
    return float(np.mean(nad(log.pred, log.ref, spec, mask)))


def pooled_nad(logs, spec=DEFAULT_SPEC, mask=POSITION_DOFS):
    """Per-step NAD averaged over all steps of all episodes (length-weighted)."""
    vals = np.concatenate([np.atleast_1d(nad(l.pred, l.ref, spec, mask)) for l in logs if len(l)])
    return float(vals.mean())


def episode_l1(log, targets, mask):
    idx = list(as_mask(mask))
    full = np.zeros(log.pred.shape[1])
    full[idx] = targets
    return float(np.mean(l1_distance(log.pred, full, mask)))


@dataclass
class ExperimentReport:
    name: str
    conditions: dict  # condition -> metrics dict
    seeds: list
    digest: str
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return {"name": self.name, "config_digest": self.digest, "seeds": list(self.seeds),
                "config": self.config, "conditions": self.conditions}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def eval_seeds(trials, base=EVAL_SEED_BASE):
    if trials < 1:
        raise ValueError("need at least one trial")
    return list(range(base, base + trials))


def run_condition(policy, task, seeds, patch=None, placement=None, transform=None,
                  defense=None, spec=DEFAULT_SPEC):
    """Roll out ``policy`` once per seed under one attack/defense condition."""
    logs = []
    for s in seeds:
        pre = defense.preprocessor(s) if defense is not None else None
        logs.append(scene.run_episode(policy, task, s, patch=patch, placement=placement,
                                      transform=transform, preprocess=pre, spec=spec))
    return logs


def summarize(logs, spec=DEFAULT_SPEC, mask=POSITION_DOFS, targets=None):
    out = {
        "episodes": len(logs),
        "failure_rate": failure_rate(logs),
        "success_rate": 1.0 - failure_rate(logs),
        "nad": float(np.mean([episode_nad(l, spec, mask) for l in logs])),
        "mean_length": float(np.mean([len(l) for l in logs])),
    }
    if targets is not None:
        out["l1"] = float(np.mean([episode_l1(l, targets, mask) for l in logs]))
    return out


def placement_grid(base):
    base = Placement.coerce(base)
    return [base.shifted(dx, dy) for dy in GRID_OFFSETS for dx in GRID_OFFSETS]


def placement_grid_eval(policy, patch, task, base, trials, mask=POSITION_DOFS, spec=DEFAULT_SPEC):
    """Failure rate and NAD at each of the 9 base +/- 3 px placements."""
    seeds = eval_seeds(trials)
    grid = placement_grid(base)
    for p in grid:
        p.check(patch.side, scene.IMAGE_SIDE)
    conditions, all_logs = {}, []
    for p in grid:
        logs = run_condition(policy, task, seeds, patch, p, spec=spec)
        all_logs.extend(logs)
        key = f"dx={p.px - grid[4].px:+d},dy={p.py - grid[4].py:+d}"
        conditions[key] = dict(summarize(logs, spec, mask), px=p.px, py=p.py)
    conditions["overall"] = summarize(all_logs, spec, mask)
    cfg = {"task": task, "base": [grid[4].px, grid[4].py], "trials": trials,
           "patch_digest": hashlib.sha256(patch.values.tobytes()).hexdigest()}
    return ExperimentReport("placement_grid", conditions, seeds, config_digest(cfg),
                            json.loads(json.dumps(cfg, default=_jsonable)))


def transfer_matrix(policy, patches, victim_tasks, trials, placements=None, spec=DEFAULT_SPEC):
    """``FR[i][j]``: patch trained for source ``i`` evaluated on victim task ``j``."""
    seeds = eval_seeds(trials)
    sources = list(patches)
    fr = np.zeros((len(sources), len(victim_tasks)))
    for i, src in enumerate(sources):
        patch = patches[src]
        for j, task in enumerate(victim_tasks):
            place = (placements or {}).get(task.kind) or base_placement(task.kind, patch.side)
            fr[i, j] = failure_rate(run_condition(policy, task, seeds, patch, place, spec=spec))
    return fr


def defense_sweep(policy, patch, task, placement, trials, grid=None, seed=0, spec=DEFAULT_SPEC,
                  mask=POSITION_DOFS):
    """Benign and patched failure rates for every defense setting in ``grid``."""
    grid = grid or SWEEP_GRID
    seeds = eval_seeds(trials)
    conditions = {
        "none": {"benign": summarize(run_condition(policy, task, seeds, spec=spec), spec, mask),
                 "adversarial": summarize(run_condition(policy, task, seeds, patch, placement,
                                                        spec=spec), spec, mask)},
    }
    for kind, params in grid.items():
        for param in params:
            d = DefenseSpec(kind, param, seed)
            conditions[f"{kind}={param}"] = {
                "kind": kind, "param": param,
                "benign": summarize(run_condition(policy, task, seeds, defense=d, spec=spec), spec, mask),
                "adversarial": summarize(run_condition(policy, task, seeds, patch, placement,
                                                       defense=d, spec=spec), spec, mask),
            }
    cfg = {"task": task, "placement": [placement.px, placement.py], "trials": trials,
           "grid": {k: list(v) for k, v in grid.items()}, "seed": seed,
           "patch_digest": hashlib.sha256(patch.values.tobytes()).hexdigest()}
    return ExperimentReport("defense_sweep", conditions, seeds, config_digest(cfg),
                            json.loads(json.dumps(cfg, default=_jsonable)))


def sweep_curves(report):
    """One CSV text per defense kind: parameter, benign FR, adversarial FR."""
    curves = {}
    for key, cond in report.conditions.items():
        if key == "none":
            continue
        curves.setdefault(cond["kind"], []).append(
            (cond["param"], cond["benign"]["failure_rate"], cond["adversarial"]["failure_rate"]))
    out = {}
    for kind, rows in curves.items():
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["param", "benign_fr", "adversarial_fr"])
        for r in rows:
            w.writerow([r[0], repr(r[1]), repr(r[2])])
        out[kind] = buf.getvalue()
    return out


def write_sweep(report, out_dir):
    os.makedirs(os.path.join(out_dir, "curves"), exist_ok=True)
    paths = []
    for kind, text in sweep_curves(report).items():
        path = os.path.join(out_dir, "curves", f"{kind}.csv")
        with open(path, "w") as fh:
            fh.write(text)
        paths.append(path)
    return paths


def _jsonable(o):
    if is_dataclass(o):
        return asdict(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


# -- trajectory report ---------------------------------------------------------

SERIES_COLORS = {"benign": "#218F20", "adversarial": "#FB0C0F"}


def _polyline(points, color):
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>'


def _panel(paths, axes, x0, title, size=260):
    """One projection panel; ``axes`` picks the two world coordinates."""
    a, b = axes
    lo = np.array([scene.WS_LO[a], scene.WS_LO[b]])
    hi = np.array([scene.WS_HI[a], scene.WS_HI[b]])
    pad = 20

    def tx(p):
        u = (p - lo) / (hi - lo)
        return x0 + pad + u[0] * (size - 2 * pad), pad + 20 + (1 - u[1]) * (size - 2 * pad)

    out = [f'<rect x="{x0 + pad}" y="{pad + 20}" width="{size - 2 * pad}" height="{size - 2 * pad}" '
           f'fill="none" stroke="#888"/>',
           f'<text x="{x0 + pad}" y="{pad + 12}" font-size="12">{title}</text>']
    for label, path in paths:
        pts = [tx(p[[a, b]]) for p in path]
        color = SERIES_COLORS[label]
        out.append(_polyline(pts, color))
        sx, sy = pts[0]
        out.append(f'<path d="M{sx:.2f},{sy - 5:.2f} L{sx - 4:.2f},{sy + 3:.2f} L{sx + 4:.2f},{sy + 3:.2f} Z" '
                   f'fill="#820082"/>')
        ex, ey = pts[-1]
        out.append(f'<circle cx="{ex:.2f}" cy="{ey:.2f}" r="3.5" fill="#3A7F99" stroke="{color}"/>')
    return out


def trajectory_svg(benign, adversarial, title=""):
    paths = [("benign", l.ee_path) for l in benign] + [("adversarial", l.ee_path) for l in adversarial]
    body = _panel(paths, (0, 1), 0, "xy projection") + _panel(paths, (0, 2), 260, "xz projection")
    legend = []
    for i, (label, color) in enumerate(SERIES_COLORS.items()):
        y = 300 + 16 * i
        legend.append(f'<line x1="20" y1="{y}" x2="40" y2="{y}" stroke="{color}" stroke-width="2"/>')
        legend.append(f'<text x="46" y="{y + 4}" font-size="12" class="series-{label}">{label}</text>')
    head = ('<svg xmlns="http://www.w3.org/2000/svg" width="520" height="340" viewBox="0 0 520 340">'
            f'<title>{title}</title>')
    return "\n".join([head] + body + legend + ["</svg>", ""])


def trajectory_csv(logs, labels):
    """All episodes in one table, keyed by series/task/seed; one success trailer per episode."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["series", "task", "seed"] + scene.EpisodeLog.CSV_COLUMNS)
    for log, label in zip(logs, labels):
        key = [label, log.task.kind, log.seed]
        w.writerows(key + row for row in log.csv_rows())
    return buf.getvalue()


def emit_trajectory_report(benign, adversarial, out_dir, name="trajectories"):
    """Write ``traj/<name>.csv`` and ``traj/<name>.svg``; returns both paths."""
    if not benign and not adversarial:
        raise ValueError("no episodes to report")
    traj = os.path.join(out_dir, "traj")
    try:
        os.makedirs(traj, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create report directory {traj}: {e}") from e
    logs = list(benign) + list(adversarial)
    labels = ["benign"] * len(benign) + ["adversarial"] * len(adversarial)
    csv_path = os.path.join(traj, f"{name}.csv")
    svg_path = os.path.join(traj, f"{name}.svg")
    with open(csv_path, "w") as fh:
        fh.write(trajectory_csv(logs, labels))
    with open(svg_path, "w") as fh:
        fh.write(trajectory_svg(benign, adversarial, title=name))
    return csv_path, svg_path
