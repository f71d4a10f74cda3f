"""Kinematic tabletop world, fixed-camera renderer, scripted expert, rollouts.

World units: the workspace is x, y in [-0.5, 0.5], z in [0, 0.5].  Actions
are 7-DoF deltas in the normalized [-1, 1] range; a full-scale position
action moves the end-effector by ``POS_GAIN``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .actions import DEFAULT_SPEC, NUM_DOF

WS_LO = np.array([-0.5, -0.5, 0.0])
WS_HI = np.array([0.5, 0.5, 0.5])
HOME = (0.0, -0.4, 0.3)
POS_GAIN = 0.05
ROT_GAIN = 0.1
GRASP_RADIUS = 0.04
OBJECT_HALF = 0.02
OBJECT_RADIUS = 0.05
EE_RADIUS = 0.022
RING_WIDTH = 0.012
# the goal marker is an outline drawn over everything else, so the arm and a
# carried object never hide it
TARGET_RADIUS = 0.06
TARGET_WIDTH = 0.014
# ground shadows under the arm and objects carry the height cue
SHADOW_RADIUS = 0.036
SHADOW_ALPHA = 0.35
REACH_Z = 0.05
LIFT_Z = 0.2
CARRY_Z = 0.1
IMAGE_SIDE = 64

TASK_KINDS = ("reach", "pick", "place", "pick-and-place")

# Coarse action lattice the expert emits (multiples of 1/8); keeps the
# demonstrations on a small set of bins.
_EXPERT_STEP = 0.125
# Fraction of the remaining error the expert closes per step when not
# saturated.  Below 1 the labels vary smoothly with the offset, so small
# perception errors map to small action errors.
_EXPERT_RATE = 0.5
# expert closes / releases once this close to the object / target
CLOSE_RADIUS = 0.02
RELEASE_RADIUS = 0.015


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "pick-and-place"
    tolerance: float = 0.03
    horizon: int = 60
    seed: int = 0
    oriented: bool = False
    yaw_tolerance: float = 0.1

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.oriented and self.kind != "place":
            raise ValueError("only the place task has an oriented variant")

    @property
    def task_id(self):
        return TASK_KINDS.index(self.kind)


def default_suite(horizon=60):
    return [TaskSpec(kind=k, horizon=horizon) for k in TASK_KINDS]


@dataclass
class SceneState:
    ee: np.ndarray
    orient: np.ndarray
    gripper_closed: bool
    holding: int | None
    objects: np.ndarray  # (n_obj, 3)
    target: np.ndarray
    step_index: int = 0
    grasp_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    target_yaw: float = 0.0

    def copy(self):
        return SceneState(self.ee.copy(), self.orient.copy(), self.gripper_closed, self.holding,
                          self.objects.copy(), self.target.copy(), self.step_index,
                          self.grasp_offset.copy(), self.target_yaw)

    def __eq__(self, other):
        if not isinstance(other, SceneState):
            return NotImplemented
        return (np.array_equal(self.ee, other.ee) and np.array_equal(self.orient, other.orient)
                and self.gripper_closed == other.gripper_closed and self.holding == other.holding
                and np.array_equal(self.objects, other.objects)
                and np.array_equal(self.target, other.target)
                and self.step_index == other.step_index
                and np.array_equal(self.grasp_offset, other.grasp_offset)
                and self.target_yaw == other.target_yaw)


def _layout_rng(task, seed):
    # stable across processes: no Python hash involved
    return np.random.default_rng([int(task.seed), int(seed), task.task_id])


def _sample_xy(rng):
    # keep |x| >= 0.12 so that a frozen x-motion always fails the task
    x = rng.uniform(0.12, 0.32) * rng.choice([-1.0, 1.0])
    y = rng.uniform(-0.12, 0.32)
    return np.array([x, y])


def reset(task, seed):
    """Deterministic initial state for ``(task, seed)``."""
    rng = _layout_rng(task, seed)
    obj_xy = _sample_xy(rng)
    while True:
        tgt_xy = _sample_xy(rng)
        if np.linalg.norm(tgt_xy - obj_xy) >= 0.2:
            break
    ee = np.array(HOME, dtype=np.float64)
    obj = np.array([[obj_xy[0], obj_xy[1], OBJECT_HALF]])
    if task.kind == "pick":
        # lifting in place: the goal marker sits under the object
        target = np.array([obj_xy[0], obj_xy[1], LIFT_Z])
    else:
        target = np.array([tgt_xy[0], tgt_xy[1], REACH_Z if task.kind == "reach" else 0.0])
    state = SceneState(ee=ee, orient=np.zeros(3), gripper_closed=False, holding=None,
                       objects=obj, target=target)
    if task.kind == "place":
        state.gripper_closed = True
        state.holding = 0
        state.grasp_offset = np.array([0.0, 0.0, -0.03])
        state.objects[0] = ee + state.grasp_offset
    if task.oriented:
        state.target_yaw = float(rng.uniform(0.4, 1.0) * rng.choice([-1.0, 1.0]))
    return state


def step(state, action, spec=DEFAULT_SPEC):
    """Integrate one delta action.  Returns a new state."""
    a = spec.clamp(action)
    s = state.copy()
    s.ee = np.clip(s.ee + POS_GAIN * a[:3], WS_LO, WS_HI)
    s.orient = np.clip(s.orient + ROT_GAIN * a[3:6], -np.pi, np.pi)
    close = bool(a[6] > 0.5 * (spec.low[6] + spec.high[6]))
    if close and not s.gripper_closed:
        d = np.linalg.norm(s.objects - s.ee, axis=1)
        i = int(np.argmin(d))
        if d[i] <= GRASP_RADIUS:
            s.holding = i
            s.grasp_offset = s.objects[i] - s.ee
    elif not close and s.holding is not None:
        s.objects[s.holding] = [s.objects[s.holding][0], s.objects[s.holding][1], OBJECT_HALF]
        s.holding = None
        s.grasp_offset = np.zeros(3)
    s.gripper_closed = close
    if s.holding is not None:
        s.objects[s.holding] = s.ee + s.grasp_offset
    s.step_index += 1
    return s


def is_success(state, task):
    obj = state.objects[0]
    if task.kind == "reach":
        return bool(np.linalg.norm(state.ee - state.target) <= task.tolerance)
    if task.kind == "pick":
        return state.holding == 0 and bool(obj[2] >= LIFT_Z - task.tolerance)
    placed = (state.holding is None and not state.gripper_closed
              and bool(np.linalg.norm(obj[:2] - state.target[:2]) <= task.tolerance))
    if task.oriented:
        placed = placed and abs(state.orient[2] - state.target_yaw) <= task.yaw_tolerance
    return placed


def _proportional(delta, gain):
    a = np.clip(_EXPERT_RATE * delta / gain, -1.0, 1.0)
    return np.round(a / _EXPERT_STEP) * _EXPERT_STEP


def expert_action(state, task):
    """Scripted proportional controller toward the current subgoal."""
    act = np.zeros(NUM_DOF)
    obj = state.objects[0]
    grip = -1.0
    if task.kind == "reach":
        goal = state.target
    elif state.holding is None:
        if state.gripper_closed:
            goal = state.ee  # reopen before anything else
        elif np.linalg.norm(obj - state.ee) <= CLOSE_RADIUS:
            goal, grip = state.ee, 1.0
        else:
            goal = obj
    else:
        grip = 1.0
        if task.kind == "pick":
            goal = np.array([state.ee[0], state.ee[1], LIFT_Z - state.grasp_offset[2]])
        else:
            goal = np.array([state.target[0], state.target[1], CARRY_Z]) - state.grasp_offset * [1, 1, 0]
            yaw_ok = not task.oriented or abs(state.orient[2] - state.target_yaw) <= 0.5 * task.yaw_tolerance
            if np.linalg.norm(obj[:2] - state.target[:2]) <= RELEASE_RADIUS and yaw_ok:
                goal, grip = state.ee, -1.0
    act[:3] = _proportional(goal - state.ee, POS_GAIN)
    if task.oriented and state.holding is not None:
        act[5] = _proportional(np.array(state.target_yaw - state.orient[2]), ROT_GAIN)
    act[6] = grip
    return DEFAULT_SPEC.clamp(act)


# -- rendering -----------------------------------------------------------------

def _look_at(eye, at):
    eye, at = np.asarray(eye, float), np.asarray(at, float)
    fwd = at - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    return eye, np.stack([right, up, fwd])


CAM_EYE, CAM_BASIS = _look_at((0.0, -1.0, 1.3), (0.0, 0.0, 0.0))
# Focal length and principal point fit the region episodes play out in
# (layouts plus the home pose) into rows 1..44, leaving the lower band of the
# frame for patch placement.  The rest of the workspace box may leave the frame.
VIEW_LO = np.array([-0.38, -0.42, 0.0])
VIEW_HI = np.array([0.38, 0.36, 0.32])
_WS_ROWS = (1.0, 44.0)
_WS_COLS = (1.0, 63.0)


def _camera_raw(points):
    p = (np.atleast_2d(points) - CAM_EYE) @ CAM_BASIS.T
    return p[:, 0] / p[:, 2], p[:, 1] / p[:, 2], p[:, 2]


def _fit_camera():
    corners = np.array([[x, y, z] for x in (VIEW_LO[0], VIEW_HI[0]) for y in (VIEW_LO[1], VIEW_HI[1])
                        for z in (VIEW_LO[2], VIEW_HI[2])])
    u, v, _ = _camera_raw(corners)
    focal = min((_WS_COLS[1] - _WS_COLS[0]) / (u.max() - u.min()),
                (_WS_ROWS[1] - _WS_ROWS[0]) / (v.max() - v.min()))
    cx = 0.5 * (_WS_COLS[0] + _WS_COLS[1]) - focal * 0.5 * (u.max() + u.min())
    cy = _WS_ROWS[0] + focal * v.max()
    return focal, cx, cy


FOCAL, CAM_CX, CAM_CY = _fit_camera()


def project(points):
    """World points (n, 3) -> (row, col, depth) arrays in pixel units."""
    u, v, depth = _camera_raw(points)
    return CAM_CY - FOCAL * v, CAM_CX + FOCAL * u, depth


_PIX_R, _PIX_C = np.meshgrid(np.arange(IMAGE_SIDE) + 0.5, np.arange(IMAGE_SIDE) + 0.5, indexing="ij")

BACKGROUND = np.array([0.24, 0.26, 0.30])
TABLE = np.array([0.62, 0.52, 0.40])
OBJECT_COLOR = np.array([0.85, 0.15, 0.12])
TARGET_COLOR = np.array([0.15, 0.70, 0.25])
EE_COLOR = np.array([0.15, 0.30, 0.90])
RING_OPEN = np.array([0.95, 0.95, 0.95])
RING_CLOSED = np.array([1.0, 0.80, 0.05])
SHADOW = np.array([0.0, 0.0, 0.0])
TICK_COLOR = np.array([0.05, 0.05, 0.05])


def _disc(img, row, col, radius, color, alpha=1.0):
    d = np.hypot(_PIX_R - row, _PIX_C - col)
    cov = np.clip(radius - d + 0.5, 0.0, 1.0) * alpha
    img += cov[..., None] * (color - img)


def _ring(img, row, col, radius, width, color):
    d = np.hypot(_PIX_R - row, _PIX_C - col)
    cov = np.clip(radius - d + 0.5, 0.0, 1.0) * np.clip(d - (radius - width) + 0.5, 0.0, 1.0)
    img += cov[..., None] * (color - img)


def _table_layer(img):
    corners = np.array([[-0.5, -0.5, 0], [0.5, -0.5, 0], [0.5, 0.5, 0], [-0.5, 0.5, 0]], float)
    r, c, _ = project(corners)
    pos = np.ones(_PIX_R.shape, bool)
    neg = np.ones(_PIX_R.shape, bool)
    for i in range(4):
        r0, c0, r1, c1 = r[i], c[i], r[(i + 1) % 4], c[(i + 1) % 4]
        cross = (c1 - c0) * (_PIX_R - r0) - (r1 - r0) * (_PIX_C - c0)
        pos &= cross >= 0
        neg &= cross <= 0
    inside = pos | neg
    shade = 0.85 + 0.15 * (_PIX_R - r.min()) / max(r.max() - r.min(), 1.0)
    img[inside] = TABLE * shade[inside][:, None]


_BASE_FRAME = np.empty((IMAGE_SIDE, IMAGE_SIDE, 3))
_BASE_FRAME[:] = BACKGROUND
_table_layer(_BASE_FRAME)


def render(state):
    """64x64x3 RGB frame in [0, 1] from the fixed shoulder camera."""
    img = _BASE_FRAME.copy()
    for p in list(state.objects) + [state.ee]:
        sr, sc, sd = project(p * [1, 1, 0])
        _disc(img, sr[0], sc[0], FOCAL * SHADOW_RADIUS / sd[0], SHADOW, alpha=SHADOW_ALPHA)
    items = [(o, "object") for o in state.objects] + [(state.ee, "ee")]
    depths = [project(p)[2][0] for p, _ in items]
    for idx in np.argsort(depths, kind="stable")[::-1]:
        p, kind = items[idx]
        r, c, d = project(p)
        r, c, d = r[0], c[0], d[0]
        if kind == "object":
            _disc(img, r, c, FOCAL * OBJECT_RADIUS / d, OBJECT_COLOR)
        else:
            ring = RING_CLOSED if state.gripper_closed else RING_OPEN
            _disc(img, r, c, FOCAL * (EE_RADIUS + RING_WIDTH) / d, ring)
            _disc(img, r, c, FOCAL * EE_RADIUS / d, EE_COLOR)
            yaw = state.orient[2]
            if yaw:
                rr = FOCAL * EE_RADIUS / d
                _disc(img, r - rr * np.cos(yaw), c + rr * np.sin(yaw), 0.8, TICK_COLOR)
    tr, tc, td = project(state.target * [1, 1, 0])
    _ring(img, tr[0], tc[0], FOCAL * TARGET_RADIUS / td[0], FOCAL * TARGET_WIDTH / td[0], TARGET_COLOR)
    return np.clip(img, 0.0, 1.0)


# -- episodes ----------------------------------------------------------------

@dataclass
class EpisodeLog:
    task: TaskSpec
    seed: int
    states: list
    pred: np.ndarray  # (T, 7)
    ref: np.ndarray  # (T, 7)
    success: bool
    final_state: SceneState | None = None

    def __len__(self):
        return len(self.states)

    @property
    def ee_path(self):
        pts = [s.ee for s in self.states]
        if self.final_state is not None:
            pts.append(self.final_state.ee)
        return np.array(pts).reshape(-1, 3)

    CSV_COLUMNS = (["step", "ee_x", "ee_y", "ee_z", "rx", "ry", "rz", "grip"]
                   + [f"pred_{i}" for i in range(1, 8)] + [f"ref_{i}" for i in range(1, 8)])

    def csv_rows(self):
        """One row per step, then a ``success`` trailer row."""
        rows = []
        for t, s in enumerate(self.states):
            rows.append([t] + [repr(float(v)) for v in s.ee] + [repr(float(v)) for v in s.orient]
                        + [int(s.gripper_closed)] + [repr(float(v)) for v in self.pred[t]]
                        + [repr(float(v)) for v in self.ref[t]])
        rows.append(["success", int(self.success)])
        return rows

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        w.writerows(self.csv_rows())
        return buf.getvalue()


def expert_policy(image, state, task):
    return expert_action(state, task)


def zero_policy(image, state, task):
    return np.zeros(NUM_DOF)


def run_episode(policy, task, seed, patch=None, placement=None, transform=None,
                preprocess=None, spec=DEFAULT_SPEC):
    """Roll out ``policy(image, state, task)`` until success or the horizon.

    When a patch is given it is warped by ``transform`` (identity by default)
    and composited at ``placement`` on every camera frame; ``preprocess`` is
    then applied to the frame (e.g. an input-transformation defense).
    """
    tile = None
    if patch is not None:
        from .patch import Placement, apply_patch_array, warp_patch_array, TransformSample

        if placement is None:
            raise ValueError("a patch needs a placement")
        placement = Placement.coerce(placement)
        tile = warp_patch_array(patch, transform or TransformSample())
        placement.check(tile[0].shape[0], IMAGE_SIDE)
    state = reset(task, seed)
    states, preds, refs = [], [], []
    success = False
    for _ in range(task.horizon):
        frame = render(state)
        if tile is not None:
            frame = apply_patch_array(frame, tile, placement)
        if preprocess is not None:
            frame = preprocess(frame)
        action = spec.clamp(policy(frame, state, task))
        states.append(state)
        preds.append(action)
        refs.append(expert_action(state, task))
        state = step(state, action, spec)
        if is_success(state, task):
            success = True
            break
    return EpisodeLog(task, seed, states, np.array(preds).reshape(-1, NUM_DOF),
                      np.array(refs).reshape(-1, NUM_DOF), success, state)
