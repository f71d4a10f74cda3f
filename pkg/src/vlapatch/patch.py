"""Adversarial patch optimization with expectation over shear/rotation transforms."""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import model as vla
from .actions import DEFAULT_SPEC, as_mask
from ._io import check_magic, read_bytes
from .autodiff import Tape
from .objectives import ObjectiveSpec, objective_graph
from .optim import AdamWState, ScheduleConfig, adamw_step, lr_at

logger = logging.getLogger(__name__)

PATCH_MAGIC = b"PFPATCH1"


class AttackError(RuntimeError):
    pass


@dataclass
class Patch:
    values: np.ndarray  # (S, S, 3) float64 in [0, 1]

    @property
    def side(self):
        return self.values.shape[0]

    def copy(self):
        return Patch(self.values.copy())


@dataclass(frozen=True)
class TransformSample:
    shx: float = 0.0
    shy: float = 0.0
    theta: float = 0.0  # radians

    def matrix(self):
        """Shear times rotation, acting on (x=col, y=row) offsets."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        shear = np.array([[1.0, self.shy], [self.shx, 1.0]])
        rot = np.array([[c, -s], [s, c]])
        return shear @ rot


@dataclass(frozen=True)
class Placement:
    """Top-left corner of the patch tile: ``px`` is the column, ``py`` the row."""

    px: int
    py: int

    @classmethod
    def coerce(cls, value):
        if isinstance(value, Placement):
            return value
        px, py = value
        return cls(int(px), int(py))

    def check(self, side, image_side):
        if self.px < 0 or self.py < 0 or self.px + side > image_side or self.py + side > image_side:
            raise ValueError(
                f"placement (px={self.px}, py={self.py}) puts a {side}px tile outside the "
                f"{image_side}x{image_side} frame")

    def shifted(self, dx, dy):
        return Placement(self.px + dx, self.py + dy)


PlacementSpec = Placement


@dataclass(frozen=True)
class AttackConfig:
    objective: str = "uada"
    dofs: tuple = (0,)
    targets: tuple | None = None
    iters: int = 2000
    inner: int = 50
    batch: int = 6
    lr: float = 2e-3
    warmup: int = 20
    phi: float = 0.2
    psi_deg: float = 30.0
    fraction: float = 0.05
    alpha: float = 0.8
    beta: float = 0.2
    decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.iters < 0 or self.inner < 1 or self.batch < 1:
            raise ValueError("iters must be >= 0 and inner, batch >= 1")
        if not 0 < self.fraction < 1:
            raise ValueError("patch fraction must lie in (0, 1)")
        if self.phi < 0 or self.psi_deg < 0:
            raise ValueError("transform bounds must be non-negative")
        object.__setattr__(self, "dofs", as_mask(self.dofs))
        # validates objective kind, DoF coverage and TMA targets
        self.objective_spec()

    @property
    def psi(self):
        return math.radians(self.psi_deg)

    def objective_spec(self):
        return ObjectiveSpec(kind=self.objective, mask=self.dofs, alpha=self.alpha,
                             beta=self.beta, targets=self.targets)

    def schedule(self):
        return ScheduleConfig(peak_lr=self.lr, warmup=min(self.warmup, self.iters),
                              total=max(self.iters, 1))


def patch_side(fraction, image_side):
    return int(round(math.sqrt(fraction) * image_side))


def init_patch(fraction, image_side, seed):
    side = patch_side(fraction, image_side)
    if side < 2:
        raise ValueError(f"patch fraction {fraction} gives a side of {side}px; need at least 2")
    rng = np.random.default_rng(seed)
    return Patch(rng.random((side, side, 3)))


def sample_transform(phi, psi, rng):
    """Independent draws: shears in U(-phi, phi), angle in U(-psi, psi) radians."""
    if phi < 0 or psi < 0:
        raise ValueError("transform bounds must be non-negative")
    shx, shy = rng.uniform(-phi, phi, size=2) if phi else (0.0, 0.0)
    theta = rng.uniform(-psi, psi) if psi else 0.0
    return TransformSample(float(shx), float(shy), float(theta))


def clip_patch(patch):
    np.clip(patch.values, 0.0, 1.0, out=patch.values)
    return patch


def _warp_coords(side, t):
    """Source sampling coordinates and coverage for an S x S output tile."""
    center = (side - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(side, dtype=np.float64), np.arange(side, dtype=np.float64),
                             indexing="ij")
    dst = np.stack([cols - center, rows - center])  # (x, y)
    inv = np.linalg.inv(t.matrix())
    src = np.tensordot(inv, dst, axes=1)
    src_c, src_r = src[0] + center, src[1] + center
    inside = ((src_r >= -0.5) & (src_r <= side - 0.5) & (src_c >= -0.5) & (src_c <= side - 0.5))
    return src_r, src_c, inside.astype(np.float64)


def warp_patch_graph(tape, patch, t):
    """Inverse-mapped bilinear warp.  Returns ``(tile tensor, coverage array)``."""
    src_r, src_c, cover = _warp_coords(patch.shape[0], t)
    return tape.bilinear_sample(patch, src_r, src_c), cover


def warp_patch_array(patch, t):
    tape = Tape()
    values = patch.values if isinstance(patch, Patch) else patch
    tile, cover = warp_patch_graph(tape, tape.constant(values), t)
    return tile.value, cover


def warp_patch(patch, t):
    return warp_patch_array(patch, t)


def apply_patch_graph(tape, images, tile, cover, placement):
    """Composite a warped tile onto (N, H, W, 3) or (H, W, 3) constant images."""
    placement = Placement.coerce(placement)
    images = np.asarray(images, dtype=np.float64)
    side = tile.shape[0]
    placement.check(side, images.shape[-2])
    h, w = images.shape[-3], images.shape[-2]
    full_cover = np.zeros((h, w, 1))
    full_cover[placement.py:placement.py + side, placement.px:placement.px + side, 0] = cover
    layer = tape.pad_to(tape.mul(tile, cover[..., None]), (h, w, 3), (placement.py, placement.px, 0))
    return tape.add(images * (1.0 - full_cover), layer)


def apply_patch_array(image, tile, placement):
    """Non-differentiable compositing; ``tile`` is ``(values, coverage)``."""
    values, cover = tile
    placement = Placement.coerce(placement)
    side = values.shape[0]
    placement.check(side, image.shape[-2])
    out = np.array(image, dtype=np.float64, copy=True)
    region = out[..., placement.py:placement.py + side, placement.px:placement.px + side, :]
    c = cover[..., None]
    region[...] = region * (1.0 - c) + values * c
    return out


def apply_patch(image, tile, placement):
    return apply_patch_array(image, tile, placement)


@dataclass
class PatchDataset:
    """Frames the patch is optimized on: images, benign actions, task ids."""

    images: np.ndarray  # (M, H, W, 3)
    actions: np.ndarray  # (M, 7)
    task_ids: np.ndarray  # (M,)

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError("attack dataset is empty")
        if not len(self.images) == len(self.actions) == len(self.task_ids):
            raise ValueError("dataset arrays must have equal length")

    def __len__(self):
        return len(self.images)


@dataclass
class AttackResult:
    patch: Patch
    losses: np.ndarray  # one entry per inner step
    config: AttackConfig
    placement: Placement
    extra: dict = field(default_factory=dict)


def patch_loss_graph(tape, patch_node, params, images, actions, task_ids, obj, t, placement,
                     spec=DEFAULT_SPEC, nodes=None):
    """Full composite: warp -> composite -> policy forward -> objective."""
    tile, cover = warp_patch_graph(tape, patch_node, t)
    x = apply_patch_graph(tape, images, tile, cover, placement)
    logits = vla.forward_graph(tape, nodes or vla.bind(tape, params), x, task_ids)
    return objective_graph(obj, tape, logits, actions, spec)


def optimize(config, params, dataset, placement, spec=DEFAULT_SPEC, progress=None):
    """Run the outer/inner patch optimization loop.

    Each outer iteration draws one batch; each of the ``inner`` steps draws a
    fresh transform, back-propagates the objective to the patch, takes an
    AdamW step at the current scheduled learning rate and clips to [0, 1].
    """
    obj = config.objective_spec()
    image_side = dataset.images.shape[1]
    placement = Placement.coerce(placement)
    patch = init_patch(config.fraction, image_side, config.seed)
    placement.check(patch.side, image_side)
    rng = np.random.default_rng([config.seed, 1])
    sched = config.schedule()
    state = AdamWState.zeros_like([patch.values])
    losses = np.zeros(config.iters * config.inner)
    batch = min(config.batch, len(dataset))
    for it in range(config.iters):
        idx = np.sort(rng.choice(len(dataset), size=batch, replace=False))
        images, actions, tids = dataset.images[idx], dataset.actions[idx], dataset.task_ids[idx]
        lr = lr_at(it, sched)
        for j in range(config.inner):
            t = sample_transform(config.phi, config.psi, rng)
            tape = Tape()
            p = tape.input(patch.values, "patch")
            loss = patch_loss_graph(tape, p, params, images, actions, tids, obj, t, placement, spec)
            value = float(loss.value)
            step_no = it * config.inner + j
            if not np.isfinite(value):
                raise AttackError(f"non-finite attack loss at step {step_no} (iteration {it}, inner {j})")
            losses[step_no] = value
            (grad,) = tape.backprop(loss, [p])
            adamw_step([patch.values], [grad], state, lr, decay=config.decay)
            clip_patch(patch)
        if progress is not None:
            progress(it, float(losses[(it + 1) * config.inner - 1]))
        elif it % 50 == 0:
            logger.info("attack iter %d/%d loss %.5g lr %.3g", it, config.iters,
                        losses[(it + 1) * config.inner - 1], lr)
    return AttackResult(patch, losses, config, placement)


# -- artifacts -----------------------------------------------------------------

def save_patch(patch, path):
    """Master copy: magic, side (uint32), then S*S*3 little-endian doubles."""
    with open(path, "wb") as fh:
        fh.write(PATCH_MAGIC)
        fh.write(struct.pack("<I", patch.side))
        fh.write(np.ascontiguousarray(patch.values, dtype="<f8").tobytes())


def load_patch(path):
    data = read_bytes(path, "patch")
    check_magic(data, PATCH_MAGIC, "patch", path)
    (side,) = struct.unpack_from("<I", data, len(PATCH_MAGIC))
    off = len(PATCH_MAGIC) + 4
    if len(data) != off + side * side * 3 * 8:
        raise ValueError(f"{path}: size does not match a {side}x{side} patch")
    values = np.frombuffer(data, dtype="<f8", offset=off).astype(np.float64).reshape(side, side, 3)
    return Patch(values)


def quantize(values):
    return np.round(np.clip(values, 0.0, 1.0) * 255).astype(np.uint8)


def save_ppm(patch, path):
    values = patch.values if isinstance(patch, Patch) else patch
    q = quantize(values)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (q.shape[1], q.shape[0]))
        fh.write(q.tobytes())


def load_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = int(fields[1]), int(fields[2])
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pixels.reshape(h, w, 3)
