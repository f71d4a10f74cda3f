"""Surrogate vision policy: image + task id -> 7 x J bin logits."""
from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass

import numpy as np

from ._io import check_magic, read_bytes
from .actions import DEFAULT_SPEC, NUM_DOF, detokenize
from .autodiff import ShapeError, Tape

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PFVLA1"


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 64
    channels: tuple = (16, 32, 64)
    kernel: int = 3
    trunk: int = 256
    embed_dim: int = 16
    num_tasks: int = 4
    bins: int = 256
    seed: int = 0
    # constant row/column ramps appended to the RGB input
    coord_channels: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.resolution % (2 ** len(self.channels)):
            raise ValueError("resolution must be divisible by 2 per conv layer")

    @property
    def feature_side(self):
        return self.resolution // 2 ** len(self.channels)

    @property
    def feature_size(self):
        return self.feature_side ** 2 * self.channels[-1]

    def shapes(self):
        """Parameter names and shapes in declaration (= checkpoint) order."""
        out = []
        cin = 5 if self.coord_channels else 3
        for i, c in enumerate(self.channels):
            out.append((f"conv{i + 1}.w", (self.kernel, self.kernel, cin, c)))
            out.append((f"conv{i + 1}.b", (c,)))
            cin = c
        out.append(("task_embed", (self.num_tasks, self.embed_dim)))
        out.append(("trunk.w", (self.feature_size + self.embed_dim, self.trunk)))
        out.append(("trunk.b", (self.trunk,)))
        out.append(("heads.w", (self.trunk, NUM_DOF * self.bins)))
        out.append(("heads.b", (NUM_DOF * self.bins,)))
        return out


class ModelParams(dict):
    """Ordered name -> float64 array mapping plus the config that shaped it."""

    def __init__(self, config, arrays):
        super().__init__(arrays)
        self.config = config
        expected = config.shapes()
        if list(self.keys()) != [n for n, _ in expected]:
            raise ValueError("parameter names do not match the model config")
        for name, shape in expected:
            if self[name].shape != shape:
                raise ShapeError("params", self[name].shape, shape, detail=name)

    def arrays(self):
        return list(self.values())

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.items()})


def init_params(config):
    rng = np.random.default_rng(config.seed)
    arrays = {}
    for name, shape in config.shapes():
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape)
        elif name == "task_embed":
            arrays[name] = rng.uniform(-1.0, 1.0, shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            gain = 1.0 if name == "heads.w" else 6.0
            bound = np.sqrt(gain / fan_in)
            arrays[name] = rng.uniform(-bound, bound, shape)
    return ModelParams(config, arrays)


def zero_params(config):
    return ModelParams(config, {n: np.zeros(s) for n, s in config.shapes()})


def _coord_grid(res):
    r = np.linspace(-0.5, 0.5, res)
    rows, cols = np.meshgrid(r, r, indexing="ij")
    return np.stack([rows, cols], axis=-1)


def forward_graph(tape, p, image, task_ids):
    """Record the forward pass.  ``p`` maps names to tape tensors.

    ``image`` is an (N, H, W, 3) tensor in [0, 1]; returns (N, 7, J) logits.
    """
    cfg = p["_config"]
    res = cfg.resolution
    if image.value.ndim != 4 or image.shape[1:] != (res, res, 3):
        raise ShapeError("forward", image.shape, (None, res, res, 3))
    task_ids = np.asarray(task_ids, dtype=np.int64).reshape(-1)
    n = image.shape[0]
    if task_ids.size == 1 and n > 1:
        task_ids = np.repeat(task_ids, n)
    if task_ids.size != n:
        raise ShapeError("forward", image.shape, task_ids.shape, detail="one task id per image")
    h = tape.add(image, -0.5)
    if cfg.coord_channels:
        h = tape.concat([h, tape.constant(np.broadcast_to(_coord_grid(res), (n, res, res, 2)))], axis=3)
    for i in range(len(cfg.channels)):
        h = tape.relu(tape.conv2d(h, p[f"conv{i + 1}.w"], p[f"conv{i + 1}.b"], stride=2, padding=1))
    h = tape.reshape(h, (n, cfg.feature_size))
    h = tape.concat([h, tape.embedding(p["task_embed"], task_ids)], axis=1)
    h = tape.relu(tape.dense(h, p["trunk.w"], p["trunk.b"]))
    logits = tape.dense(h, p["heads.w"], p["heads.b"])
    return tape.reshape(logits, (n, NUM_DOF, cfg.bins))


def bind(tape, params, trainable=False):
    """Put parameter arrays on ``tape`` as inputs (trainable) or constants."""
    nodes = {"_config": params.config}
    for name, arr in params.items():
        nodes[name] = tape.input(arr, name) if trainable else tape.constant(arr, name)
    return nodes


def _as_batch(image):
    image = np.asarray(image, dtype=np.float64)
    return image[None] if image.ndim == 3 else image


def forward(params, image, task_id):
    """Logits for one image (7, J) or a batch (N, 7, J)."""
    single = np.ndim(image) == 3
    tape = Tape()
    x = tape.constant(_as_batch(image))
    out = forward_graph(tape, bind(tape, params), x, task_id).value
    return out[0] if single else out


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_bins(logits):
    # np.argmax returns the first maximum, i.e. ties go to the lower bin
    return np.argmax(logits, axis=-1)


def predict(params, image, task_id, spec=DEFAULT_SPEC):
    return detokenize(predict_bins(forward(params, image, task_id)), spec)


def bc_loss_graph(tape, logits, expert_bins):
    """Sum over DoFs of cross-entropy, averaged over the batch."""
    bins = np.asarray(expert_bins, dtype=np.int64)
    if logits.value.ndim == 2:
        logits = tape.reshape(logits, (1,) + logits.shape)
        bins = bins.reshape(1, -1)
    nll = tape.pick(tape.log_softmax(logits), bins)
    return tape.scale(tape.sum(nll), -1.0 / logits.shape[0])


def bc_loss(logits, expert_bins):
    tape = Tape()
    return float(bc_loss_graph(tape, tape.constant(logits), expert_bins).value)


# -- checkpoint I/O ------------------------------------------------------------

def save_checkpoint(params, path, extra=None):
    """Magic, JSON config block, then little-endian float64 tensors in order."""
    meta = {"config": asdict(params.config), "extra": extra or {}}
    block = json.dumps(meta, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(block)))
    buf.write(block)
    for arr in params.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    data = read_bytes(path, "checkpoint")
    off = check_magic(data, CHECKPOINT_MAGIC, "checkpoint", path)
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off:off + n])
    off += n
    config = ModelConfig(**meta["config"])
    arrays = {}
    for name, shape in config.shapes():
        count = int(np.prod(shape))
        if off + 8 * count > len(data):
            raise ValueError(f"{path}: truncated at parameter {name}")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
        off += 8 * count
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after parameter block")
    return ModelParams(config, arrays), meta.get("extra", {})
