"""Demonstration generation and behavior cloning for the surrogate policy."""
from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass

import numpy as np

from . import scene
from ._io import check_magic, read_bytes
from .actions import DEFAULT_SPEC, NUM_DOF, tokenize
from .autodiff import Tape
from .model import ModelConfig, bc_loss_graph, bind, forward_graph, init_params
from .optim import AdamWState, ScheduleConfig, adamw_step, lr_at

logger = logging.getLogger(__name__)


DEMO_MAGIC = b"PFDEMO1"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    frames_per_task: int = 2000
    epochs: int = 16
    batch: int = 16
    lr: float = 2e-3
    warmup: int = 50
    seed: int = 0
    # execution noise on position deltas; labels stay the clean expert action
    noise_levels: tuple = (0.0, 0.25, 0.5)
    gripper_flip_prob: float = 0.04
    # share of visited frames kept; below 1 the same frame budget spans more layouts
    record_prob: float = 0.25
    # on-policy aggregation: frames visited by the learner, labelled by the expert
    dagger_rounds: int = 2
    dagger_frames: int = 1000
    dagger_epochs: int = 4

    def __post_init__(self):
        if self.frames_per_task < 1 or self.epochs < 1 or self.batch < 1:
            raise ValueError("frame count, epochs and batch must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 < self.record_prob <= 1:
            raise ValueError("record_prob must lie in (0, 1]")
        if self.dagger_rounds < 0 or (self.dagger_rounds and (self.dagger_frames < 1 or self.dagger_epochs < 1)):
            raise ValueError("aggregation rounds need positive frame and epoch counts")


@dataclass
class Demonstrations:
    images: np.ndarray  # (M, 64, 64, 3)
    actions: np.ndarray  # (M, 7) expert actions at the visited states
    task_ids: np.ndarray  # (M,)
    episode_seeds: np.ndarray  # (M,)

    def __len__(self):
        return len(self.images)

    def subset(self, idx):
        return Demonstrations(self.images[idx], self.actions[idx], self.task_ids[idx],
                              self.episode_seeds[idx])

    def extend(self, other):
        return Demonstrations(*(np.concatenate([a, b]) for a, b in zip(
            (self.images, self.actions, self.task_ids, self.episode_seeds),
            (other.images, other.actions, other.task_ids, other.episode_seeds))))

    def save(self, path):
        """Magic, JSON header, then float32 images and float64/int64 label arrays (little-endian)."""
        header = json.dumps({"count": len(self), "image_shape": list(self.images.shape[1:])}).encode()
        with open(path, "wb") as fh:
            fh.write(DEMO_MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(self.actions, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.task_ids, dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(self.episode_seeds, dtype="<i8").tobytes())

    @classmethod
    def load(cls, path):
        data = read_bytes(path, "demonstration")
        off = check_magic(data, DEMO_MAGIC, "demonstration", path)
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        meta = json.loads(data[off:off + n])
        off += n
        m, shape = meta["count"], tuple(meta["image_shape"])
        parts = []
        for dtype, shp in (("<f4", (m,) + shape), ("<f8", (m, NUM_DOF)), ("<i8", (m,)), ("<i8", (m,))):
            count = int(np.prod(shp))
            size = np.dtype(dtype).itemsize * count
            if off + size > len(data):
                raise ValueError(f"{path}: truncated demonstration file")
            parts.append(np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shp).copy())
            off += size
        return cls(*parts)


def collect(tasks, frames_per_task, seed, noise_levels=(0.0,), flip_prob=0.0, seed_offset=0, record_prob=1.0):
    """Roll out the expert with perturbed execution and record labelled frames.

    Each visited frame is kept with probability ``record_prob``.
    """
    images, actions, tids, seeds = [], [], [], []
    for task in tasks:
        rng = np.random.default_rng([seed, task.task_id, 7])
        count, ep = 0, seed_offset
        while count < frames_per_task:
            sigma = noise_levels[ep % len(noise_levels)]
            state = scene.reset(task, ep)
            for _ in range(task.horizon):
                label = scene.expert_action(state, task)
                if record_prob >= 1.0 or rng.random() < record_prob:
                    images.append(scene.render(state))
                    actions.append(label)
                    tids.append(task.task_id)
                    seeds.append(ep)
                    count += 1
                executed = label.copy()
                if sigma:
                    executed[:3] += rng.normal(0.0, sigma, 3)
                if flip_prob and rng.random() < flip_prob:
                    executed[6] = -executed[6]
                state = scene.step(state, executed)
                if count >= frames_per_task or scene.is_success(state, task):
                    break
            ep += 1
    return _pack(images, actions, tids, seeds)


def _pack(images, actions, tids, seeds):
    return Demonstrations(np.array(images, dtype=np.float32), np.array(actions),
                          np.array(tids, dtype=np.int64), np.array(seeds, dtype=np.int64))


def collect_on_policy(policy, tasks, frames_per_task, seed_offset, record_prob=1.0, seed=0):
    """Frames visited by ``policy``, each labelled with the expert action there."""
    images, actions, tids, seeds = [], [], [], []
    for task in tasks:
        rng = np.random.default_rng([seed, task.task_id, seed_offset])
        count, ep = 0, seed_offset
        while count < frames_per_task:
            state = scene.reset(task, ep)
            for _ in range(task.horizon):
                image = scene.render(state)
                if record_prob >= 1.0 or rng.random() < record_prob:
                    images.append(image)
                    actions.append(scene.expert_action(state, task))
                    tids.append(task.task_id)
                    seeds.append(ep)
                    count += 1
                state = scene.step(state, policy(image, state, task))
                if count >= frames_per_task or scene.is_success(state, task):
                    break
            ep += 1
    return _pack(images, actions, tids, seeds)


def fit(params, demos, epochs, config, rng, log=None, tag=""):
    """Run ``epochs`` passes of AdamW over ``demos``; updates ``params`` in place."""
    labels = tokenize(demos.actions, DEFAULT_SPEC)
    n = len(demos)
    steps_per_epoch = -(-n // config.batch)
    total = steps_per_epoch * epochs
    sched = ScheduleConfig(peak_lr=config.lr, warmup=min(config.warmup, total), total=total)
    names = list(params.keys())
    state = AdamWState.zeros_like(params.arrays())
    history = []
    t = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        tic = time.perf_counter()
        total_loss = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch:(b + 1) * config.batch]
            tape = Tape()
            nodes = bind(tape, params, trainable=True)
            x = tape.constant(demos.images[idx].astype(np.float64))
            logits = forward_graph(tape, nodes, x, demos.task_ids[idx])
            loss = bc_loss_graph(tape, logits, labels[idx])
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingError(f"behavior-cloning loss diverged at epoch {epoch}, batch {b}")
            grads = tape.backprop(loss, [nodes[k] for k in names])
            adamw_step(params.arrays(), grads, state, lr_at(t, sched))
            t += 1
            total_loss += value * len(idx)
        mean_loss = total_loss / n
        history.append(mean_loss)
        msg = f"{tag}epoch {epoch + 1}/{epochs} bc-loss {mean_loss:.4f} ({time.perf_counter() - tic:.1f}s)"
        logger.info(msg)
        if log is not None:
            log(msg)
    return history


def train(config, tasks=None, demos=None, model_config=None, log=None):
    """Behavior cloning plus optional on-policy aggregation.  Returns ``(params, history)``."""
    tasks = tasks or scene.default_suite()
    if demos is None:
        demos = collect(tasks, config.frames_per_task, config.seed, config.noise_levels,
                        config.gripper_flip_prob, record_prob=config.record_prob)
    model_config = model_config or ModelConfig(seed=config.seed)
    params = init_params(model_config)
    rng = np.random.default_rng([config.seed, 11])
    history = fit(params, demos, config.epochs, config, rng, log)
    # aggregation episodes use seeds disjoint from the expert rollouts
    offset = 50_000
    for r in range(config.dagger_rounds):
        fresh = collect_on_policy(ModelPolicy(params), tasks, config.dagger_frames, offset,
                                  config.record_prob, config.seed)
        offset += 10_000
        demos = demos.extend(fresh)
        history += fit(params, demos, config.dagger_epochs, config, rng, log, tag=f"agg{r + 1} ")
    return params, history


def bin_agreement(params, demos, batch=256):
    """Fraction of (frame, DoF) pairs whose argmax bin matches the expert bin."""
    from .model import forward, predict_bins

    labels = tokenize(demos.actions, DEFAULT_SPEC)
    hits = 0
    for s in range(0, len(demos), batch):
        logits = forward(params, demos.images[s:s + batch], demos.task_ids[s:s + batch])
        hits += int((predict_bins(logits) == labels[s:s + batch]).sum())
    return hits / (len(demos) * NUM_DOF)


class ModelPolicy:
    """Adapter so a trained model can drive :func:`scene.run_episode`."""

    def __init__(self, params, spec=DEFAULT_SPEC):
        self.params = params
        self.spec = spec

    def __call__(self, image, state, task):
        from .model import predict

        return predict(self.params, image, task.task_id, self.spec)
