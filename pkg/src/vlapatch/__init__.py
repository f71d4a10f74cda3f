"""Adversarial patches against a discretized-action visuomotor policy, in plain numpy."""
from .actions import DEFAULT_SPEC, ActionSpec, detokenize, nad, tokenize
from .autodiff import ShapeError, Tape, Tensor, grad_check, value_and_grad
from .defenses import DefenseSpec
from .model import ModelConfig, ModelParams, forward, init_params, predict
from .objectives import ObjectiveSpec, loss_tma, loss_uada, loss_upa
from .optim import ScheduleConfig, adamw_step, lr_at
from .patch import AttackConfig, Patch, Placement, apply_patch, optimize, warp_patch
from .scene import TaskSpec, render, reset, run_episode, step
from .train import TrainConfig, train

__version__ = "0.1.0"
