"""Command-line pipeline: gen-data, train-model, attack, rollout, eval, defend, report.

Run as ``python3 -m vlapatch <command> --out DIR [flags]``.  Every flag can also
be given as ``key = value`` in a file passed with ``--config``; command-line
flags win over the file, and ``PF_SEED`` overrides the file's seed.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

import numpy as np

from . import evaluation as ev
from . import scene
from .actions import parse_dofs
from .defenses import DEFENSE_KINDS, SWEEP_GRID, DefenseSpec
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .patch import (AttackConfig, AttackError, Patch, PatchDataset, Placement, init_patch,
                    load_patch, optimize, patch_side, save_patch, save_ppm)
from .train import Demonstrations, ModelPolicy, TrainConfig, TrainingError, collect, train

logger = logging.getLogger("vlapatch")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
DESK_ITERS = 400

DEMO_FILE = "demos.pfd"
MODEL_FILE = "model.pfvla"
REPORT_FILE = "report.json"

# episode-seed ranges; training uses 0.. and 50_000.., evaluation 100_000..
ATTACK_SEED_BASE = 200_000
HELDOUT_SEED_BASE = 300_000


class ConfigError(ValueError):
    pass


class MissingArtifact(RuntimeError):
    pass


def _opt_int(v):
    return None if v in (None, "", "none") else int(v)


def _flag(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


# name -> (type, default, help)
COMMON = {
    "out": (str, "runs/default", "output directory"),
    "seed": (int, 0, "global seed"),
}
COMMANDS = {
    "gen-data": {
        "frames": (int, 2000, "frames per task"),
    },
    "train-model": {
        "epochs": (int, 16, "behavior-cloning epochs"),
        "lr": (float, 2e-3, "peak learning rate"),
        "batch": (int, 16, "minibatch size"),
        "dagger_rounds": (int, 2, "on-policy aggregation rounds"),
        "dagger_frames": (int, 1000, "frames per task per aggregation round"),
        "dagger_epochs": (int, 4, "epochs after each aggregation round"),
    },
    "attack": {
        "task": (str, "pick-and-place", "task whose frames the patch is optimized on"),
        "objective": (str, "uada", "uada | upa | tma | untargeted"),
        "dof": (str, "1", "attacked DoFs, 1-based (e.g. 1 or 1-3)"),
        "target": (str, None, "TMA target value(s), comma separated, one per DoF"),
        "iters": (_opt_int, None, "outer iterations T (default 2000, 400 with --desk)"),
        "inner": (int, 50, "inner EOT steps k"),
        "batch": (int, 6, "frames per outer iteration"),
        "lr": (float, 2e-3, "peak learning rate"),
        "warmup": (int, 20, "warm-up iterations"),
        "phi": (float, 0.2, "shear bound"),
        "psi": (float, 30.0, "rotation bound in degrees"),
        "alpha": (float, 0.8, "UPA direction weight"),
        "beta": (float, 0.2, "UPA magnitude weight"),
        "fraction": (float, 0.05, "patch area as a share of the image"),
        "frames": (int, 600, "attack frames collected for the task"),
        "px": (_opt_int, None, "patch column (default: task base point)"),
        "py": (_opt_int, None, "patch row (default: task base point)"),
        "name": (str, None, "artifact name (default derived from objective/dof/task)"),
        "desk": (_flag, False, "short schedule: T=400"),
    },
    "rollout": {
        "task": (str, "pick-and-place", "task kind"),
        "patch": (str, None, "attack name under attacks/ (omit for benign)"),
        "random_patch": (_flag, False, "use a random patch of the same size instead"),
        "episodes": (int, 50, "episodes"),
        "px": (_opt_int, None, "patch column"),
        "py": (_opt_int, None, "patch row"),
        "defense": (str, None, "kind:param, e.g. jpeg:30"),
        "name": (str, None, "rollout name"),
    },
    "eval": {
        "trials": (int, 50, "episodes per condition"),
        "patches": (str, None, "comma-separated attack names (default: all)"),
        "tasks": (str, None, "victim tasks for the transfer matrix (default: all)"),
        "grid": (_flag, True, "run the 9-point placement grid"),
        "transfer": (_flag, True, "run the cross-task transfer matrix"),
    },
    "defend": {
        "patch": (str, None, "attack name (default: the only/first one)"),
        "trials": (int, 50, "episodes per condition"),
        "kinds": (str, ",".join(DEFENSE_KINDS), "defense kinds to sweep"),
    },
    "report": {
        "patch": (str, None, "attack name (default: the only/first one)"),
        "episodes": (int, 3, "episodes per series"),
        "name": (str, None, "file stem under traj/"),
    },
}


# -- configuration ---------------------------------------------------------------

def read_config_file(path):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from None
    out = {}
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected key = value, got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _table(command):
    return {**COMMON, **COMMANDS[command]}


def build_parser():
    parser = argparse.ArgumentParser(prog="vlapatch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, table in COMMANDS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", help="key = value file")
        for name, (typ, default, help_) in {**COMMON, **table}.items():
            flag = "--" + name.replace("_", "-")
            if typ is _flag:
                p.add_argument(flag, nargs="?", const="true", default=None, help=help_)
            else:
                p.add_argument(flag, default=None, help=f"{help_} (default {default})")
    return parser


def resolve(command, args, env=None):
    """Defaults < config file < PF_SEED < command line.  Returns a typed dict."""
    env = os.environ if env is None else env
    table = _table(command)
    raw = {k: v[1] for k, v in table.items()}
    if args.get("config"):
        file_vals = read_config_file(args["config"])
        unknown = sorted(set(file_vals) - set(table))
        if unknown:
            raise ConfigError(f"{args['config']}: unknown key(s) for {command}: {', '.join(unknown)}")
        raw.update(file_vals)
    if env.get("PF_SEED") not in (None, ""):
        raw["seed"] = env["PF_SEED"]
    for k in table:
        if args.get(k) is not None:
            raw[k] = args[k]
    cfg = {}
    for k, (typ, _, _) in table.items():
        v = raw[k]
        try:
            cfg[k] = v if v is None else typ(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{command}: bad value for {k}: {v!r}") from None
    return cfg


def _write_json(path, obj):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True, default=ev._jsonable) + "\n")


# where artifacts go is not part of what was run
_UNHASHED = ("out", "config")


def _run_record(command, cfg):
    hashed = {k: v for k, v in cfg.items() if k not in _UNHASHED}
    return {"command": command, "config": cfg, "config_digest": ev.config_digest({"command": command, **hashed}),
            "seed": cfg["seed"]}


def _task(kind):
    try:
        return scene.TaskSpec(kind=kind)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _load_model(out):
    path = os.path.join(out, MODEL_FILE)
    if not os.path.exists(path):
        raise MissingArtifact(f"missing checkpoint {path}; run train-model first")
    params, _ = load_checkpoint(path)
    return params


def _attack_dir(out, name):
    return os.path.join(out, "attacks", name)


def list_attacks(out):
    root = os.path.join(out, "attacks")
    if not os.path.isdir(root):
        return []
    return sorted(d for d in os.listdir(root) if os.path.exists(os.path.join(root, d, "patch.f64")))


def load_attack(out, name):
    d = _attack_dir(out, name)
    path = os.path.join(d, "patch.f64")
    if not os.path.exists(path):
        raise MissingArtifact(f"missing patch {path}; run attack first")
    with open(os.path.join(d, "config.json")) as fh:
        meta = json.load(fh)
    return load_patch(path), meta


def _pick_attack(out, name):
    if name:
        return name
    names = list_attacks(out)
    if not names:
        raise MissingArtifact(f"no attack artifacts under {os.path.join(out, 'attacks')}; run attack first")
    return names[0]


# -- commands --------------------------------------------------------------------

def cmd_gen_data(cfg):
    tc = TrainConfig(frames_per_task=cfg["frames"], seed=cfg["seed"])
    demos = collect(scene.default_suite(), tc.frames_per_task, tc.seed, tc.noise_levels, tc.gripper_flip_prob,
                    record_prob=tc.record_prob)
    os.makedirs(cfg["out"], exist_ok=True)
    demos.save(os.path.join(cfg["out"], DEMO_FILE))
    _write_json(os.path.join(cfg["out"], "gen-data.json"), {**_run_record("gen-data", cfg), "frames": len(demos)})
    logger.info("wrote %d frames to %s", len(demos), os.path.join(cfg["out"], DEMO_FILE))


def cmd_train_model(cfg):
    path = os.path.join(cfg["out"], DEMO_FILE)
    if not os.path.exists(path):
        raise MissingArtifact(f"missing demonstrations {path}; run gen-data first")
    demos = Demonstrations.load(path)
    try:
        tc = TrainConfig(frames_per_task=max(1, len(demos) // 4), epochs=cfg["epochs"], batch=cfg["batch"],
                         lr=cfg["lr"], seed=cfg["seed"], dagger_rounds=cfg["dagger_rounds"],
                         dagger_frames=cfg["dagger_frames"], dagger_epochs=cfg["dagger_epochs"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    params, history = train(tc, demos=demos, model_config=ModelConfig(seed=cfg["seed"]))
    record = _run_record("train-model", cfg)
    save_checkpoint(params, os.path.join(cfg["out"], MODEL_FILE), extra={"config_digest": record["config_digest"]})
    _write_json(os.path.join(cfg["out"], "train-model.json"), {**record, "history": history})


def attack_name(cfg):
    if cfg.get("name"):
        return cfg["name"]
    return f"{cfg['objective']}-dof{cfg['dof']}-{cfg['task']}"


def attack_config(cfg):
    iters = cfg["iters"] if cfg["iters"] is not None else (DESK_ITERS if cfg["desk"] else 2000)
    try:
        dofs = parse_dofs(cfg["dof"])
        targets = None
        if cfg["target"] is not None:
            targets = tuple(float(t) for t in str(cfg["target"]).split(","))
            if len(targets) == 1 and len(dofs) > 1:
                targets = targets * len(dofs)
        return AttackConfig(objective=cfg["objective"], dofs=dofs, targets=targets, iters=iters,
                            inner=cfg["inner"], batch=cfg["batch"], lr=cfg["lr"], warmup=cfg["warmup"],
                            phi=cfg["phi"], psi_deg=cfg["psi"], fraction=cfg["fraction"],
                            alpha=cfg["alpha"], beta=cfg["beta"], seed=cfg["seed"])
    except ValueError as e:
        raise ConfigError(f"attack: {e}") from None


def placement_for(cfg, task_kind, side):
    base = ev.base_placement(task_kind, side)
    return Placement(cfg["px"] if cfg.get("px") is not None else base.px,
                     cfg["py"] if cfg.get("py") is not None else base.py)


def attack_frames(task, frames, seed, seed_offset=ATTACK_SEED_BASE):
    """Expert-labelled frames for patch optimization, from episodes disjoint from evaluation."""
    tc = TrainConfig()
    d = collect([task], frames, seed, tc.noise_levels, 0.0, seed_offset=seed_offset, record_prob=tc.record_prob)
    return PatchDataset(d.images.astype(np.float64), d.actions, d.task_ids)


def cmd_attack(cfg):
    task = _task(cfg["task"])
    acfg = attack_config(cfg)
    params = _load_model(cfg["out"])
    side = patch_side(acfg.fraction, scene.IMAGE_SIDE)
    placement = placement_for(cfg, task.kind, side)
    try:
        placement.check(side, scene.IMAGE_SIDE)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    data = attack_frames(task, cfg["frames"], cfg["seed"])
    name = attack_name(cfg)
    result = optimize(acfg, params, data, placement)
    d = _attack_dir(cfg["out"], name)
    os.makedirs(d, exist_ok=True)
    save_patch(result.patch, os.path.join(d, "patch.f64"))
    save_ppm(result.patch, os.path.join(d, "patch.ppm"))
    with open(os.path.join(d, "loss.csv"), "w") as fh:
        fh.write("step,loss\n")
        fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(result.losses))
    _write_json(os.path.join(d, "config.json"), {
        **_run_record("attack", cfg), "name": name, "task": task.kind,
        "attack": asdict(acfg), "placement": [placement.px, placement.py],
    })
    logger.info("attack %s: final loss %.5g", name, result.losses[-1] if len(result.losses) else float("nan"))
    return name


def _defense(text, seed):
    if not text:
        return None
    try:
        kind, param = text.split(":", 1)
        return DefenseSpec(kind, float(param), seed)
    except ValueError as e:
        raise ConfigError(f"bad --defense {text!r}: {e}") from None


def cmd_rollout(cfg):
    task = _task(cfg["task"])
    params = _load_model(cfg["out"])
    patch, placement = None, None
    if cfg["patch"] or cfg["random_patch"]:
        if cfg["patch"]:
            patch, meta = load_attack(cfg["out"], cfg["patch"])
        else:
            patch = init_patch(0.05, scene.IMAGE_SIDE, cfg["seed"])
        placement = placement_for(cfg, task.kind, patch.side)
    logs = ev.run_condition(ModelPolicy(params), task, ev.eval_seeds(cfg["episodes"]), patch, placement,
                            defense=_defense(cfg["defense"], cfg["seed"]))
    name = cfg["name"] or f"{task.kind}-{cfg['patch'] or ('random' if cfg['random_patch'] else 'benign')}"
    d = os.path.join(cfg["out"], "rollouts")
    os.makedirs(d, exist_ok=True)
    with open(os.path.join(d, f"{name}.csv"), "w") as fh:
        fh.write(ev.trajectory_csv(logs, [name] * len(logs)))
    summary = ev.summarize(logs)
    _write_json(os.path.join(d, f"{name}.json"), {**_run_record("rollout", cfg), "metrics": summary,
                                                  "seeds": ev.eval_seeds(cfg["episodes"])})
    return summary


def _update_report(out, key, value):
    path = os.path.join(out, REPORT_FILE)
    report = {"format": "vlapatch-report/1"}
    if os.path.exists(path):
        with open(path) as fh:
            report = json.load(fh)
    report[key] = value
    _write_json(path, report)


def cmd_eval(cfg):
    if not os.path.isdir(cfg["out"]):
        raise MissingArtifact(f"output directory {cfg['out']} does not exist")
    params = _load_model(cfg["out"])
    names = cfg["patches"].split(",") if cfg["patches"] else list_attacks(cfg["out"])
    if not names:
        raise MissingArtifact(f"no attack artifacts under {cfg['out']}; run attack first")
    policy = ModelPolicy(params)
    attacks = {n: load_attack(cfg["out"], n) for n in names}
    section = {**_run_record("eval", cfg), "attacks": names}
    if cfg["grid"]:
        grids = {}
        for n, (patch, meta) in attacks.items():
            task = _task(meta["task"])
            rep = ev.placement_grid_eval(policy, patch, task, Placement(*meta["placement"]), cfg["trials"])
            grids[n] = rep.to_dict()
        section["placement_grid"] = grids
    if cfg["transfer"]:
        kinds = cfg["tasks"].split(",") if cfg["tasks"] else list(scene.TASK_KINDS)
        victims = [_task(k) for k in kinds]
        fr = ev.transfer_matrix(policy, {n: a[0] for n, a in attacks.items()}, victims, cfg["trials"])
        baseline = [ev.failure_rate(ev.run_condition(policy, t, ev.eval_seeds(cfg["trials"]))) for t in victims]
        section["transfer"] = {"sources": names, "victims": kinds, "failure_rate": fr.tolist(),
                               "no_patch_failure_rate": baseline, "seeds": ev.eval_seeds(cfg["trials"])}
    _update_report(cfg["out"], "eval", section)
    return section


def cmd_defend(cfg):
    params = _load_model(cfg["out"])
    name = _pick_attack(cfg["out"], cfg["patch"])
    patch, meta = load_attack(cfg["out"], name)
    kinds = [k.strip() for k in cfg["kinds"].split(",") if k.strip()]
    bad = [k for k in kinds if k not in DEFENSE_KINDS]
    if bad:
        raise ConfigError(f"unknown defense kind(s): {', '.join(bad)}")
    grid = {k: SWEEP_GRID[k] for k in kinds}
    rep = ev.defense_sweep(ModelPolicy(params), patch, _task(meta["task"]), Placement(*meta["placement"]),
                           cfg["trials"], grid=grid, seed=cfg["seed"])
    ev.write_sweep(rep, cfg["out"])
    _update_report(cfg["out"], "defense", {**_run_record("defend", cfg), "attack": name, **rep.to_dict()})
    return rep


def cmd_report(cfg):
    params = _load_model(cfg["out"])
    name = _pick_attack(cfg["out"], cfg["patch"])
    patch, meta = load_attack(cfg["out"], name)
    task = _task(meta["task"])
    placement = Placement(*meta["placement"])
    policy = ModelPolicy(params)
    seeds = ev.eval_seeds(cfg["episodes"])
    benign = ev.run_condition(policy, task, seeds)
    adv = ev.run_condition(policy, task, seeds, patch, placement)
    paths = ev.emit_trajectory_report(benign, adv, cfg["out"], cfg["name"] or name)
    _update_report(cfg["out"], f"trajectories:{cfg['name'] or name}",
                   {**_run_record("report", cfg), "files": [os.path.relpath(p, cfg["out"]) for p in paths],
                    "seeds": seeds})
    return paths


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-model": cmd_train_model,
    "attack": cmd_attack,
    "rollout": cmd_rollout,
    "eval": cmd_eval,
    "defend": cmd_defend,
    "report": cmd_report,
}


def run(command, **overrides):
    """Programmatic entry: same resolution rules as the command line, minus argv parsing."""
    cfg = resolve(command, overrides)
    return HANDLERS[command](cfg)


def main(argv=None):
    parser = build_parser()
    args = vars(parser.parse_args(argv))  # argparse exits with status 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.pop("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = args.pop("command")
    try:
        cfg = resolve(command, args)
        HANDLERS[command](cfg)
    except ConfigError as e:
        print(f"vlapatch {command}: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, AttackError, TrainingError, OSError, ValueError) as e:
        print(f"vlapatch {command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK
