"""Pipeline driver: data generation, staged training, evaluation, rollouts.

One binary with subcommands. Settings come from an optional `key = value`
config file; command-line flags override file values. Exit codes: 0 on
success, 1 on usage or config errors, 2 on runtime failures.
"""

import argparse
import dataclasses
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cloth_sim as cs
from . import eval as ev
from . import lang
from . import oracle
from . import train


class ConfigError(ValueError):
    """Malformed config file or invalid flag combination."""


@dataclass
class RunConfig:
    """Every setting a subcommand reads, with its default.

    `workers = 0` means one process per available core. Spawn geometry keys
    mirror the simulator defaults and apply to every command that samples
    cloth poses.
    """

    seed: int = 0
    workers: int = 0
    demos_per_cell: int = 100
    episodes_per_cell: int = 50
    lr: float = 3e-4
    batch: int = 16
    epochs_edges: int = 20
    epochs_policy: int = 100
    epochs_success: int = 20
    eval_every: int = 10
    t_max: int = 4
    gated: bool = True
    side_min: float = 0.40
    side_max: float = 0.52
    center_offset: float = 0.06
    yaw_deg: float = 10.0


_KEYS = {f.name: f for f in dataclasses.fields(RunConfig)}
_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _coerce(key: str, raw: str, where: str):
    kind = _KEYS[key].type
    try:
        if kind == "bool" or kind is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        if kind == "int" or kind is int:
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {key}") from None


def parse_run_config(text: str, origin: str = "<config>") -> RunConfig:
    """Parse `key = value` lines; `#` starts a comment; unknown keys are fatal."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key or not val:
            raise ConfigError(f"{origin}:{lineno}: expected `key = value`, got {raw.strip()!r}")
        if key not in _KEYS:
            raise ConfigError(f"{origin}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, val, f"{origin}:{lineno}")
    return RunConfig(**values)


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}") from None
    return parse_run_config(text, str(path))


def _resolve_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    overrides = {
        k: getattr(args, k)
        for k in _KEYS
        if getattr(args, k, None) is not None
    }
    return dataclasses.replace(cfg, **overrides)


def _spawn_config(cfg: RunConfig) -> cs.SpawnConfig:
    return cs.SpawnConfig(
        side_range=(cfg.side_min, cfg.side_max),
        center_offset=cfg.center_offset,
        yaw_range=float(np.deg2rad(cfg.yaw_deg)),
    )


def _workers(cfg: RunConfig) -> int:
    return cfg.workers if cfg.workers > 0 else (os.cpu_count() or 1)


def _train_config(cfg: RunConfig, data, out) -> train.TrainConfig:
    return train.TrainConfig(
        lr=cfg.lr,
        batch=cfg.batch,
        epochs_edges=cfg.epochs_edges,
        epochs_policy=cfg.epochs_policy,
        epochs_success=cfg.epochs_success,
        seed=cfg.seed,
        eval_every=cfg.eval_every,
        data_path=str(data),
        checkpoint_path=str(out),
    )


# -- subcommands -----------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> int:
    ds = oracle.generate_dataset(
        cfg.demos_per_cell, cfg.seed, args.out,
        config=_spawn_config(cfg), workers=_workers(cfg),
    )
    print(f"wrote {len(ds)} demonstrations to {args.out}")
    return 0


def cmd_train_edges(cfg: RunConfig, args) -> int:
    tc = _train_config(cfg, args.data, args.out)
    ds = oracle.load_dataset(args.data)
    result = train.train_edge_gnn(ds, tc)
    train.save_checkpoint(train.Models(result.params, None), args.out, stage=1, config=tc)
    h = result.holdout
    print(f"stage 1 done: loss {result.epoch_losses[-1]:.4f}  "
          f"holdout f1 {h['f1']:.3f}  checkpoint {args.out}")
    return 0


def cmd_train_policy(cfg: RunConfig, args) -> int:
    tc = _train_config(cfg, args.data, args.out)
    ds = oracle.load_dataset(args.data)
    ck = train.load_checkpoint(args.edges)
    if ck.models.edge_gnn is None:
        raise train.CheckpointError(f"{args.edges} holds no edge_gnn parameters")
    result = train.train_policy(ds, ck.models.edge_gnn, tc)
    train.save_checkpoint(
        train.Models(ck.models.edge_gnn, result.params), args.out, stage=2, config=tc
    )
    print(f"stage 2 done: loss {result.epoch_losses[-1]:.4f}  "
          f"pick acc {result.pick_accuracy:.3f}  place<=2px {result.place_within_2px:.3f}  "
          f"checkpoint {args.out}")
    return 0


def cmd_train_success(cfg: RunConfig, args) -> int:
    tc = _train_config(cfg, args.data, args.out)
    ds = oracle.load_dataset(args.data)
    ck = train.load_checkpoint(args.policy)
    result = train.train_success_classifier(ds, ck.models, tc)
    train.save_checkpoint(
        train.Models(ck.models.edge_gnn, result.params), args.out, stage=3, config=tc
    )
    print(f"stage 3 done: holdout accuracy {result.holdout_accuracy:.3f}  "
          f"checkpoint {args.out}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    ck = train.load_checkpoint(args.policy)
    policy = ev.NeuralPolicy(ck.models)
    gated = cfg.gated and not args.fixed_horizon
    report = ev.evaluate_suite(
        policy, n_per_cell=cfg.episodes_per_cell, seed=cfg.seed, gated=gated,
        config=_spawn_config(cfg), workers=_workers(cfg),
    )
    ev.write_report(report, args.out)
    print(ev.format_report(report))
    print(f"wrote {args.out}")
    return 0


def _dump_maps(maps: list, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for t, m in enumerate(maps):
        ev.export_heatmap(m["q_place"], out_dir / f"step{t}_place.pgm")
        ev.export_heatmap(m["q_pick"], out_dir / f"step{t}_pick.csv", nodes=m["nodes"])


def cmd_rollout(cfg: RunConfig, args) -> int:
    try:
        task = lang.TaskSpec(
            lang.TaskType[args.task.upper()], lang.Direction[args.direction.upper()]
        )
        text = lang.render_instruction(task, args.template)
    except lang.GrammarError as e:
        raise ConfigError(str(e)) from None
    instruction = lang.instruction_from_text(text)

    if args.oracle:
        policy = ev.OraclePolicy()
    elif args.policy:
        policy = ev.NeuralPolicy(train.load_checkpoint(args.policy).models)
    else:
        raise ConfigError("rollout needs --policy CKPT or --oracle")

    result = ev.rollout(
        policy, instruction, cfg.seed, t_max=cfg.t_max, gated=cfg.gated,
        config=_spawn_config(cfg), keep_maps=args.dump is not None,
    )
    print(f"instruction: {instruction.text}")
    print(f"split: {instruction.split.value}  seed: {cfg.seed}")
    for t, a in enumerate(result.actions):
        px, py = a.pick_xy
        qx, qy = a.place_xy
        print(f"step {t}: pick ({px:+.3f}, {py:+.3f}) -> place ({qx:+.3f}, {qy:+.3f})")
    if not result.actions:
        print("no actions taken")
    print(f"error: {result.error:.4f} m")
    print(f"success: {result.success}  classifier_stop: {result.classifier_stop}")
    if args.dump is not None:
        _dump_maps(result.maps, Path(args.dump))
        print(f"wrote {2 * len(result.maps)} heatmaps to {args.dump}")
    return 0


def cmd_render(cfg: RunConfig, args) -> int:
    state = cs.spawn(_spawn_config(cfg), cfg.seed)
    depth = cs.render_depth(state)
    ev.export_heatmap(depth.values, args.out)
    print(f"wrote {args.out}")
    return 0


# -- parser ----------------------------------------------------------------------


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad usage; the contract reserves 2 for
    # runtime failures, so route usage problems through our own error path
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


_D = RunConfig()


def _add_common(p, *keys):
    p.add_argument("--config", metavar="FILE", help="key = value settings file")
    flags = {
        "seed": ("--seed", int, f"root RNG seed (default: {_D.seed})"),
        "workers": ("--workers", int,
                    f"worker processes, 0 = all cores (default: {_D.workers})"),
        "demos_per_cell": ("--demos-per-cell", int,
                           f"demos per task x direction cell (default: {_D.demos_per_cell})"),
        "episodes_per_cell": ("--episodes-per-cell", int,
                              f"eval episodes per cell (default: {_D.episodes_per_cell})"),
        "lr": ("--lr", float, f"Adam learning rate (default: {_D.lr})"),
        "batch": ("--batch", int, f"minibatch size (default: {_D.batch})"),
        "eval_every": ("--eval-every", int,
                       f"epochs between progress logs (default: {_D.eval_every})"),
        "t_max": ("--t-max", int, f"episode step budget (default: {_D.t_max})"),
    }
    for key in keys:
        flag, kind, help_text = flags[key]
        p.add_argument(flag, dest=key, type=kind, help=help_text)


def _add_epochs(p, key):
    p.add_argument("--epochs", dest=key, type=int,
                   help=f"training epochs (default: {getattr(_D, key)})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="langfold",
                     description="Language-conditioned cloth folding pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND",
                               parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a demonstration dataset")
    p.add_argument("--out", required=True, metavar="FILE", help="output dataset path")
    _add_common(p, "seed", "workers", "demos_per_cell")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-edges", help="stage 1: fit the mesh-edge model")
    p.add_argument("--data", required=True, metavar="FILE", help="dataset path")
    p.add_argument("--out", required=True, metavar="FILE", help="checkpoint path")
    _add_common(p, "seed", "lr", "batch", "eval_every")
    _add_epochs(p, "epochs_edges")
    p.set_defaults(func=cmd_train_edges)

    p = sub.add_parser("train-policy", help="stage 2: fit pick and place heads")
    p.add_argument("--data", required=True, metavar="FILE", help="dataset path")
    p.add_argument("--edges", required=True, metavar="FILE", help="stage-1 checkpoint")
    p.add_argument("--out", required=True, metavar="FILE", help="checkpoint path")
    _add_common(p, "seed", "lr", "batch", "eval_every")
    _add_epochs(p, "epochs_policy")
    p.set_defaults(func=cmd_train_policy)

    p = sub.add_parser("train-success", help="stage 3: fit the success classifier")
    p.add_argument("--data", required=True, metavar="FILE", help="dataset path")
    p.add_argument("--policy", required=True, metavar="FILE", help="stage-2 checkpoint")
    p.add_argument("--out", required=True, metavar="FILE", help="checkpoint path")
    _add_common(p, "seed", "lr", "batch", "eval_every")
    _add_epochs(p, "epochs_success")
    p.set_defaults(func=cmd_train_success)

    p = sub.add_parser("eval", help="run the 9-cell evaluation suite")
    p.add_argument("--policy", required=True, metavar="FILE", help="stage-3 checkpoint")
    p.add_argument("--out", required=True, metavar="FILE", help="CSV report path")
    p.add_argument("--fixed-horizon", action="store_true",
                   help="ignore the success classifier and run all steps")
    _add_common(p, "seed", "workers", "episodes_per_cell", "t_max")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rollout", help="run and print one episode")
    p.add_argument("--policy", metavar="FILE", help="checkpoint with both model groups")
    p.add_argument("--oracle", action="store_true", help="use the scripted expert instead")
    p.add_argument("--task", required=True,
                   choices=[t.name.lower() for t in lang.TaskType])
    p.add_argument("--direction", required=True,
                   choices=[d.name.lower() for d in lang.Direction])
    p.add_argument("--template", type=int, default=0,
                   help=f"instruction template id 0..{lang.TEMPLATES_PER_TASK - 1}"
                        " (default: 0)")
    p.add_argument("--dump", metavar="DIR", help="write per-step heatmaps here")
    _add_common(p, "seed", "t_max")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("render", help="spawn a cloth and export its depth image")
    p.add_argument("--out", required=True, metavar="FILE", help="output PGM path")
    _add_common(p, "seed")
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _resolve_config(args)
        return args.func(cfg, args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure: bad files, checkpoints, simulation
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
