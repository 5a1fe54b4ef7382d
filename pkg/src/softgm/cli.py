"""Command-line entry point: ``softgm train|eval|ablate|dump-attention|validate-config``.

Progress goes to standard error; results are written to files and their paths
printed on standard output.  Exit status is 0 on success, 2 for usage or
configuration errors and 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from softgm import __version__
from softgm.config import RunConfig, load_config
from softgm.errors import ConfigError, SoftGMError
from softgm.evaluation import dump_attention, evaluate, load_policy, policy_actor, run_ablation
from softgm.trainer import train

log = logging.getLogger("softgm")

DEFAULT_CONFIG = Path(__file__).with_name("configs") / "default.ini"


class UsageError(SoftGMError):
    pass


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="softgm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--seed", type=int, default=None, help="overrides [run] seed")
    p.add_argument("--output", type=Path, default=None, help="run directory (default derived from config)")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--scenario", default=None, help="basic, structured or wall (default: training scenario)")
    p.add_argument("--episodes", type=_positive_int, default=None)
    p.add_argument("--perturb", choices=("none", "noise", "fail", "disturb"), default="none")
    p.add_argument("--config", type=Path, default=None,
                   help="run config; defaults to the one stored next to the checkpoint")
    p.add_argument("--seed", type=int, default=None, help="first episode seed")
    p.add_argument("--output", type=Path, default=None, help="report path prefix")

    p = sub.add_parser("ablate", help="train and evaluate one attention ablation")
    p.add_argument("--variant", required=True, choices=("full", "no-stage1", "no-stage2"))
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--episodes", type=_positive_int, default=None)
    p.add_argument("--output", type=Path, default=None)

    p = sub.add_parser("dump-attention", help="write per-step attention matrices for one episode")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--scenario", default=None)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--output", type=Path, default=None)

    p = sub.add_parser("validate-config", help="parse a config and print its hash")
    p.add_argument("path", type=Path)
    return parser


def _run_dir(cfg: RunConfig, override: Path | None) -> Path:
    if override is not None:
        return override
    return Path(cfg.run.output_dir) / f"{cfg.run.scenario}-{cfg.run.variant}-seed{cfg.run.seed}-{cfg.hash[:8]}"


def _write_run_files(run_dir: Path, cfg: RunConfig, argv):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(cfg.to_ini())
    (run_dir / "config.sha256").write_text(cfg.hash + "\n")
    manifest = {
        "package": "softgm",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "command": list(argv),
        "config_hash": cfg.hash,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _periodic_eval(cfg: RunConfig):
    make_env = cfg.env_factory()

    def fn(policy):
        return evaluate(policy_actor(policy), make_env, cfg.train.eval_episodes, seed=cfg.eval.seed).success_rate
    return fn


def _config_for_checkpoint(ckpt: Path, explicit: Path | None) -> RunConfig:
    if explicit is not None:
        return load_config(explicit)
    for candidate in (ckpt.parent.parent / "config.ini", ckpt.parent / "config.ini", ckpt / "config.ini"):
        if candidate.is_file():
            return load_config(candidate)
    raise UsageError(f"no config.ini found near checkpoint {ckpt}; pass --config")


def cmd_train(args, argv) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides("run", seed=args.seed)
    run_dir = _run_dir(cfg, args.output)
    _write_run_files(run_dir, cfg, argv)
    log.info("training %s (%s) into %s", cfg.run.scenario, cfg.run.variant, run_dir)
    train(cfg.train, cfg.env_factory(), cfg.gat, run_dir, cfg.hash, _periodic_eval(cfg))
    print(run_dir)
    return 0


def cmd_eval(args, argv) -> int:
    cfg = _config_for_checkpoint(args.ckpt, args.config)
    policy = load_policy(args.ckpt, expected_hash=cfg.hash)
    scenario = args.scenario or cfg.run.scenario
    episodes = args.episodes or cfg.eval.episodes
    seed = cfg.eval.seed if args.seed is None else args.seed
    perturbation = cfg.perturbation(args.perturb)
    log.info("evaluating %s on %s for %d episodes (%s)", args.ckpt, scenario, episodes, args.perturb)
    report = evaluate(policy_actor(policy), cfg.env_factory(scenario), episodes, perturbation, seed,
                      scenario=scenario, config_hash=cfg.hash, variant=policy.cfg.variant_name)
    prefix = args.output or (args.ckpt / f"eval-{scenario}-{args.perturb}-seed{seed}")
    prefix.parent.mkdir(parents=True, exist_ok=True)
    json_path = prefix.with_name(prefix.name + ".json")
    report.write(json_path, prefix.with_name(prefix.name + ".csv"))
    log.info("SR %.3f  T %.1f  travel %.3f m  torque %.3f", report.success_rate, report.mean_episode_length,
             report.mean_tip_travel, report.mean_torque_magnitude)
    print(json_path)
    return 0


def cmd_ablate(args, argv) -> int:
    cfg = load_config(args.config)
    cfg = cfg.with_overrides("run", variant=args.variant,
                             **({"seed": args.seed} if args.seed is not None else {}))
    run_dir = _run_dir(cfg, args.output)
    _write_run_files(run_dir, cfg, argv)
    episodes = args.episodes or cfg.eval.episodes
    gat_kwargs = {k: v for k, v in cfg.gat.__dict__.items() if k not in ("use_stage1", "use_stage2")}
    _, report = run_ablation(args.variant, cfg.env_factory(), cfg.train, run_dir, episodes,
                             cfg.eval.seed, cfg.hash, gat_kwargs)
    log.info("%s: SR %.3f", args.variant, report.success_rate)
    print(run_dir)
    return 0


def cmd_dump_attention(args, argv) -> int:
    cfg = _config_for_checkpoint(args.ckpt, args.config)
    policy = load_policy(args.ckpt, expected_hash=cfg.hash)
    scenario = args.scenario or cfg.run.scenario
    out = args.output or (args.ckpt / f"attention-{scenario}-seed{args.seed}.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    n = dump_attention(policy, cfg.make_env(args.seed, scenario), args.seed, out, cfg.hash)
    log.info("wrote %d attention matrices", n)
    print(out)
    return 0


def cmd_validate(args, argv) -> int:
    cfg = load_config(args.path)
    print(cfg.hash)
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "dump-attention": cmd_dump_attention,
    "validate-config": cmd_validate,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, argv)
    except (ConfigError, UsageError) as exc:
        print(f"softgm {args.command}: {exc}", file=sys.stderr)
        return 2
    except (SoftGMError, OSError) as exc:
        print(f"softgm {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
