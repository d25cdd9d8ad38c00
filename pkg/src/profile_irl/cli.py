"""Command-line driver: ``profile-irl {gen-demos,fit,eval,sweep}``.

All artifacts live in one run directory::

    env.json  config.json  demos.jsonl  heldout.jsonl  profile.json
    supervision.json  checkpoints/  model.json  log.csv  report.json
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import eval as ev
from .distributions import OptimalityProfile, augment
from .mdp import ENVIRONMENTS, ConvergenceError, GridworldSpec, build_gridworld, read_jsonl, write_jsonl
from .ot import SinkhornConvergenceError
from .reward import RewardModel, SupervisionSets
from .trainer import TrainConfig, TrainingAborted, fit_checkpointed, load_checkpoint, resume

log = logging.getLogger("profile_irl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
ENV_SCHEMA = 1


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Run directory helpers


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)


def _read_json(path: Path):
    with open(path) as fh:
        return json.load(fh)


def _load_env(run_dir: Path):
    d = _read_json(run_dir / "env.json")
    if d.get("schema_version") != ENV_SCHEMA:
        raise ConfigError(f"unsupported env schema {d.get('schema_version')!r}")
    return build_gridworld(GridworldSpec.from_dict(d["grid"]))


def _env_spec(name: str | None, env_file: str | None) -> tuple[str, GridworldSpec]:
    if env_file:
        d = _read_json(Path(env_file))
        return d.get("name", Path(env_file).stem), GridworldSpec.from_dict(d.get("grid", d))
    if name not in ENVIRONMENTS:
        raise ConfigError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}")
    return name, ENVIRONMENTS[name]()


def _config_fields():
    return [f for f in fields(TrainConfig) if f.name != "seed"]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("training config overrides")
    for f in _config_fields():
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            group.add_argument(flag, dest="cfg_" + f.name, type=_parse_bool, default=None,
                               metavar="{true,false}")
        else:
            kind = {"int": int, "float": float, "str": str}.get(str(f.type), str)
            group.add_argument(flag, dest="cfg_" + f.name, type=kind, default=None)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _resolve_config(args, run_dir: Path) -> TrainConfig:
    """run-dir config.json, then --config file, then flags; later wins."""
    d: dict = {}
    if (run_dir / "config.json").exists():
        d.update(_read_json(run_dir / "config.json"))
    if args.config:
        d.update(_read_json(Path(args.config)))
    for f in _config_fields():
        v = getattr(args, "cfg_" + f.name, None)
        if v is not None:
            d[f.name] = v
    if args.seed is not None:
        d["seed"] = args.seed
    return TrainConfig.from_dict(d)


def _save_config(config: TrainConfig, path: Path) -> None:
    _write_json(path, {"schema_version": 1, **config.to_dict()})


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_demos(args) -> int:
    run_dir = Path(args.run_dir)
    if args.n < 1:
        raise ConfigError("empty dataset: --n must be positive")
    seed = args.seed if args.seed is not None else 0
    name, spec = _env_spec(args.env, args.env_file)
    mdp = build_gridworld(spec)
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "env.json", {"schema_version": ENV_SCHEMA, "name": name, "grid": spec.to_dict()})
    demos = ev.sample_pool(mdp, args.n, np.random.default_rng([seed, 0]))
    write_jsonl(demos, run_dir / "demos.jsonl")
    if args.held_out > 0:
        held = ev.sample_pool(mdp, args.held_out, np.random.default_rng([seed, 1]))
        write_jsonl(held, run_dir / "heldout.jsonl")
    if args.profile:
        aug = augment(demos)
        ev.gt_profile(aug, mdp.gt_reward, args.gamma, args.bins).save(run_dir / "profile.json")
        sup = ev.sample_supervision(aug, mdp.gt_reward, args.gamma, args.pairs, args.fixed,
                                    np.random.default_rng([seed, 2]))
        _write_json(run_dir / "supervision.json", sup.to_dict())
    config = _resolve_config(args, run_dir)
    _save_config(replace(config, gamma=args.gamma, seed=seed), run_dir / "config.json")
    print(f"wrote {len(demos)} demonstrations to {run_dir}")
    return EXIT_OK


def _effective_weights_ok(config: TrainConfig, sup: SupervisionSets) -> bool:
    return (config.c_ot > 0 or (config.c_pw > 0 and sup.pairs)
            or (config.c_fix > 0 and sup.fixed))


def cmd_fit(args) -> int:
    run_dir = Path(args.run_dir)
    config = _resolve_config(args, run_dir)
    mdp = _load_env(run_dir)
    demos = read_jsonl(run_dir / "demos.jsonl")
    target = OptimalityProfile.load(run_dir / "profile.json")
    sup_path = Path(args.supervision) if args.supervision else run_dir / "supervision.json"
    sup = SupervisionSets.from_dict(_read_json(sup_path)) if sup_path.exists() else SupervisionSets()
    if not _effective_weights_ok(config, sup):
        raise ConfigError("no active loss term: c_ot is 0 and there is no usable supervision")
    _save_config(config, run_dir / "config.json")
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        model, run_log = resume(ckpt, config, demos, target, sup, run_dir)
    else:
        if args.model == "tabular" or mdp.features is None:
            model = RewardModel.tabular(mdp.n_states)
        else:
            model = RewardModel.mlp(mdp.features, args.hidden, seed=config.seed)
        model, run_log, _ = fit_checkpointed(demos, target, sup, model, config, run_dir)
    model.save(run_dir / "model.json")
    run_log.to_csv(run_dir / "log.csv")
    print(f"trained {len(run_log)} epochs; model written to {run_dir / 'model.json'}")
    return EXIT_OK


def _setting(run_dir: Path, mdp, n_episodes: int) -> ev.Setting:
    demos = read_jsonl(run_dir / "demos.jsonl")
    held_path = run_dir / "heldout.jsonl"
    held = read_jsonl(held_path) if held_path.exists() else demos
    return ev.Setting(mdp, tuple(demos), tuple(held), n_episodes=n_episodes)


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _run_sweeps(args, run_dir: Path, config: TrainConfig, setting: ev.Setting) -> list[str]:
    written = []
    if getattr(args, "ablate", None):
        target = OptimalityProfile.load(run_dir / "profile.json")
        rows = ev.ablate_ot(setting, target, _ints(args.ablate), args.fixed, config,
                            args.n_seeds, args.jobs)
        ev.write_table(rows, run_dir / "ablate.csv")
        written.append("ablate.csv")
    if getattr(args, "noise", None):
        rows = ev.noise_sweep(setting, _floats(args.noise), config, args.n_seeds, args.bins,
                              args.pairs, args.fixed, args.jobs)
        ev.write_table(rows, run_dir / "noise.csv")
        written.append("noise.csv")
    if getattr(args, "gammas", None):
        rows = ev.gamma_sweep(setting, _floats(args.gammas), config, args.n_seeds, args.bins,
                              args.pairs, args.fixed, args.jobs)
        ev.write_table(rows, run_dir / "gamma.csv")
        written.append("gamma.csv")
    return written


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    config = _resolve_config(args, run_dir)
    mdp = _load_env(run_dir)
    setting = _setting(run_dir, mdp, args.n_episodes)
    sweeps = args.ablate or args.noise or args.gammas
    everything = not (args.correlate or args.reoptimize or sweeps)
    report = ev.EvalReport()
    if args.correlate or args.reoptimize or everything:
        model_path = Path(args.model) if args.model else run_dir / "model.json"
        if not model_path.exists():
            raise FileNotFoundError(f"missing model: {model_path}")
        model = RewardModel.load(model_path)
        if args.correlate or everything:
            report = report.merge(ev.correlate(model, list(setting.held_out), mdp.gt_reward,
                                               args.eval_gamma if args.eval_gamma is not None
                                               else config.gamma))
            report.table_to_csv(run_dir / "correlation.csv")
        if args.reoptimize or everything:
            seed = args.seed if args.seed is not None else config.seed
            _, score = ev.reoptimize_and_score(mdp, model, args.gamma_policy, args.n_episodes, seed)
            report.gt_return_of_reoptimized_policy = score
            report.gt_return_of_best_demo = ev.best_demo_return(setting.dataset, mdp.gt_reward)
    report.save(run_dir / "report.json")
    written = _run_sweeps(args, run_dir, config, setting)
    summary = {k: v for k, v in report.to_dict().items() if k != "table"}
    print(json.dumps(summary))
    for name in written:
        print(f"wrote {run_dir / name}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    run_dir = Path(args.run_dir)
    config = _resolve_config(args, run_dir)
    mdp = _load_env(run_dir)
    setting = _setting(run_dir, mdp, args.n_episodes)
    if args.kind == "ablate":
        args.ablate = args.values or "20"
    elif args.kind == "noise":
        args.noise = args.values or ",".join(map(str, ev.DEFAULT_SIGMAS))
    else:
        args.gammas = args.values or ",".join(map(str, ev.DEFAULT_GAMMAS))
    for name in _run_sweeps(args, run_dir, config, setting):
        print(f"wrote {run_dir / name}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _add_sweep_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-seeds", type=int, default=10)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--fixed", type=int, default=4)
    p.add_argument("--bins", type=int, default=30)
    p.add_argument("--n-episodes", type=int, default=100)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="profile-irl", description=__doc__.splitlines()[0])
    parser.add_argument("--run-dir", default="run", help="run directory (default: ./run)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--config", default=None, help="JSON file with TrainConfig keys")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-demos", help="sample demonstrations (and optionally the GT profile)")
    g.add_argument("--env", default="grid10", help=f"one of {sorted(ENVIRONMENTS)}")
    g.add_argument("--env-file", default=None, help="gridworld spec JSON instead of --env")
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--held-out", type=int, default=200)
    g.add_argument("--profile", action="store_true", help="also write profile.json and supervision.json")
    g.add_argument("--gamma", type=float, default=0.9)
    g.add_argument("--bins", type=int, default=30)
    g.add_argument("--pairs", type=int, default=20)
    g.add_argument("--fixed", type=int, default=4)
    g.set_defaults(func=cmd_gen_demos)

    f = sub.add_parser("fit", help="train a reward model")
    f.add_argument("--model", choices=("mlp", "tabular"), default="mlp")
    f.add_argument("--hidden", type=int, default=16)
    f.add_argument("--supervision", default=None, help="supervision JSON (default: run dir)")
    f.add_argument("--resume", default=None, help="checkpoint to continue from")
    _add_config_flags(f)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="evaluate a trained model and run sweeps")
    e.add_argument("--model", default=None, help="model JSON (default: run dir)")
    e.add_argument("--correlate", action="store_true")
    e.add_argument("--reoptimize", action="store_true")
    e.add_argument("--ablate", default=None, metavar="BUDGETS", help="comma-separated pair budgets")
    e.add_argument("--noise", default=None, metavar="SIGMAS", help="comma-separated noise levels")
    e.add_argument("--gammas", default=None, metavar="GAMMAS", help="comma-separated discounts")
    e.add_argument("--eval-gamma", type=float, default=None)
    e.add_argument("--gamma-policy", type=float, default=ev.GAMMA_POLICY)
    _add_sweep_flags(e)
    _add_config_flags(e)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="run one sweep over n seeds")
    s.add_argument("kind", choices=("ablate", "noise", "gamma"))
    s.add_argument("--values", default=None, help="comma-separated sweep values")
    _add_sweep_flags(s)
    _add_config_flags(s)
    s.set_defaults(func=cmd_sweep, ablate=None, noise=None, gammas=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TrainingAborted, SinkhornConvergenceError, ConvergenceError, FloatingPointError) as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
