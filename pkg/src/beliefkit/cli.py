"""Command-line entry point.

Exit codes: 0 success, 1 operational error, 2 validation or bound failure,
64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_ERROR, EXIT_FAILED, EXIT_USAGE = 0, 1, 2, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [run], [latent], [belief], [agent], [bounds]")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config entry (repeatable)")
    common.add_argument("--seed", type=int, help="base seed")
    common.add_argument("--out", help="output directory (report file for verify-bounds)")
    common.add_argument("--workers", type=int, help="processes for sweeps")

    env = argparse.ArgumentParser(add_help=False)
    env.add_argument("--env", help="built-in name (tiger, repeat-previous:A,K,D) or model file")

    p = _Parser(prog="beliefkit", description="Exact beliefs, latent models and bound checks.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("validate", parents=[common, env], help="check a model's invariants")

    s = sub.add_parser("filter", parents=[common, env], help="exact belief after a history")
    s.add_argument("--history", default="", help='"a0 o1 a1 o2 ..."')

    s = sub.add_parser("value", parents=[common, env], help="truncated value of a history")
    s.add_argument("--history", default="")
    s.add_argument("--horizon", type=int, default=10)
    s.add_argument("--policy", choices=("uniform", "optimal"), default="optimal")
    s.add_argument("--episodic", action="store_true", help="stop at the end of the episode")
    s.add_argument("--discount", type=float, help="replace the model's discount")

    sub.add_parser("refine", parents=[common, env], help="write the observation-refined model")

    s = sub.add_parser("fit", parents=[common, env], help="fit a tabular latent model")
    s.add_argument("--mode", choices=("exact", "counts"), default="counts")
    s.add_argument("--episodes", type=int, default=1000)
    s.add_argument("--smoothing", type=float, default=1.0)

    s = sub.add_parser("train", parents=[common, env], help="round-robin training")
    s.add_argument("--steps", type=int, help="environment steps (agent) or updates (belief only)")
    s.add_argument("--belief-only", action="store_true",
                   help="train only the belief encoder against the exact latent model")

    s = sub.add_parser("verify-bounds", parents=[common, env], help="Theorem sweeps on one env")
    _bound_flags(s)

    s = sub.add_parser("sweep", parents=[common], help="bound sweep over several envs and seeds")
    s.add_argument("--env", action="append", dest="envs", help="repeatable")
    s.add_argument("--seeds", type=_ints, help="comma-separated seeds")
    _bound_flags(s)
    return p


def _bound_flags(s):
    s.add_argument("--eps-sweep", type=_floats, help="perturbation sizes, e.g. 0,0.1,0.2")
    s.add_argument("--pair-eps", type=_floats, help="eps values for history-pair checks")
    s.add_argument("--pairs", type=int, help="history pairs per eps (0 to skip)")
    s.add_argument("--horizon", type=int)
    s.add_argument("--checkpoints", help="encoders: untrained,mid,trained,exact")
    s.add_argument("--train-steps", type=int)


# -- helpers ----------------------------------------------------------------

def resolve_config(args):
    from .config import RunConfig, load_config

    cfg = load_config(args.config) if args.config else RunConfig()
    for item in args.set:
        cfg.override(item)
    for key in ("seed", "out", "workers"):
        if getattr(args, key, None) is not None:
            setattr(cfg, key, getattr(args, key))
    if getattr(args, "env", None):
        cfg.env = args.env
    return cfg


def load_env(spec):
    from .envs import make_env
    from .pomdp import load

    if not spec:
        raise UsageError("no environment given (--env or [run] env)")
    if Path(spec).is_file():
        return load(spec)
    try:
        return make_env(spec)
    except KeyError:
        raise UsageError(f"{spec!r} is neither a built-in environment nor a file") from None


def write_manifest(directory, command: str, cfg, extra: dict, outputs) -> None:
    manifest = {"command": command, "version": __version__, "seed": cfg.seed,
                "config": cfg.as_dict(), "options": extra, "outputs": sorted(outputs)}
    Path(directory, "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _out_dir(cfg, required: bool = False) -> Path | None:
    if cfg.out is None:
        if required:
            raise UsageError("--out is required")
        return None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt_vector(v) -> str:
    return " ".join(repr(float(x)) for x in v)


# -- commands ---------------------------------------------------------------

def cmd_validate(args, cfg) -> int:
    from .pomdp import StructuralError, validate

    try:
        report = validate(load_env(cfg.env))
    except (StructuralError, ValueError) as e:
        print(f"structural error: {e}")
        return EXIT_FAILED
    print(report)
    out = _out_dir(cfg)
    if out:
        (out / "validation.txt").write_text(str(report) + "\n")
        write_manifest(out, "validate", cfg, {}, ["validation.txt"])
    return EXIT_OK if report.ok else EXIT_FAILED


def _history(text):
    from .pomdp import History

    try:
        return History.parse(text)
    except ValueError as e:
        raise UsageError(f"bad history {text!r}: {e}") from None


def cmd_filter(args, cfg) -> int:
    from .exact import ImpossibleObservation, filter_belief

    pomdp = load_env(cfg.env)
    try:
        b = filter_belief(pomdp, _history(args.history))
    except ImpossibleObservation as e:
        print(f"impossible history: {e}")
        return EXIT_FAILED
    print(_fmt_vector(b))
    out = _out_dir(cfg)
    if out:
        (out / "belief.txt").write_text(_fmt_vector(b) + "\n")
        write_manifest(out, "filter", cfg, {"history": args.history}, ["belief.txt"])
    return EXIT_OK


def cmd_value(args, cfg) -> int:
    from dataclasses import replace

    from .exact import ImpossibleObservation, UniformPolicy, history_value
    from .planning import FiniteHorizonOptimal, solve

    pomdp = load_env(cfg.env)
    if args.discount is not None:
        pomdp = replace(pomdp, gamma=args.discount)
    if args.policy == "uniform":
        ctrl = UniformPolicy(pomdp.n_actions)
    else:
        ctrl = FiniteHorizonOptimal(solve(pomdp, args.horizon, episodic=args.episodic))
    try:
        v, tail = history_value(pomdp, _history(args.history), ctrl, args.horizon, args.episodic)
    except ImpossibleObservation as e:
        print(f"impossible history: {e}")
        return EXIT_FAILED
    print(f"value {v!r} tail_bound {tail!r}")
    out = _out_dir(cfg)
    if out:
        (out / "value.txt").write_text(f"{v!r} {tail!r}\n")
        write_manifest(out, "value", cfg, {"history": args.history, "horizon": args.horizon,
                                           "policy": args.policy, "episodic": args.episodic,
                                           "discount": args.discount}, ["value.txt"])
    return EXIT_OK


def cmd_refine(args, cfg) -> int:
    from .latent import STAR, refine
    from .pomdp import save

    refined = refine(load_env(cfg.env))
    out = _out_dir(cfg, required=True)
    save(refined.pomdp, out / "refined.pomdp")
    with open(out / "index.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["refined_id", "state", "observation"])
        for i, (s, o) in enumerate(refined.pairs):
            w.writerow([i, s, "*" if o == STAR else o])
    write_manifest(out, "refine", cfg, {}, ["refined.pomdp", "index.csv"])
    print(f"{refined.n_states} refined states")
    return EXIT_OK


def sample_counts(pomdp, refined, episodes: int, seed: int):
    """Transition counts from ``episodes`` uniform-policy episodes."""
    from .latent import STAR, TransitionCounts
    from .pomdp import run_episode

    counts = TransitionCounts.empty(refined)
    rng = np.random.default_rng(seed)
    uniform = np.full(pomdp.n_actions, 1.0 / pomdp.n_actions)
    for _ in range(episodes):
        traj, h = run_episode(pomdp, lambda _h: uniform, rng)
        obs = (STAR,) + h.observations
        for t, a in enumerate(traj.actions):
            z = refined.index[(traj.states[t], obs[t])]
            z2 = refined.index[(traj.states[t + 1], obs[t + 1])]
            counts.add(z, a, z2, obs[t + 1], traj.rewards[t])
    return counts


def cmd_fit(args, cfg) -> int:
    from .latent import fit_counts, fit_exact, refine, save_latent

    pomdp = load_env(cfg.env)
    refined = refine(pomdp)
    if args.mode == "exact":
        m = fit_exact(refined)
    else:
        if args.episodes < 1:
            raise UsageError("--episodes must be positive")
        m = fit_counts(refined, sample_counts(pomdp, refined, args.episodes, cfg.seed),
                       smoothing=args.smoothing)
    out = _out_dir(cfg, required=True)
    save_latent(m, out / "latent.pomdp")
    write_manifest(out, "fit", cfg, {"mode": args.mode, "episodes": args.episodes,
                                     "smoothing": args.smoothing}, ["latent.pomdp"])
    print(f"latent model with {m.n_latent} states")
    return EXIT_OK


def _options(kind, opts):
    try:
        return kind.from_dict(opts)
    except (KeyError, ValueError, TypeError) as e:
        raise UsageError(f"bad option: {e}") from None


def cmd_train(args, cfg) -> int:
    from . import autodiff as ad
    from .agent import TrainConfig, build_agent, train, write_metrics
    from .encoder import BeliefConfig, BeliefEncoder, train_belief, write_curve
    from .exact import UniformPolicy
    from .latent import fit_exact, refine

    pomdp = load_env(cfg.env)
    out = _out_dir(cfg, required=True)
    if args.belief_only:
        opts = {**cfg.section("belief"), "seed": cfg.seed}
        if args.steps is not None:
            opts["steps"] = args.steps
        bcfg = _options(BeliefConfig, opts)
        refined = refine(pomdp)
        m = fit_exact(refined)
        enc = BeliefEncoder.for_model(m, seed=cfg.seed)
        enc, curve = train_belief(enc, m, pomdp, UniformPolicy(pomdp.n_actions), bcfg, refined,
                                  checkpoint=out / "encoder.bin")
        write_curve(curve, out / "belief_curve.csv")
        ad.save_params(enc.params, out / "encoder.bin")
        write_manifest(out, "train", cfg, {"belief_only": True, "steps": bcfg.steps},
                       ["belief_curve.csv", "encoder.bin", "encoder.bin.json"])
        final = curve[-1].belief_wasserstein if curve else float("nan")
        print(f"final belief loss {final!r}")
        return EXIT_OK
    opts = {**cfg.section("agent"), "seed": cfg.seed}
    if args.steps is not None:
        opts["total_steps"] = args.steps
    tcfg = _options(TrainConfig, opts)
    refined, m, enc, ac = build_agent(pomdp, seed=tcfg.seed)
    result = train(pomdp, m, enc, ac, tcfg, refined, checkpoint_dir=out / "checkpoint")
    write_metrics(result.metrics, out / "metrics.csv")
    write_manifest(out, "train", cfg, {"belief_only": False, "total_steps": tcfg.total_steps},
                   ["metrics.csv", "checkpoint"])
    last = result.metrics[-1].eval_return if result.metrics else float("nan")
    print(f"{result.env_steps} env steps, final eval return {last!r}")
    return EXIT_OK


def _bound_options(args, cfg) -> dict:
    sec = cfg.section("bounds")

    def pick(name, flag, parse, default):
        value = getattr(args, flag)
        if value is not None:
            return value
        if name in sec:
            return parse(sec[name])
        return default

    checkpoints = pick("checkpoints", "checkpoints", str, "untrained,mid,trained")
    names = tuple(x.strip() for x in checkpoints.split(",") if x.strip())
    bad = set(names) - {"untrained", "mid", "trained", "exact"}
    if bad or not names:
        raise UsageError(f"unknown encoder checkpoints {sorted(bad)}")
    return {"eps": pick("eps_sweep", "eps_sweep", _floats, [0.0, 0.05, 0.1, 0.2, 0.4]),
            "pair_eps": pick("pair_eps", "pair_eps", _floats, [0.0, 0.1, 0.2]),
            "pairs": pick("pairs", "pairs", int, 100),
            "horizon": pick("horizon", "horizon", int, 5),
            "checkpoints": names,
            "train_steps": pick("train_steps", "train_steps", int, 2000)}


def _run_sweep(command, envs, seeds, args, cfg, report: Path, pairs_path: Path) -> int:
    from .bounds import THEOREM1_FIELDS, THEOREM2_FIELDS, bound_sweep, write_rows

    o = _bound_options(args, cfg)
    if any(not 0.0 <= e <= 1.0 for e in o["eps"] + o["pair_eps"]):
        raise UsageError("eps values must lie in [0, 1]")
    for env in envs:
        load_env(env)
    t1, t2 = bound_sweep(envs, o["eps"], seeds, o["horizon"], o["checkpoints"], o["train_steps"],
                         o["pair_eps"], o["pairs"], workers=max(cfg.workers, 1))
    report.parent.mkdir(parents=True, exist_ok=True)
    write_rows(t1, report, THEOREM1_FIELDS)
    outputs = [report.name]
    if o["pairs"] > 0 and o["pair_eps"]:
        write_rows(t2, pairs_path, THEOREM2_FIELDS)
        outputs.append(pairs_path.name)
    write_manifest(report.parent, command, cfg,
                   {**o, "checkpoints": list(o["checkpoints"]), "envs": list(envs),
                    "seeds": list(seeds)}, outputs)
    fails1 = sum(not r["holds"] for r in t1)
    fails2 = sum(not r["holds"] for r in t2)
    print(f"theorem 1: {len(t1) - fails1}/{len(t1)} hold; theorem 2: {len(t2) - fails2}/{len(t2)} hold")
    return EXIT_FAILED if fails1 or fails2 else EXIT_OK


def cmd_verify_bounds(args, cfg) -> int:
    if not cfg.env:
        raise UsageError("no environment given (--env or [run] env)")
    report = Path(cfg.out or "report.csv")
    if report.suffix != ".csv":
        report = report / "report.csv"
    return _run_sweep("verify-bounds", [cfg.env], [cfg.seed], args, cfg, report,
                      report.with_name(report.stem + "_pairs.csv"))


def cmd_sweep(args, cfg) -> int:
    envs = args.envs or ([cfg.env] if cfg.env else ["tiger", "repeat-previous:2,1,4"])
    seeds = args.seeds or _ints(cfg.section("bounds").get("seeds", "0,1,2"))
    out = _out_dir(cfg, required=True)
    return _run_sweep("sweep", envs, seeds, args, cfg, out / "theorem1.csv", out / "theorem2.csv")


COMMANDS = {"validate": cmd_validate, "filter": cmd_filter, "value": cmd_value,
            "refine": cmd_refine, "fit": cmd_fit, "train": cmd_train,
            "verify-bounds": cmd_verify_bounds, "sweep": cmd_sweep}


def main(argv=None) -> int:
    from .config import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - every other failure is operational
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
