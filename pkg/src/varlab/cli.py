"""Command-line entry point.

Exit status: 0 on success, 1 on usage/config/IO errors, 2 when a scenario
check fails (for example the clip-distinction tolerance) or training aborts.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .config import ConfigError, dump_config, train_config, validate_config
from .oracle import write_oracle_report
from .policy import save_policy
from .reward import load_rewards, sample_preferences
from .space import DatasetError, derive_seed, load_dataset, save_dataset
from .trainer import TrainingError, train

logger = logging.getLogger("varlab")

COMMANDS = ("oracle", "train", "gradcheck", "demo-clip", "demo-negweight", "ablate-b", "estimator-study")

EXIT_OK, EXIT_INVALID, EXIT_CHECK_FAILED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", "-c", help="INI config file (defaults apply to omitted keys)")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--quiet", "-q", action="store_true", help="suppress the stdout summary")
    common.add_argument("--verbose", "-v", action="count", default=0)
    parser = _Parser(prog="varlab", description="Tabular lab for reward-weighted SFT objectives.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    helps = {
        "oracle": "write Z(x), pi*, J(pi*) and KL tables for the configured instance",
        "train": "train one policy with the [train] settings",
        "gradcheck": "finite-difference check of every loss gradient",
        "demo-clip": "R-LoL vs VAR on the two-response clip-flattening instance",
        "demo-negweight": "negative-weight weighted SFT divergence vs VAR",
        "ablate-b": "batch-size sweep of var-exact / var-inbatch final KL",
        "estimator-study": "Monte-Carlo quality of the in-batch partition estimate",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def _instance(cfg: dict) -> ex.InstanceSpec:
    i = cfg["instance"]
    return ex.InstanceSpec(
        n_prompts=i["n_prompts"], n_responses=i["n_responses"], ref_kind=i["ref_kind"],
        concentration=i["concentration"], reward_kind=i["reward_kind"], sigma=i["sigma"],
        gap=i["gap"], constant=i["constant"], temperature=i["temperature"],
    )


def _space_and_rewards(cfg: dict):
    root = cfg["run"]["seed"]
    space, rewards = _instance(cfg).build(root, 0)
    if cfg["instance"]["rewards_file"]:
        rewards = load_rewards(cfg["instance"]["rewards_file"])
        if rewards.shape != space.shape:
            raise ConfigError([f"instance.rewards_file: table shape {rewards.shape} != instance shape {space.shape}"])
    return space, rewards


def _report(result: ex.SweepResult, quiet: bool) -> int:
    if not quiet:
        for name, ok in result.checks.items():
            print(f"[{'PASS' if ok else 'FAIL'}] {name}")
    return EXIT_OK if result.passed else EXIT_CHECK_FAILED


def _formats(cfg: dict) -> tuple[str, ...]:
    base = ("csv", "summary", "records")
    return base + ("plots",) if cfg["experiment"]["plots"] else base


def _cmd_oracle(cfg, out: Path, quiet: bool) -> int:
    space, rewards = _space_and_rewards(cfg)
    report = write_oracle_report(out / "oracle.json", space, rewards)
    if not quiet:
        print(f"J(pi*) = {report['J_optimal']:.6f}, log Z = {report['log_partition']}")
        print(f"wrote {out / 'oracle.json'}")
    return EXIT_OK


def _cmd_train(cfg, out: Path, quiet: bool) -> int:
    root = cfg["run"]["seed"]
    space, rewards = _space_and_rewards(cfg)
    config = train_config(cfg, derive_seed(root, "train"))
    triples = None
    if config.loss_kind == "dpo":
        if cfg["instance"]["dataset"]:
            triples = load_dataset(cfg["instance"]["dataset"], space)
        else:
            triples = sample_preferences(space, rewards, cfg["instance"]["n_preferences"],
                                         derive_seed(root, "preferences"))
            save_dataset(out / "preferences.csv", triples)
    try:
        report = train(space, rewards, config, triples=triples)
    except TrainingError as e:
        e.report.write(out / "run.records")
        print(f"varlab train: {e}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    save_policy(out / "policy.json", report.policy)
    report.checkpoint = "policy.json"
    report.write(out / "run.records")
    if not quiet:
        f = report.final
        print(f"{config.loss_kind}: step {f['step']} loss {f['loss']:.6g} "
              f"KL(pi*||pi) {f['kl_forward']:.3e} J gap {f['J_gap']:.3e}")
    return EXIT_OK


def _cmd_gradcheck(cfg, out: Path, quiet: bool) -> int:
    g = cfg["gradcheck"]
    inst = dataclasses.replace(_instance(cfg), n_prompts=g["n_prompts"], n_responses=g["n_responses"])
    result = ex.run_gradcheck(inst, range(g["seeds"]), cfg["run"]["seed"], g["batch_size"], g["step"], g["tolerance"])
    ex.emit_outputs(result, out.parent, ("csv", "summary"))
    return _report(result, quiet)


def _cmd_demo_clip(cfg, out: Path, quiet: bool) -> int:
    c = cfg["clip"]
    result = ex.run_clip_distinction(c["rewards"], c["temperature"], c["epsilon"], c["beta"],
                                     c["lr"], c["steps"], c["tol"])
    ex.emit_outputs(result, out.parent, _formats(cfg))
    if not quiet:
        for row in result.rows:
            print(f"{row['method']:10s} target p1 {row['target_p1']:.6f} achieved {row['achieved_p1']:.6f} "
                  f"|err| {row['abs_error']:.2e}")
    return _report(result, quiet)


def _cmd_demo_negweight(cfg, out: Path, quiet: bool) -> int:
    n = cfg["negweight"]
    result = ex.run_negative_weight_demo(n["n_responses"], n["lr"], n["steps"])
    ex.emit_outputs(result, out.parent, _formats(cfg))
    return _report(result, quiet)


def _scenario(cfg, name: str, instance: ex.InstanceSpec, seeds: int) -> ex.Scenario:
    e = cfg["experiment"]
    return ex.Scenario(
        name=name, instance=instance, seeds=tuple(range(seeds)), root_seed=cfg["run"]["seed"],
        train=train_config(cfg, 0), batch_sizes=tuple(e["batch_sizes"]),
        sampling_modes=tuple(e["sampling_modes"]), workers=e["workers"],
    )


def _cmd_ablate_b(cfg, out: Path, quiet: bool) -> int:
    spec = _scenario(cfg, "ablate-b", _instance(cfg), cfg["experiment"]["seeds"])
    result = ex.run_consistency(spec)
    ex.emit_outputs(result, out.parent, _formats(cfg))
    return _report(result, quiet)


def _cmd_estimator_study(cfg, out: Path, quiet: bool) -> int:
    e = cfg["estimator"]
    inst = dataclasses.replace(_instance(cfg), n_prompts=e["n_prompts"], n_responses=e["n_responses"])
    spec = _scenario(cfg, "estimator-study", inst, e["seeds"])
    result = ex.run_estimator_study(spec, e["n_instances"])
    ex.emit_outputs(result, out.parent, _formats(cfg))
    if not quiet:
        for a in result.aggregates:
            print(f"{a['sampling']:9s} B={a['B']:<3d} mean Z_hat/Z {a['mean_ratio']:.4f} RMSE {a['rmse']:.4f}")
    return _report(result, quiet)


HANDLERS = {
    "oracle": _cmd_oracle,
    "train": _cmd_train,
    "gradcheck": _cmd_gradcheck,
    "demo-clip": _cmd_demo_clip,
    "demo-negweight": _cmd_demo_negweight,
    "ablate-b": _cmd_ablate_b,
    "estimator-study": _cmd_estimator_study,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = validate_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError(["--seed: must be >= 0"])
            cfg["run"]["seed"] = args.seed
    except ConfigError as e:
        print("varlab: invalid config:", file=sys.stderr)
        for err in e.errors:
            print(f"  {err}", file=sys.stderr)
        return EXIT_INVALID

    out = Path(args.out) / args.command
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    except OSError as e:
        print(f"varlab: cannot write output directory {out}: {e.strerror}", file=sys.stderr)
        return EXIT_INVALID

    try:
        return HANDLERS[args.command](cfg, out, args.quiet)
    except (ConfigError, DatasetError) as e:
        print(f"varlab: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"varlab: cannot write output: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
