"""Command-line interface: ``loramerge {merge,spectrum,robustness,synth}``.

Exit codes: 0 success, 2 validation or usage error, 3 container format error,
4 numeric failure.  Output files are written only after the whole command has
succeeded.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .adapter_io import AdapterSet, adapter_tensors, load_adapter, serialize_safetensors
from .analysis import robustness_report, spectrum_report
from .errors import LoraMergeError, ValidationError
from .linalg import BACKEND
from .merge import DEAD_ROW_POLICIES, METHODS, MergeConfig, merge, merge_threads, prune_and_scale
from .synth import load_config, parse_config, run_experiment

log = logging.getLogger("loramerge")


def commit_outputs(outputs: dict) -> None:
    """Write every payload to a temp file, then rename them all into place."""
    staged = []
    try:
        for path, payload in outputs.items():
            path = Path(path)
            tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
            tmp.write_bytes(payload if isinstance(payload, bytes) else payload.encode("utf-8"))
            staged.append((tmp, path))
        for tmp, path in staged:
            os.replace(tmp, path)
    finally:
        for tmp, _ in staged:
            tmp.unlink(missing_ok=True)


def _announce(command: str, resolved: dict) -> None:
    resolved = {"command": command, "backend": BACKEND, **resolved}
    print("resolved config: " + json.dumps(resolved, sort_keys=True), file=sys.stderr)


def _load_all(paths) -> list[AdapterSet]:
    out = []
    for p in paths:
        if not Path(p).is_file():
            raise ValidationError(f"{p}: no such file")
        out.append(load_adapter(p))
    return out


def _prob(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not (0.0 <= value < 1.0):
        raise argparse.ArgumentTypeError(f"must lie in [0, 1), got {value}")
    return value


def cmd_merge(args) -> int:
    cfg = MergeConfig(
        method=args.method,
        prune_rate=args.prune_rate,
        lam=args.lam,
        drop_prob=args.drop_prob,
        seed=args.seed,
        dead_row_policy=args.dead_row_policy,
        strict=args.strict,
    )
    _announce("merge", {**cfg.to_dict(), "inputs": args.paths, "out": args.out,
                        "report": args.report, "merge_threads": merge_threads()})
    if cfg.prune_rate is not None:
        print(f"prune rate k = {cfg.prune_rate}", file=sys.stderr)
    sets = _load_all(args.paths)
    merged, report = merge(sets, cfg)
    tensors, metadata = adapter_tensors(merged)
    outputs = {args.out: serialize_safetensors(tensors, metadata)}
    if args.report:
        outputs[args.report] = report.to_json(indent=2)
    commit_outputs(outputs)
    print(f"merged {len(sets)} adapters ({len(merged)} modules) -> {args.out}", file=sys.stderr)
    return 0


def cmd_spectrum(args) -> int:
    _announce("spectrum", {"path": args.path, "module": args.module,
                           "prune_scale": args.prune_scale, "out": args.out,
                           "dead_row_policy": args.dead_row_policy})
    adapter = load_adapter(args.path)
    if args.prune_scale is not None:
        adapter = AdapterSet.from_pairs(
            adapter.task_name,
            [prune_and_scale(p, args.prune_scale, args.dead_row_policy) for p in adapter],
            adapter.metadata,
        )
    report = spectrum_report(adapter, args.module)
    text = report.to_csv()
    if args.out:
        commit_outputs({args.out: text})
    else:
        sys.stdout.write(text)
    return 0


def cmd_robustness(args) -> int:
    tasks = [t for t in args.tasks.split(",") if t]
    if not tasks:
        raise ValidationError("--tasks needs at least one adapter path")
    json_path = args.json or str(Path(args.out).with_suffix(".json"))
    _announce("robustness", {"tasks": tasks, "merged": args.merged, "module": args.module,
                             "out": args.out, "json": json_path})
    task_sets = _load_all(tasks)
    merged = _load_all([args.merged])[0]
    report = robustness_report(task_sets, merged, args.module)
    commit_outputs({args.out: report.to_csv(), json_path: report.to_json(indent=2)})
    mean = report.uniform_mean()
    print("uniform mean: " + json.dumps(mean, sort_keys=True), file=sys.stderr)
    return 0


def cmd_synth(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config.seeds = [args.seed]
    if args.methods:
        config.methods = args.methods.split(",")
    config = parse_config(config.to_dict())
    _announce("synth", {**config.to_dict(), "out": args.out})
    table = run_experiment(config.scenarios, config.methods, config.seeds)
    commit_outputs({args.out: table.to_csv()})
    for fail in table.failures:
        print(f"cell failed: {fail}", file=sys.stderr)
    for scenario in config.scenarios:
        means = sorted(
            (row[4], row[2]) for row in table.means() if row[0] == scenario.name
        )
        ranking = " <= ".join(f"{m} ({v:.4g})" for v, m in means)
        print(f"{scenario.name}: mean rel_err {ranking}  [{table.seconds[scenario.name]:.1f}s]")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loramerge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("merge", help="merge task adapters into one adapter")
    p.add_argument("paths", nargs="+", help="task adapter .safetensors files")
    p.add_argument("--method", choices=METHODS, default="robust")
    p.add_argument("--prune-rate", type=_prob, default=None,
                   help="magnitude pruning rate k (robust, ties; default 0.9)")
    p.add_argument("--lambda", dest="lam", type=float, default=2.0)
    p.add_argument("--drop-prob", type=_prob, default=None, help="DARE drop probability (default 0.5)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dead-row-policy", choices=DEAD_ROW_POLICIES, default="error")
    p.add_argument("--no-strict", dest="strict", action="store_false",
                   help="merge the module intersection instead of failing on mismatched layouts")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="write the merge report JSON here")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("spectrum", help="singular values of each module's B @ A")
    p.add_argument("path")
    p.add_argument("--module", help="exact module name or name prefix")
    p.add_argument("--prune-scale", type=_prob, default=None, metavar="K",
                   help="apply prune + complementary scaling at rate K first")
    p.add_argument("--dead-row-policy", choices=DEAD_ROW_POLICIES, default="error")
    p.add_argument("--out", help="CSV path (stdout if omitted)")
    p.set_defaults(func=cmd_spectrum)

    for name in ("robustness", "analyze"):
        p = sub.add_parser(name, help="singular vector similarity and value ratios")
        p.add_argument("--tasks", required=True, help="comma-separated task adapter paths")
        p.add_argument("--merged", required=True)
        p.add_argument("--module")
        p.add_argument("--out", required=True, help="per-index CSV path")
        p.add_argument("--json", help="summary JSON path (default: --out with .json suffix)")
        p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("synth", help="run the synthetic merging benchmark")
    p.add_argument("--config", help="experiment JSON (default: bundled config)")
    p.add_argument("--seed", type=int, help="run only this seed")
    p.add_argument("--methods", help="comma-separated methods overriding the config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except LoraMergeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
