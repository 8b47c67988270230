"""``ertickets`` command line.

Exit codes: 0 claim holds, 1 claim violated (failure rate above delta),
2 usage error, 3 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DomainError, ErTicketsError, StructuralError
from .experiments import csv_text, default_jobs, dumps, report_rows, run_trials
from .masks import flow_stats, mask_to_dict, repair_random_addition, repair_rejection, sample_mask
from .netcore import (
    Architecture,
    Mask,
    arch_from_dict,
    arch_to_dict,
    conv_arch,
    fc_arch,
    network_from_dict,
    network_to_dict,
    random_target,
)
from .plans import make_plan
from .subsetsum import adversarial_check, probe_lemma1
from .tickets import (
    SLTBlocks,
    TrialReport,
    aggregate,
    compute_eps_schedule,
    prescale,
    probe_lower_bound,
    slt_block_sizes,
)
from .train import (
    TrainConfig,
    anneal_schedule,
    edge_popup,
    gaussian_blobs,
    he_init,
    rigl_rewire,
    sgd_train,
    teacher_student,
)

EXIT_OK, EXIT_VIOLATED, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.replace(" ", "").split(",") if t]


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(" ", "").split(",") if t]


def _grid(text: str) -> list[int]:
    """``a:b:s`` (half-open, like ``range``) or a comma list."""
    if ":" in text:
        parts = [int(t) for t in text.split(":")]
        return list(range(*parts))
    return _ints(text)


# --- shared argument groups ---------------------------------------------------


def _common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")
    p.add_argument("--out-dir", default="out")
    p.add_argument("--config", default=None, help="JSON file with argument defaults")


def _arch_args(p, prefix="", default_widths=None):
    p.add_argument(f"--{prefix}arch", default=None, help="architecture JSON file")
    p.add_argument(f"--{prefix}widths", default=default_widths, help="fc widths, e.g. 4,6,2")
    p.add_argument(f"--{prefix}channels", default=None, help="conv channels, e.g. 2,2,2")
    p.add_argument(f"--{prefix}kernel", type=int, default=3)
    p.add_argument(f"--{prefix}spatial", default="4,4")
    p.add_argument(f"--{prefix}domain", default=None, help="input domain a1,b1")


def _plan_args(p, density=0.5):
    p.add_argument("--plan", default="uniform", choices=["uniform", "erk", "pyramidal", "balanced", "external"])
    p.add_argument("--density", type=float, default=density)
    p.add_argument("--ratios", default=None, help="per-layer densities file for --plan external")


def _build_arch(args, prefix="") -> Architecture:
    get = lambda name: getattr(args, prefix.replace("-", "_") + name)
    domain = tuple(_floats(get("domain"))) if get("domain") else None
    if get("arch"):
        d = json.loads(Path(get("arch")).read_text())
        # accept a bare architecture or any output file that embeds one
        if isinstance(d.get("arch"), dict):
            d = d["arch"]
        arch = arch_from_dict(d)
        if domain:
            arch = Architecture(arch.layers, domain, arch.spatial)
        return arch
    if get("channels"):
        return conv_arch(_ints(get("channels")), get("kernel"), tuple(_ints(get("spatial"))), domain or (0.0, 1.0))
    if get("widths"):
        return fc_arch(_ints(get("widths")), domain or (-1.0, 1.0))
    raise UsageError(f"give --{prefix}arch, --{prefix}widths or --{prefix}channels")


def _plan(args, arch):
    return make_plan(arch, args.plan, args.density, args.ratios)


# --- commands ----------------------------------------------------------------


def cmd_sample_mask(args) -> tuple[int, dict]:
    arch = _build_arch(args)
    plan = _plan(args, arch)
    if args.repair == "reject":
        mask = repair_rejection(arch, plan, args.seed)
        report = flow_stats(arch, mask)
    else:
        mask = sample_mask(arch, plan, args.seed)
        report = flow_stats(arch, mask)
        if args.repair == "random-add":
            mask, report = repair_random_addition(mask, args.seed)
    return EXIT_OK, {
        "mask.json": {"mask": mask_to_dict(mask)},
        "flow.json": {"flow": report.to_dict()},
        "plan.json": {"plan": plan.to_dict(), "arch": arch_to_dict(arch)},
    }


def cmd_probe_subset_sum(args) -> tuple[int, dict]:
    grid = _grid(args.n_grid)
    res = probe_lemma1(
        args.p, args.epsilon, args.delta, grid, args.trials, args.seed,
        thinned=not args.no_thinning, value_law=args.value_law, heuristic_fallback=True,
    )
    summary = res.summary()
    if args.adversarial_trials and res.n_star is not None:
        summary["adversarial"] = adversarial_check(
            args.p, args.epsilon, res.n_star, args.adversarial_trials, args.seed, value_law=args.value_law
        )
    code = EXIT_OK if res.n_star is not None else EXIT_VIOLATED
    return code, {"probe.csv": res.csv_rows(), "probe.json": {"summary": summary}}


def cmd_probe_lower_bound(args) -> tuple[int, dict]:
    res = probe_lower_bound(args.p, args.d, args.delta, _grid(args.n_grid), args.trials, args.seed)
    summary = res.summary()
    code = EXIT_OK if summary["consistent"] else EXIT_VIOLATED
    return code, {"lower_bound.csv": res.csv_rows(), "lower_bound.json": {"summary": summary}}


def _target(args, conv: bool):
    if args.target:
        d = json.loads(Path(args.target).read_text())
        return network_from_dict(d.get("target", d))
    arch = _build_arch(args, "target-")
    if conv != arch.is_conv:
        raise UsageError("target architecture does not match the command")
    net = random_target(arch, args.target_seed, args.target_scale)
    if args.zero_bias:
        net = net.with_params(biases=tuple(np.zeros_like(b) for b in net.biases))
    return net


def _construct(args, kind: str) -> tuple[int, dict]:
    target = _target(args, kind == "wlt-conv")
    plan = make_plan(target.arch, args.plan, args.density, args.ratios)
    jobs = args.jobs or default_jobs()
    kw = {"input_density": args.input_density}
    if kind == "slt":
        if args.block_sizes:
            sizes = _ints(args.block_sizes)
            L = target.arch.depth
            kw["blocks"] = SLTBlocks(tuple(sizes[:L]), tuple(sizes[L:]) or (0,) * L, 0)
        else:
            scaled, scale = prescale(target)
            schedule = compute_eps_schedule(scaled, args.epsilon / scale)
            kw["blocks"] = slt_block_sizes(scaled, plan, args.delta, schedule, trials=args.calibration_trials)
        kw["approximate_biases"] = args.approximate_biases
        reports = run_trials("slt", target, plan, args.delta, args.trials, args.seed, eps=args.epsilon, jobs=jobs, **kw)
    else:
        kw["require_all_copies"] = args.require_all_copies
        reports = run_trials(kind, target, plan, args.delta, args.trials, args.seed, jobs=jobs, **kw)
    agg = aggregate(reports, args.delta)
    agg["sparsity_plan"] = plan.to_dict()
    code = EXIT_OK if agg["failure_rate"] <= args.delta else EXIT_VIOLATED
    return code, {
        "reports.json": {"reports": [r.to_dict(args.record_timings) for r in reports], "delta": args.delta},
        "reports.csv": report_rows(reports),
        "aggregate.json": {"aggregate": agg},
        "target.json": {"target": network_to_dict(target)},
    }


def _dataset(args, arch):
    if args.dataset == "blobs":
        data = gaussian_blobs(arch.input_dim, arch.layers[-1].out_units, args.n_train, args.n_test,
                              args.separation, args.data_seed)
        return data, "cross-entropy"
    teacher_arch = fc_arch(_ints(args.teacher_widths), arch.input_domain) if args.teacher_widths else arch
    teacher = random_target(teacher_arch, args.data_seed)
    return teacher_student(teacher, args.n_train, args.n_test, args.data_seed), "mse"


def _train_setup(args):
    arch = _build_arch(args)
    data, loss = _dataset(args, arch)
    cfg = TrainConfig(args.lr, args.momentum, args.weight_decay, args.epochs, args.batch_size, args.seed, loss)
    return arch, data, cfg


def _er_net(args, arch):
    if args.density >= 1.0 and args.plan == "uniform":
        mask = Mask.ones(arch)
    else:
        mask = sample_mask(arch, _plan(args, arch), args.seed)
    return he_init(arch, mask, args.seed)


def cmd_train_sgd(args) -> tuple[int, dict]:
    arch, data, cfg = _train_setup(args)
    net = _er_net(args, arch)
    trained, curve = sgd_train(net, data, cfg)
    out = {"curve.csv": curve.csv_rows(), "summary.json": {"final_loss": curve.final, "diverged": curve.diverged}}
    if trained is not None:
        out["network.json"] = {"network": network_to_dict(trained)}
    return (EXIT_RUNTIME if curve.diverged else EXIT_OK), out


def cmd_train_edge_popup(args) -> tuple[int, dict]:
    arch, data, cfg = _train_setup(args)
    net = _er_net(args, arch)
    start = min(args.start_keep, float(np.mean([s.mean() for s in net.mask.layers])))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mask, curve = edge_popup(net, data, cfg, anneal_schedule(max(start, args.end_keep), args.end_keep, args.levels))
    out = {"curve.csv": curve.csv_rows(), "mask.json": {"mask": mask_to_dict(mask)}}
    summary = {"final_accuracy": curve.final}
    if args.paired_baseline:
        dense = he_init(arch, Mask.ones(arch), args.seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            _, base = edge_popup(dense, data, cfg, anneal_schedule(1.0, args.end_keep, args.levels))
        out["baseline_curve.csv"] = base.csv_rows()
        summary["baseline_final_accuracy"] = base.final
        summary["accuracy_gap"] = base.final - curve.final
    out["summary.json"] = summary
    return EXIT_OK, out


def cmd_train_rigl(args) -> tuple[int, dict]:
    arch, data, cfg = _train_setup(args)
    net = _er_net(args, arch)
    final_density = _floats(args.final_density) if args.final_density else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mask, curve, trained = rigl_rewire(net, data, cfg, args.update_every, args.prune_rate, final_density)
    rows = [{"update": i + 1, **{f"nnz_{l}": n for l, n in enumerate(counts)}} for i, counts in enumerate(curve.nnz)]
    out = {
        "curve.csv": curve.csv_rows(),
        "nnz.csv": rows,
        "mask.json": {"mask": mask_to_dict(mask)},
        "summary.json": {"final_loss": curve.final, "diverged": curve.diverged, "updates": len(curve.nnz)},
    }
    if trained is not None:
        out["network.json"] = {"network": network_to_dict(trained)}
    return (EXIT_RUNTIME if curve.diverged else EXIT_OK), out


def cmd_report(args) -> tuple[int, dict]:
    reports, deltas = [], set()
    for path in args.inputs:
        d = json.loads(Path(path).read_text())
        reports += [TrialReport.from_dict(r) for r in d["reports"]]
        deltas.add(d["delta"])
    if not reports:
        raise UsageError("no reports to merge")
    if len(deltas) != 1:
        raise UsageError(f"reports disagree on delta: {sorted(deltas)}")
    delta = deltas.pop()
    agg = aggregate(reports, delta)
    code = EXIT_OK if agg["failure_rate"] <= delta else EXIT_VIOLATED
    return code, {"aggregate.json": {"aggregate": agg, "inputs": list(args.inputs)}}


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ertickets", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ertickets {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample-mask", help="sample an ER mask and its flow report")
    _common(p)
    _arch_args(p)
    _plan_args(p)
    p.add_argument("--repair", choices=["none", "random-add", "reject"], default="none")
    p.set_defaults(func=cmd_sample_mask)

    p = sub.add_parser("probe-subset-sum", help="subset-sum failure rate versus base-set size")
    _common(p)
    p.add_argument("--p", type=float, default=0.5)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--n-grid", default="2:41:1")
    p.add_argument("--value-law", choices=["uniform", "product"], default="uniform")
    p.add_argument("--no-thinning", action="store_true", help="keep every value available")
    p.add_argument("--adversarial-trials", type=int, default=0)
    p.set_defaults(func=cmd_probe_subset_sum, trials=1000)

    p = sub.add_parser("probe-lower-bound", help="representability of a univariate target")
    _common(p)
    p.add_argument("--p", type=float, default=0.5)
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--n-grid", default="1:33:1")
    p.set_defaults(func=cmd_probe_lower_bound, trials=10000)

    for name, kind in (("construct-slt", "slt"), ("construct-wlt-fc", "wlt-fc"), ("construct-wlt-conv", "wlt-conv")):
        p = sub.add_parser(name, help=f"{kind} construction trials")
        _common(p)
        p.add_argument("--target", default=None, help="target network JSON")
        _arch_args(p, "target-")
        p.add_argument("--target-seed", type=int, default=0)
        p.add_argument("--target-scale", type=float, default=1.0)
        p.add_argument("--zero-bias", action="store_true")
        _plan_args(p)
        p.add_argument("--delta", type=float, default=0.1)
        p.add_argument("--input-density", type=float, default=None)
        p.add_argument("--record-timings", action="store_true")
        if kind == "slt":
            p.add_argument("--epsilon", type=float, default=0.2)
            p.add_argument("--block-sizes", default=None, help="copies per layer then bias units, comma list")
            p.add_argument("--calibration-trials", type=int, default=1000)
            p.add_argument("--approximate-biases", action="store_true")
        else:
            p.add_argument("--require-all-copies", action="store_true")
        p.set_defaults(func=lambda a, k=kind: _construct(a, k))

    for name, func in (("train-sgd", cmd_train_sgd), ("train-edge-popup", cmd_train_edge_popup),
                       ("train-rigl", cmd_train_rigl)):
        p = sub.add_parser(name, help=f"{name[6:]} on synthetic data")
        _common(p)
        _arch_args(p, default_widths="10,64,64,2")
        _plan_args(p)
        p.add_argument("--dataset", choices=["blobs", "teacher-student"], default="blobs")
        p.add_argument("--teacher-widths", default=None)
        p.add_argument("--data-seed", type=int, default=0)
        p.add_argument("--n-train", type=int, default=1024)
        p.add_argument("--n-test", type=int, default=512)
        p.add_argument("--separation", type=float, default=2.0)
        p.add_argument("--lr", type=float, default=0.05)
        p.add_argument("--momentum", type=float, default=0.9)
        p.add_argument("--weight-decay", type=float, default=0.0)
        p.add_argument("--epochs", type=int, default=10)
        p.add_argument("--batch-size", type=int, default=32)
        if name == "train-edge-popup":
            p.add_argument("--start-keep", type=float, default=1.0)
            p.add_argument("--end-keep", type=float, default=0.1)
            p.add_argument("--levels", type=int, default=5)
            p.add_argument("--paired-baseline", action="store_true")
        if name == "train-rigl":
            p.add_argument("--update-every", type=int, default=100)
            p.add_argument("--prune-rate", type=float, default=0.3)
            p.add_argument("--final-density", default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="merge TrialReport files into one aggregate")
    _common(p)
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def _load_config(path) -> dict:
    d = json.loads(Path(path).read_text())
    # output files embed their config under "config"
    d = d.get("config", d)
    return {k.replace("-", "_"): v for k, v in d.items() if k not in ("command", "config")}


# where and how fast a run happens does not change its results
_UNEMBEDDED = ("func", "config", "out_dir", "jobs")


def _resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _UNEMBEDDED}


def _write(out_dir: Path, outputs: dict, meta: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, payload in outputs.items():
        path = out_dir / name
        if name.endswith(".csv"):
            path.write_text(csv_text(payload))
        else:
            path.write_text(dumps({**meta, **payload}))


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.config:
        try:
            defaults = _load_config(args.config)
        except (OSError, ValueError) as exc:
            print(f"ertickets: cannot read config: {exc}", file=sys.stderr)
            return EXIT_USAGE
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(defaults) - known)
        if unknown:
            print(f"ertickets: unknown config keys: {', '.join(unknown)}", file=sys.stderr)
            return EXIT_USAGE
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    meta = {"tool_version": __version__, "command": args.command, "config": _resolved(args), "master_seed": args.seed}
    try:
        code, outputs = args.func(args)
    except UsageError as exc:
        print(f"ertickets: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DomainError, StructuralError) as exc:
        print(f"ertickets: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ErTicketsError, ArithmeticError, RuntimeError, OSError, ValueError) as exc:
        print(f"ertickets: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    _write(Path(args.out_dir), outputs, meta)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
