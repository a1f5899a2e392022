"""Command-line entry point.

    ntkmtl train     --config C [--out DIR] [--seed-override N]
    ntkmtl bench     --config C [--out DIR] [--workers N] [--seed-override N]
    ntkmtl dynamics  --config C [--out DIR] [--seed-override N]
    ntkmtl sweep     --config C [--out DIR] [--workers N] [--seed-override N]
    ntkmtl report    ARCHIVE [ARCHIVE ...] [--out DIR]
    ntkmtl rerun     ARCHIVE [--out DIR]
    ntkmtl reference

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O failure.
Without ``--out`` results go under ``$NTKMTL_OUT`` (default ``./runs``).
"""

import argparse
import datetime as _dt
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import runio
from .bench import MetricTable, delta_m, mean_rank
from .errors import (
    ArchiveError,
    ConfigError,
    InputValidationError,
    NumericalError,
    PoisonedRunError,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
OUT_ENV = "NTKMTL_OUT"


def _default_out(command):
    root = Path(os.environ.get(OUT_ENV, "runs"))
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    return root / f"{command}-{stamp}"


def _check_out(out):
    out = Path(out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise ArchiveError(f"{out}: output directory exists and is not empty")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArchiveError(f"{out}: cannot create ({exc.strerror or exc})") from exc
    return out


def _write_tsv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for r in rows:
            fh.write("\t".join(v if isinstance(v, str) else runio.fmt(v) for v in r) + "\n")


def _print_table(header, rows, out=None):
    out = out or sys.stdout
    cells = [header] + [[v if isinstance(v, str) else f"{v:.6g}" for v in r] for r in rows]
    widths = [max(len(c[j]) for c in cells) for j in range(len(header))]
    for c in cells:
        print("  ".join(s.ljust(w) for s, w in zip(c, widths)), file=out)


# child runs ---------------------------------------------------------------


def _run_child(job):
    """Train one (strategy, seed) run and archive it; returns (key, metrics, rows-or-None).

    Lives at module level so a process pool can pickle it.
    """
    key, sections, path, seed, overrides, out, data_seed = job
    cfg = cfgmod.RunConfig(sections, path)
    data, spec = cfgmod.dataset(cfg, seed=data_seed)
    tc = cfgmod.train_config(cfg, data, seed=seed, **overrides.get("strategy", {}))
    if overrides.get("train"):
        from dataclasses import replace

        tc = replace(tc, **overrides["train"])
    record = _train_archived(tc, data, spec, out)
    omegas = np.array([r.omegas for r in record.rows])
    return key, record.final_metrics, omegas


_train_archived = runio.train_archived


def _stl_job(job):
    key, sections, path, seed, out, data_seed = job
    from dataclasses import replace

    from .weighting import Strategy

    cfg = cfgmod.RunConfig(sections, path)
    data, spec = cfgmod.dataset(cfg, seed=data_seed)
    tc = cfgmod.train_config(cfg, data, seed=seed)
    losses = []
    for i in range(data.k):
        single = replace(tc, net_spec=replace(tc.net_spec, heads=(tc.net_spec.heads[i],)),
                         strategy=Strategy("LS"))
        rec = _train_archived(single, data.task(i), None, Path(out) / f"task{i}")
        losses.append(rec.final_metrics["test_loss"][0])
    return key, losses


def _map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


# commands -------------------------------------------------------------------


def cmd_train(cfg, out, args):
    data, spec = cfgmod.dataset(cfg)
    tc = cfgmod.train_config(cfg, data)
    record = _train_archived(tc, data, spec, out)
    m = record.final_metrics
    print(f"archive: {out}")
    _print_table(
        ["task", "train_loss", "test_loss"],
        [[str(i), m["train_loss"][i], m["test_loss"][i]] for i in range(record.k)],
    )
    return EXIT_OK


def cmd_bench(cfg, out, args):
    b = cfg.section("bench")
    methods, seeds = list(b["methods"]), list(b["seeds"])
    for m in methods:
        cfgmod.strategy(cfg, name=m)  # fail fast on unknown names
    jobs = [
        ((m, s), cfg.sections, cfg.path, s, {"strategy": {"name": m}}, out / m / f"seed{s}", s)
        for m in methods
        for s in seeds
    ]
    res = {key: metrics for key, metrics, _ in _map(_run_child, jobs, args.workers)}
    stl = {}
    if b["stl"]:
        sj = [(s, cfg.sections, cfg.path, s, out / "stl" / f"seed{s}", s) for s in seeds]
        stl = dict(_map(_stl_job, sj, args.workers))

    k = len(next(iter(res.values()))["test_loss"])
    header = ["method", "seed"] + [f"test_loss_t{i}" for i in range(k)]
    if stl:
        header.append("delta_m_pct")
    rows = []
    for m, s in sorted(res, key=lambda ms: (methods.index(ms[0]), ms[1])):
        tl = res[(m, s)]["test_loss"]
        row = [m, str(s)] + list(tl)
        if stl:
            row.append(delta_m(tl, stl[s], [False] * k))
        rows.append(row)
    for s in sorted(stl):
        rows.append(["STL", str(s)] + list(stl[s]) + ([0.0] if stl else []))
    _write_tsv(out / "runs.tsv", header, rows)

    # per-method means over seeds, then MR over task columns
    names = methods + (["STL"] if stl else [])
    means = []
    for m in names:
        vals = [r[2 : 2 + k] for r in rows if r[0] == m]
        means.append(np.mean(np.array(vals, dtype=float), axis=0))
    table = MetricTable(names, [f"t{i}" for i in range(k)], np.array(means), [False] * k)
    mr = mean_rank(table) if len(names) >= 2 else {names[0]: 1.0}
    sheader = ["method"] + [f"mean_test_loss_t{i}" for i in range(k)] + ["MR"]
    if stl:
        sheader.append("mean_delta_m_pct")
    srows = []
    for m, mv in zip(names, means):
        row = [m] + list(mv) + [mr[m]]
        if stl:
            row.append(float(np.mean([r[-1] for r in rows if r[0] == m])))
        srows.append(row)
    _write_tsv(out / "summary.tsv", sheader, srows)
    print(f"bench: {len(jobs)} runs under {out}")
    _print_table(sheader, srows)
    return EXIT_OK


SWEEPABLE = {"strategy": ("n", "temperature", "ema"), "train": ("lr", "batch_size", "iterations")}


def _sweep_target(cfg, param):
    for sec, keys in SWEEPABLE.items():
        if param in keys:
            return sec
    raise ConfigError(
        f"cannot sweep {param!r}; choose from {sum(SWEEPABLE.values(), ())}", cfg.path, "sweep.param"
    )


def omega_seed_variance(omega_runs):
    """Mean over logged steps and tasks of the across-seed variance of the weights.

    ``omega_runs`` is a list (one per seed) of (rows, k) arrays; they are cut
    to the shortest length.
    """
    if len(omega_runs) < 2:
        return float("nan")
    n = min(len(o) for o in omega_runs)
    stack = np.stack([np.asarray(o)[:n] for o in omega_runs])
    return float(np.mean(np.var(stack, axis=0)))


def cmd_sweep(cfg, out, args):
    sw = cfg.section("sweep")
    param, values, seeds = sw["param"], list(sw["values"]), list(sw["seeds"])
    sec = _sweep_target(cfg, param)
    if param == "n" and not cfgmod.strategy(cfg).uses_ntk:
        raise ConfigError("sweeping n needs an NTK strategy", cfg.path, "strategy.name")
    data_seed = cfg.section("data")["seed"]
    jobs = []
    for v in values:
        over = {sec: {param: v}}
        if sec == "strategy":
            cfgmod.strategy(cfg, **over["strategy"])
        for s in seeds:
            jobs.append(((v, s), cfg.sections, cfg.path, s, over, out / f"{param}={v}" / f"seed{s}", data_seed))
    results = _map(_run_child, jobs, args.workers)
    by = {key: (m, om) for key, m, om in results}
    stl = {}
    if cfg.section("bench")["stl"]:
        sj = [(s, cfg.sections, cfg.path, s, out / "stl" / f"seed{s}", data_seed) for s in seeds]
        stl = dict(_map(_stl_job, sj, args.workers))
    iters = cfg.section("train")["iterations"]
    header = [param, "wall_time_s", "sec_per_1000_iter", "mean_test_loss", "omega_seed_var"]
    if stl:
        header.append("delta_m_pct")
    rows = []
    for v in values:
        ms = [by[(v, s)][0] for s in seeds]
        wall = float(np.mean([m["wall_time"] for m in ms]))
        it = iters if param != "iterations" else v
        row = [str(v), wall, wall * 1000.0 / it,
               float(np.mean([np.mean(m["test_loss"]) for m in ms])),
               omega_seed_variance([by[(v, s)][1] for s in seeds])]
        if stl:
            k = len(ms[0]["test_loss"])
            row.append(float(np.mean([delta_m(m["test_loss"], stl[s], [False] * k)
                                      for m, s in zip(ms, seeds)])))
        rows.append(row)
    _write_tsv(out / "summary.tsv", header, rows)
    print(f"sweep over {param}: {len(jobs)} runs under {out}")
    _print_table(header, rows)
    return EXIT_OK


def cmd_dynamics(cfg, out, args):
    from .dynamics import lazy_regime_check

    lc = cfgmod.lazy_config(cfg)
    rep = lazy_regime_check(lc)
    runio._write_toml(
        out / runio.META,
        {"schema_version": runio.SCHEMA_VERSION, "kind": "dynamics", "seed": lc.seed,
         "code_version": runio.__version__, "finished": runio._now(), "valid": True},
    )
    runio._write_toml(out / runio.CONFIG, {"dynamics": dict(cfg.section("dynamics"))})
    runio.write_decay(out, rep.decay)
    top = rep.top_rate_errors
    runio._write_toml(
        out / "summary.toml",
        {"rel_error": rep.rel_error, "spearman": rep.spearman,
         "top_rate_errors": [float(x) for x in top], "passed": rep.passed},
    )
    y = rep.targets[0]
    act = np.linalg.norm(rep.actual - y, axis=1)
    pred = np.linalg.norm(rep.predicted - y, axis=1)
    gap = np.linalg.norm(rep.predicted - rep.actual, axis=1)
    plot = out / "plotdata"
    plot.mkdir()
    runio.emit_plotdata(rep.decay, "decay_fit", plot, label="dynamics")
    cols = ["t", "actual_err", "predicted_err", "gap"]
    runio._write_columns(plot / "dynamics_prediction.dat", cols,
                         np.column_stack([rep.times, act, pred, gap]))
    with open(plot / "manifest.tsv", "a", encoding="utf-8", newline="\n") as fh:
        fh.write(f"dynamics_prediction.dat\tprediction\tdynamics\t{','.join(cols)}\n")
    print(f"dynamics: archive {out}")
    print(f"relative prediction error {rep.rel_error:.4g} (limit {lc.pred_tol})")
    print("top rate errors " + " ".join(f"{x:.4g}" for x in top) + f" (limit {lc.rate_tol})")
    print(f"spearman {rep.spearman:.4g} (min {lc.min_spearman})")
    print("frozen-kernel check: " + ("PASS" if rep.passed else "FAIL"))
    return EXIT_OK


def _find_archives(paths):
    found = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise ArchiveError(f"{p}: no such archive")
        if (p / runio.META).exists():
            found.append(p)
            continue
        subs = sorted(m.parent for m in p.rglob(runio.META))
        if not subs:
            raise ArchiveError(f"{p}: no run archives found")
        found += subs
    return found


def cmd_report(archives, out, args):
    from . import plotting

    lines = []
    for i, a in enumerate(archives):
        meta = runio.read_meta(a)
        label = f"a{i}"
        if meta.get("kind") == "dynamics":
            rep = runio.read_decay(a)
            dat = runio.emit_plotdata(rep, "decay_fit", out, label=label)[0]
            plotting.plot_decay(dat, dat.with_suffix(".png"), title=str(a))
            lines.append(f"{label}\t{a}\tdynamics\t{int((~rep.excluded).sum())} fitted components")
            continue
        rec = runio.load_run(a)
        for kind in ("loss_curves", "weight_trajectories", "eig_trajectories"):
            try:
                dat = runio.emit_plotdata(rec, kind, out, label=label)[0]
            except runio.MissingSeriesError:
                continue
            plotting.plot_trajectories(dat, kind, dat.with_suffix(".png"), title=f"{a} ({kind})")
        if (a / runio.DECAY).exists():
            dat = runio.emit_plotdata(runio.read_decay(a), "decay_fit", out, label=label)[0]
            plotting.plot_decay(dat, dat.with_suffix(".png"), title=str(a))
        tl = rec.final_metrics.get("test_loss")
        tl_s = " ".join(f"{x:.4g}" for x in tl) if tl else "unfinished"
        lines.append(f"{label}\t{a}\t{rec.config.strategy.name}\tseed {rec.config.seed}\t"
                     f"valid {rec.valid}\ttest_loss {tl_s}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    print(f"report written to {out}")
    return EXIT_OK


# entry point ----------------------------------------------------------------


def cmd_rerun(archive, out):
    runio.rerun(archive, out)
    same = (Path(archive) / runio.ROWS).read_bytes() == (Path(out) / runio.ROWS).read_bytes()
    print(f"archive: {out}")
    print(f"rows.tsv identical to {archive}: {'yes' if same else 'NO'}")
    return EXIT_OK if same else EXIT_NUMERIC


def build_parser():
    p = argparse.ArgumentParser(prog="ntkmtl", description="NTK-balanced multi-task learning runs")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "bench", "dynamics", "sweep"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path, help="TOML run configuration")
        sp.add_argument("--out", type=Path, help=f"output directory (default under ${OUT_ENV})")
        sp.add_argument("--workers", type=int, default=1, help="parallel child runs")
        sp.add_argument("--seed-override", type=int, help="pin every seed in the config")
    rp = sub.add_parser("report")
    rp.add_argument("archives", nargs="+", type=Path)
    rp.add_argument("--out", type=Path)
    rr = sub.add_parser("rerun", help="retrain an archive from its stored config")
    rr.add_argument("archive", type=Path)
    rr.add_argument("--out", type=Path)
    sub.add_parser("reference", help="print the configuration reference")
    return p


COMMANDS = {"train": cmd_train, "bench": cmd_bench, "dynamics": cmd_dynamics, "sweep": cmd_sweep}


def run(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "reference":
            print(cfgmod.reference_markdown())
            return EXIT_OK
        if args.command == "report":
            archives = _find_archives(args.archives)
            out = _check_out(args.out or _default_out("report"))
            return cmd_report(archives, out, args)
        if args.command == "rerun":
            out = args.out or _default_out("rerun")
            return cmd_rerun(args.archive, out)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = cfgmod.load(args.config)
        if args.seed_override is not None:
            cfg = cfgmod.with_seed(cfg, args.seed_override)
        out = _check_out(args.out or _default_out(args.command))
        return COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, PoisonedRunError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InputValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
