"""Run archives on disk and plot-data export.

An archive is a directory holding

    config.toml    resolved TrainConfig (net, strategy, train) and data spec
    meta.toml      schema version, seed, package version, timestamps, valid flag
    rows.tsv       iteration, per-task losses, weights and eigenvalues
    timing.tsv     iteration, wall-clock seconds since the run started
    metrics.toml   final metrics (absent for runs that never finished)
    decay.toml     optional DecayReport

Floats are written with ``repr``, the shortest decimal that reads back to
the same double, so a save/load round trip is bit-exact.  rows.tsv carries
no timing so reruns of the same config reproduce it byte for byte.
"""

import datetime as _dt
import math
import sys
from pathlib import Path

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import __version__
from .errors import (
    ArchiveError,
    ArchiveParseError,
    MissingSeriesError,
    NotAnArchiveError,
    SchemaVersionError,
)
from .trainer import Row, RunRecord, train

SCHEMA_VERSION = 1
CONFIG, META, ROWS, TIMING, METRICS, DECAY = (
    "config.toml",
    "meta.toml",
    "rows.tsv",
    "timing.tsv",
    "metrics.toml",
    "decay.toml",
)
PLOT_KINDS = ("loss_curves", "eig_trajectories", "weight_trajectories", "decay_fit")


def fmt(x):
    """Shortest round-trip text for a double (``nan``, ``inf``, ``-inf`` spelled out)."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def rows_header(k):
    return (
        ["iteration"]
        + [f"loss_t{i}" for i in range(k)]
        + [f"omega_t{i}" for i in range(k)]
        + [f"lambda_t{i}" for i in range(k)]
    )


def _row_line(row):
    vals = [str(int(row.iteration))]
    vals += [fmt(v) for v in row.losses]
    vals += [fmt(v) for v in row.omegas]
    vals += [fmt(v) for v in row.lambdas]
    return "\t".join(vals) + "\n"


def _write_toml(path, doc):
    try:
        with open(path, "wb") as fh:
            tomli_w.dump(doc, fh)
    except OSError as exc:
        raise ArchiveError(f"{path}: {exc.strerror or exc}") from exc


def _read_toml(path):
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ArchiveParseError("missing file", path) from exc
    except tomllib.TOMLDecodeError as exc:
        raise ArchiveParseError(f"corrupt TOML ({exc})", path) from exc


def _config_doc(record):
    from .config import synth_to_dict, train_config_to_dict

    doc = train_config_to_dict(record.config)
    if record.data is not None:
        doc["data"] = synth_to_dict(record.data)
    return doc


def _prepare_dir(directory):
    d = Path(directory)
    if d.exists():
        if not d.is_dir():
            raise ArchiveError(f"{d}: exists and is not a directory")
        if any(d.iterdir()):
            raise ArchiveError(f"{d}: directory is not empty; refusing to overwrite")
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArchiveError(f"{d}: cannot create ({exc.strerror or exc})") from exc
    return d


class ArchiveWriter:
    """Streams a run into an archive as it trains.

    ``open`` writes config and meta (valid = false) and the rows header;
    ``append`` adds one row to rows.tsv and timing.tsv and flushes;
    ``finish`` writes metrics and flips the valid flag.
    """

    def __init__(self, directory, record):
        self.dir = _prepare_dir(directory)
        self.record = record
        self.k = record.k
        self.started = _now()
        _write_toml(self.dir / CONFIG, _config_doc(record))
        self._write_meta(valid=False, finished="")
        try:
            self._rows = open(self.dir / ROWS, "w", encoding="utf-8", newline="\n")
            self._timing = open(self.dir / TIMING, "w", encoding="utf-8", newline="\n")
        except OSError as exc:
            raise ArchiveError(f"{self.dir}: {exc.strerror or exc}") from exc
        self._rows.write("\t".join(rows_header(self.k)) + "\n")
        self._timing.write("iteration\twall_time\n")

    def _write_meta(self, valid, finished):
        cfg = self.record.config
        _write_toml(
            self.dir / META,
            {
                "schema_version": SCHEMA_VERSION,
                "kind": "run",
                "seed": cfg.seed,
                "strategy": cfg.strategy.name,
                "k": self.k,
                "code_version": __version__,
                "started": self.started,
                "finished": finished,
                "valid": bool(valid),
            },
        )

    def append(self, row):
        self._rows.write(_row_line(row))
        self._timing.write(f"{int(row.iteration)}\t{fmt(row.wall_time)}\n")
        self._rows.flush()
        self._timing.flush()

    def close(self):
        for fh in (self._rows, self._timing):
            if not fh.closed:
                fh.close()

    def finish(self, record):
        self.close()
        if record.final_metrics:
            _write_toml(self.dir / METRICS, _metrics_doc(record.final_metrics))
        self._write_meta(valid=record.valid and bool(record.final_metrics), finished=_now())
        return self.dir


def _metrics_doc(metrics):
    out = {}
    for key, v in metrics.items():
        out[key] = [float(x) for x in v] if isinstance(v, (list, tuple, np.ndarray)) else float(v)
    return out


def save_run(record, directory):
    """Write a complete RunRecord; refuses a non-empty target directory."""
    w = ArchiveWriter(directory, record)
    for row in record.rows:
        w.append(row)
    return w.finish(record)


def train_archived(config, dataset, data_spec, directory):
    """Train ``config`` on ``dataset``, streaming rows into a new archive."""
    writer = ArchiveWriter(directory, RunRecord(config, data=data_spec))
    try:
        record = train(config, dataset, on_row=writer.append)
    except Exception:
        writer.close()  # meta stays valid = false
        raise
    record.data = data_spec
    writer.finish(record)
    return record


def rerun(directory, out):
    """Train again from an archive's stored config into the fresh archive ``out``.

    Only archives whose dataset came from the synthetic generator can be
    rebuilt; CSV-backed runs do not store their data.
    """
    from .bench import generate

    old = load_run(directory)
    if old.data is None:
        raise ArchiveError(f"{directory}: no generator spec stored, cannot rebuild the dataset")
    return train_archived(old.config, generate(old.data), old.data, out)


def write_decay(directory, report):
    _write_toml(Path(directory) / DECAY, report.to_dict())


def read_decay(directory):
    from .dynamics import DecayReport

    return DecayReport.from_dict(_read_toml(Path(directory) / DECAY))


def read_meta(directory):
    d = Path(directory)
    if not d.is_dir():
        raise NotAnArchiveError(f"{d}: not a directory")
    if not (d / META).exists():
        raise NotAnArchiveError(f"{d}: no {META}; not a run archive")
    meta = _read_toml(d / META)
    version = meta.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{d / META}: schema version {version!r} is not supported (expected {SCHEMA_VERSION})"
        )
    return meta


def _read_table(path, header):
    """Parse a tab-separated table; errors name the file and line."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ArchiveParseError("missing file", path) from exc
    lines = text.split("\n")
    if not lines or lines[0].split("\t") != header:
        raise ArchiveParseError(f"bad header, expected {'/'.join(header)}", path, 1)
    if lines[-1] != "":
        raise ArchiveParseError(
            f"truncated after line {len(lines) - 1} (last line has no newline)", path, len(lines)
        )
    out = []
    for no, line in enumerate(lines[1:-1], start=2):
        parts = line.split("\t")
        if len(parts) != len(header):
            raise ArchiveParseError(
                f"expected {len(header)} fields, got {len(parts)}; last good line is {no - 1}",
                path,
                no,
            )
        try:
            out.append((int(parts[0]), [float(p) for p in parts[1:]]))
        except ValueError as exc:
            raise ArchiveParseError(f"{exc}; last good line is {no - 1}", path, no) from exc
    return out


def load_run(directory):
    """Rebuild the RunRecord stored in ``directory``."""
    from .config import synth_from_dict, train_config_from_dict

    d = Path(directory)
    meta = read_meta(d)
    cfg_doc = _read_toml(d / CONFIG)
    try:
        config = train_config_from_dict(cfg_doc)
        data = synth_from_dict(cfg_doc["data"]) if "data" in cfg_doc else None
    except (KeyError, TypeError, ValueError) as exc:
        raise ArchiveParseError(f"invalid run config ({exc})", d / CONFIG) from exc
    k = config.net_spec.k
    rows = _read_table(d / ROWS, rows_header(k))
    timing = dict(_read_table(d / TIMING, ["iteration", "wall_time"]))
    record = RunRecord(config, data=data)
    for it, vals in rows:
        v = np.array(vals)
        wall = timing[it][0] if it in timing else float("nan")
        record.rows.append(Row(it, v[:k], v[k : 2 * k], v[2 * k :], wall))
    if (d / METRICS).exists():
        m = _read_toml(d / METRICS)
        record.final_metrics = {
            key: (list(v) if isinstance(v, list) else v) for key, v in m.items()
        }
    record.valid = bool(meta.get("valid", False))
    return record


# plot data --------------------------------------------------------------------


def _series_table(record, kind):
    k = record.k
    if kind == "loss_curves":
        cols = [f"loss_t{i}" for i in range(k)]
        rows = [(r.iteration, r.losses) for r in record.rows]
    elif kind == "weight_trajectories":
        cols = [f"omega_t{i}" for i in range(k)]
        rows = [(r.iteration, r.omegas) for r in record.rows]
    else:
        cols = [f"lambda_t{i}" for i in range(k)]
        rows = [(r.iteration, r.lambdas) for r in record.rows if not np.all(np.isnan(r.lambdas))]
    if not rows:
        raise MissingSeriesError(f"record has no {kind} data")
    return ["iter"] + cols, [[float(it)] + list(v) for it, v in rows]


def _write_columns(path, columns, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# " + " ".join(columns) + "\n")
        for r in rows:
            fh.write(" ".join(fmt(v) for v in r) + "\n")


def emit_plotdata(source, kind, out, label="run"):
    """Write one whitespace-separated file per series plus ``manifest.tsv``.

    ``source`` is a RunRecord (or a list of them) for the trajectory kinds,
    or a DecayReport for ``decay_fit``.  Each data file starts with a
    ``# col col ...`` comment line; the manifest has one line per file:
    ``file<TAB>kind<TAB>label<TAB>comma-separated columns``.  Returns the
    paths written.
    """
    if kind not in PLOT_KINDS:
        raise MissingSeriesError(f"unknown plot kind {kind!r}; choose from {PLOT_KINDS}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    if kind == "decay_fit":
        rep = source
        if not hasattr(rep, "fitted_rates"):
            raise MissingSeriesError("decay_fit needs a DecayReport")
        cols = ["component", "lambda", "fitted_rate", "r_squared", "predicted_rate", "excluded"]
        rows = [
            [j, rep.eigenvalues[j], rep.fitted_rates[j], rep.r_squared[j],
             rep.eta * rep.eigenvalues[j], float(rep.excluded[j])]
            for j in range(len(rep.fitted_rates))
        ]
        name = f"{label}_decay_fit.dat"
        _write_columns(out / name, cols, rows)
        entries.append((name, kind, label, cols))
    else:
        records = source if isinstance(source, (list, tuple)) else [source]
        labels = [label] if len(records) == 1 else [f"{label}{i}" for i in range(len(records))]
        for rec, lab in zip(records, labels):
            if not hasattr(rec, "rows"):
                raise MissingSeriesError(f"{kind} needs run records")
            cols, rows = _series_table(rec, kind)
            name = f"{lab}_{kind}.dat"
            _write_columns(out / name, cols, rows)
            entries.append((name, kind, lab, cols))
    manifest = out / "manifest.tsv"
    new = not manifest.exists()
    with open(manifest, "a", encoding="utf-8", newline="\n") as fh:
        if new:
            fh.write("file\tkind\tlabel\tcolumns\n")
        for name, kd, lab, cols in entries:
            fh.write(f"{name}\t{kd}\t{lab}\t{','.join(cols)}\n")
    return [out / e[0] for e in entries]


def read_manifest(out):
    lines = (Path(out) / "manifest.tsv").read_text(encoding="utf-8").splitlines()
    return [dict(zip(["file", "kind", "label", "columns"], ln.split("\t"))) for ln in lines[1:]]


def read_columns(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
    cols = header[1:].split()
    data = np.loadtxt(path, ndmin=2)
    return cols, data
