"""TOML run configuration: schema, validation and the generated reference.

One document may carry the sections ``data``, ``net``, ``train``,
``strategy``, ``bench``, ``sweep`` and ``dynamics``; every command reads the
ones it needs.  Unknown sections and keys are rejected with the offending
key named.
"""

import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .bench import SynthSpec, generate, import_dataset
from .dynamics import LazyConfig
from .errors import ConfigError, InputValidationError
from .net import HeadSpec, NetSpec
from .trainer import TrainConfig
from .weighting import STRATEGIES, Strategy

# (default, doc); a default of None means "derived" as the doc explains
SCHEMA = {
    "data": {
        "kind": ("multifreq", "generator: multifreq, scalemix or randlin"),
        "input_dim": (2, "input dimension"),
        "samples": (512, "training samples"),
        "test_samples": (256, "held-out samples"),
        "noise_std": (0.01, "std of Gaussian target noise"),
        "seed": (0, "generator seed"),
        "frequencies": ([[1.0], [3.0], [7.0]], "multifreq: frequency set per task"),
        "amplitude": (1.0, "multifreq/scalemix: sine amplitude"),
        "scales": ([1.0, 100.0], "scalemix: per-task loss scale c_i"),
        "conditions": ([1.0, 10.0, 100.0], "randlin: per-task condition numbers"),
        "input_range": (0.2, "inputs are uniform on [-r, r]^input_dim"),
        "csv_dir": ("", "if set, load train.csv/test.csv from here instead of generating"),
    },
    "net": {
        "width": (64, "hidden width of each trunk layer (also the representation width)"),
        "depth": (2, "number of trunk layers"),
        "head_hidden": ([], "hidden widths inside each head"),
        "activation": ("tanh", "tanh, relu or identity"),
        "seed": (None, "initialisation seed; defaults to train.seed"),
    },
    "train": {
        "lr": (0.05, "SGD learning rate"),
        "iterations": (10_000, "SGD steps"),
        "batch_size": (64, "samples per step"),
        "record_every": (10, "log losses and weights every this many steps"),
        "eig_record_every": (100, "log kernel eigenvalues every this many steps"),
        "seed": (0, "seed for batching and random weightings"),
        "diag_estimator": ("sr", "kernel used to log eigenvalues for non-NTK strategies: sr or full"),
        "diag_n": (4, "mini-batch count for that diagnostic kernel"),
    },
    "strategy": {
        "name": ("LS", "one of " + ", ".join(STRATEGIES)),
        "n": (None, "mini-batches per step for NTK strategies (default 1 for NTKMTL, 4 for NTKMTL_SR)"),
        "temperature": (2.0, "DWA temperature"),
        "ema": (0.0, "optional smoothing of NTK weights across steps, in [0, 1)"),
    },
    "bench": {
        "methods": (list(STRATEGIES), "strategies to compare"),
        "seeds": ([0, 1, 2], "seeds; each seed drives data, init and batching"),
        "stl": (True, "also train single-task baselines and report delta_m"),
    },
    "sweep": {
        "param": ("n", "strategy or train key to sweep"),
        "values": ([1, 2, 3, 4, 6], "values to try"),
        "seeds": ([0, 1, 2], "seeds per value"),
    },
    "dynamics": {
        "width": (512, "hidden width"),
        "samples": (8, "training samples"),
        "input_dim": (1, "input dimension"),
        "frequencies": ([0.5, 1.0], "one target frequency per task"),
        "eta": (1e-3, "learning rate in the flow d theta/dt = -eta grad L"),
        "t_end": (200.0, "flow time horizon"),
        "n_times": (41, "recorded time points"),
        "dt": (2.5e-4, "Euler step in eta * t units"),
        "seed": (0, "seed for data and init"),
        "top": (3, "leading components checked against eta * lambda"),
        "pred_tol": (0.10, "allowed relative prediction error"),
        "rate_tol": (0.20, "allowed relative decay-rate error"),
        "min_r2": (0.95, "fit quality required for a leading component"),
        "min_spearman": (0.9, "required rank correlation of lambda and fitted rate"),
        "floor": (1e-10, "projection magnitude where a decay series is cut"),
        "min_initial": (1e-3, "components starting below this fraction of the error norm are skipped"),
    },
}

_TYPES = {
    bool: (bool,),
    int: (int,),
    float: (int, float),
    str: (str,),
    list: (list,),
}


@dataclass
class RunConfig:
    """A validated document plus where it came from."""

    sections: dict
    path: Path = None
    raw: dict = field(default_factory=dict)

    def section(self, name):
        return self.sections[name]


def _check_type(path, sec, key, value, default):
    if default is None:
        ok = value is None or isinstance(value, int) and not isinstance(value, bool)
        if key == "seed" or key == "n":
            if not ok:
                raise ConfigError("expected an integer", path, f"{sec}.{key}")
        return
    want = type(default)
    allowed = _TYPES.get(want, (want,))
    if want is not bool and isinstance(value, bool):
        raise ConfigError(f"expected {want.__name__}, got a boolean", path, f"{sec}.{key}")
    if not isinstance(value, allowed):
        raise ConfigError(
            f"expected {want.__name__}, got {type(value).__name__}", path, f"{sec}.{key}"
        )


def validate(doc, path=None):
    """Fill defaults and reject unknown sections/keys.  Returns a RunConfig."""
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a table", path)
    out = {}
    for sec, value in doc.items():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section; expected one of {sorted(SCHEMA)}", path, sec)
        if not isinstance(value, dict):
            raise ConfigError("section must be a table", path, sec)
        for key in value:
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key in [{sec}]", path, f"{sec}.{key}")
    for sec, keys in SCHEMA.items():
        given = doc.get(sec, {})
        filled = {}
        for key, (default, _) in keys.items():
            if key in given:
                _check_type(path, sec, key, given[key], default)
                filled[key] = given[key]
            else:
                filled[key] = default
        out[sec] = filled
    return RunConfig(out, Path(path) if path is not None else None, doc)


def load(path):
    path = Path(path)
    try:
        with path.open("rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError("config file not found", path) from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"not valid TOML ({exc})", path) from exc
    return validate(doc, path)


def loads(text, path=None):
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"not valid TOML ({exc})", path) from exc
    return validate(doc, path)


def _wrap(fn, cfg, sec):
    # turn constructor validation errors into config errors naming the section
    try:
        return fn()
    except InputValidationError as exc:
        raise ConfigError(str(exc), cfg.path, sec) from exc


def synth_spec(cfg, seed=None):
    d = dict(cfg.section("data"))
    d.pop("csv_dir")
    if seed is not None:
        d["seed"] = seed
    d["frequencies"] = tuple(tuple(f) if isinstance(f, list) else (f,) for f in d["frequencies"])
    return _wrap(lambda: SynthSpec(**d), cfg, "data")


def dataset(cfg, seed=None):
    """(dataset, generator spec or None) for the [data] section."""
    csv_dir = cfg.section("data")["csv_dir"]
    spec = synth_spec(cfg, seed)
    if csv_dir:
        base = cfg.path.parent if cfg.path is not None else Path.cwd()
        scales = spec.scales if spec.kind == "scalemix" else None
        try:
            return import_dataset(base / csv_dir, scales), None
        except OSError as exc:
            raise ConfigError(f"cannot read data ({exc})", cfg.path, "data.csv_dir") from exc
    return generate(spec), spec


def strategy(cfg, **over):
    s = dict(cfg.section("strategy"))
    s.update(over)
    return _wrap(lambda: Strategy(**s), cfg, "strategy")


def net_spec(cfg, data_spec, input_dim, output_dims, seed):
    n = cfg.section("net")
    nseed = n["seed"] if n["seed"] is not None else seed
    if n["depth"] < 1 or n["width"] < 1:
        raise ConfigError("depth and width must be >= 1", cfg.path, "net")
    widths = (input_dim,) + (n["width"],) * n["depth"]
    heads = tuple(HeadSpec(tuple(n["head_hidden"]), d) for d in output_dims)
    return _wrap(
        lambda: NetSpec(input_dim, widths, n["width"], heads, n["activation"], nseed), cfg, "net"
    )


def train_config(cfg, data, seed=None, **strategy_over):
    """TrainConfig for ``data`` (a Dataset) under this document."""
    t = dict(cfg.section("train"))
    if seed is not None:
        t["seed"] = seed
    dims = [y.shape[1] for y in data.y_train]
    spec = net_spec(cfg, None, data.x_train.shape[1], dims, t["seed"])
    strat = strategy(cfg, **strategy_over)
    return _wrap(lambda: TrainConfig(spec, strat, **t), cfg, "train")


def lazy_config(cfg):
    d = dict(cfg.section("dynamics"))
    d["frequencies"] = tuple(d["frequencies"])
    return _wrap(lambda: LazyConfig(**d), cfg, "dynamics")


# round trip of resolved run configs (what an archive stores) ------------------


def train_config_to_dict(tc):
    s = tc.strategy
    return {
        "net": tc.net_spec.to_dict(),
        "strategy": {"name": s.name, "n": s.n, "temperature": s.temperature, "ema": s.ema},
        "train": {
            "lr": tc.lr,
            "iterations": tc.iterations,
            "batch_size": tc.batch_size,
            "record_every": tc.record_every,
            "eig_record_every": tc.eig_record_every,
            "seed": tc.seed,
            "diag_estimator": tc.diag_estimator,
            "diag_n": tc.diag_n,
        },
    }


def train_config_from_dict(d):
    spec = NetSpec(**d["net"])
    return TrainConfig(spec, Strategy(**d["strategy"]), **d["train"])


def synth_to_dict(spec):
    return {
        "kind": spec.kind,
        "input_dim": spec.input_dim,
        "samples": spec.samples,
        "test_samples": spec.test_samples,
        "noise_std": spec.noise_std,
        "seed": spec.seed,
        "frequencies": [list(f) for f in spec.frequencies],
        "amplitude": spec.amplitude,
        "scales": list(spec.scales),
        "conditions": list(spec.conditions),
        "input_range": spec.input_range,
    }


def synth_from_dict(d):
    d = dict(d)
    d["frequencies"] = tuple(tuple(f) for f in d["frequencies"])
    return SynthSpec(**d)


def dumps(doc):
    return tomli_w.dumps(doc)


# reference page ---------------------------------------------------------------


def _fmt(v):
    if v is None:
        return "(derived)"
    # JSON spelling of scalars and arrays coincides with TOML inline syntax
    return "`" + json.dumps(v) + "`"


def reference_markdown():
    """Markdown table of every section, key, default and meaning."""
    out = [
        "# Configuration reference",
        "",
        "Generated from `ntkmtl.config.SCHEMA`; regenerate with "
        "`ntkmtl reference > docs/config_reference.md`.",
        "Unknown sections or keys are rejected.",
        "",
    ]
    for sec, keys in SCHEMA.items():
        out += [f"## [{sec}]", "", "| key | default | meaning |", "|---|---|---|"]
        for key, (default, doc) in keys.items():
            out.append(f"| `{key}` | {_fmt(default)} | {doc} |")
        out.append("")
    return "\n".join(out)


def with_seed(cfg, seed):
    """Copy of ``cfg`` with every seed key pinned to ``seed``."""
    sections = {k: dict(v) for k, v in cfg.sections.items()}
    for sec in ("data", "train", "dynamics"):
        sections[sec]["seed"] = seed
    if sections["net"]["seed"] is not None:
        sections["net"]["seed"] = seed
    sections["bench"]["seeds"] = [seed]
    sections["sweep"]["seeds"] = [seed]
    return replace(cfg, sections=sections)
