"""Pretrain, swap the head, fine-tune under each strategy and seed, summarize.

Records CSV schema (``records.csv``), one row per (strategy, seed, step):

    strategy, seed, step, phi_total, e_est, e_lab, e_cross,
    noise_fraction_pct, delta_prev_energy, var_xL, loss, accuracy,
    test_accuracy, wall_clock

Floats are written with ``repr`` so they read back bit-exactly; an empty
``test_accuracy`` means test accuracy was not measured at that step.
"""

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import data as dio
from . import optim
from .errors import ConfigError, NumericError
from .initializers import InitSpec
from .network import ARCHITECTURES, TRAIN, accuracy, backward, forward, one_hot, predict
from .network import replace_head
from .telemetry import EnergyReport, check_invariants, make_report
from .tensor import derive_rng, reduce_stats

log = logging.getLogger(__name__)

STRATEGIES = ("base", "base_wu", "mei", "mei_fn")

RECORD_FIELDS = (
    ["strategy", "seed"]
    + EnergyReport.field_names()
    + ["test_accuracy", "wall_clock"]
)

# sub-stream ids for derive_rng(seed, ...)
_PRETRAIN_INIT, _PRETRAIN_BATCHES, _HE_HEAD, _MEI_HEAD, _BATCHES, _AUGMENT = range(6)


@dataclass
class ExperimentConfig:
    source: str = "synth:0-4"
    target: str = "synth:5-9"
    arch: str = "mlp"
    strategies: tuple = STRATEGIES
    seeds: tuple = tuple(range(8))
    gamma: float = 1e-4
    phi_w: float = 1e-12
    lam: float = None
    batch_size: int = 256
    steps: int = 200
    optimizer: str = "adam"
    wu_steps: int = 1
    he_mode: str = "he_fan_out"
    pretrain_steps: int = 400
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 128
    augment: bool = True
    probe_size: int = 256
    eval_every: int = 10
    data_seed: int = 0
    synth_classes: int = 10
    synth_dim: int = 64
    synth_difficulty: float = 1.0
    synth_train_per_class: int = 500
    synth_test_per_class: int = 200
    out: str = "runs/default"
    data_dir: str = None
    cache: bool = True

    def validate(self):
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad or not self.strategies:
            raise ConfigError(f"unknown strategies {bad}; choose from {STRATEGIES}")
        if len(set(self.strategies)) != len(self.strategies):
            raise ConfigError("strategies must be distinct")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative")
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.he_mode not in ("he_fan_in", "he_fan_out"):
            raise ConfigError(f"he_mode must be he_fan_in or he_fan_out, got {self.he_mode!r}")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if self.lam is None and not self.phi_w > 0:
            raise ConfigError("phi_w must be positive")
        if self.lam is not None and self.lam <= 0:
            raise ConfigError("lambda must be positive")
        for name in ("batch_size", "pretrain_batch_size", "probe_size", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("steps", "wu_steps", "pretrain_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for ref in (self.source, self.target):
            parse_dataset_ref(ref)
        return self


_FIELD_TYPES = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_TUPLE_FIELDS = {"strategies": str, "seeds": int}
_ALIASES = {"lambda": "lam", "phi-w": "phi_w", "batch-size": "batch_size"}


def _parse_seeds(text):
    seeds = []
    for part in str(text).replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-")
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    return tuple(seeds)


def _convert(name, value):
    if name not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {name!r}")
    if value is None:
        return None
    if name == "seeds":
        return value if isinstance(value, tuple) else _parse_seeds(value)
    if name == "strategies":
        if isinstance(value, tuple):
            return value
        return tuple(s.strip() for s in str(value).split(",") if s.strip())
    default = _FIELD_TYPES[name].default
    try:
        if name in ("lam", "phi_w", "gamma", "pretrain_lr", "synth_difficulty"):
            text = str(value).strip().lower()
            return None if text in ("", "none") else float(value)
        if name == "data_dir":
            return None if str(value).strip() in ("", "none") else str(value)
        if isinstance(default, bool):
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {value!r}") from exc
    return str(value)


def read_config_file(path):
    """Flat ``key = value`` file (``#`` comments) into a dict of raw strings."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    text = Path(path).read_text()
    try:
        parser.read_string("[experiment]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return dict(parser["experiment"])


def make_config(file=None, **overrides):
    """Config from defaults, then ``file``, then ``overrides`` (``None`` ignored)."""
    values = {}
    if file is not None:
        for key, value in read_config_file(file).items():
            key = _ALIASES.get(key, key.replace("-", "_"))
            values[key] = _convert(key, value)
    for key, value in overrides.items():
        if value is None:
            continue
        key = _ALIASES.get(key, key)
        values[key] = _convert(key, value)
    return ExperimentConfig(**values).validate()


def config_to_dict(cfg):
    d = dataclasses.asdict(cfg)
    d["strategies"] = list(cfg.strategies)
    d["seeds"] = list(cfg.seeds)
    return d


# -- datasets ---------------------------------------------------------------


def parse_dataset_ref(ref):
    """``name[:classes]`` where classes is ``a-b`` or ``a,b,c``."""
    name, _, cls = ref.partition(":")
    if name not in ("synth", *dio.LOADERS):
        raise ConfigError(f"unknown dataset {name!r} in {ref!r}")
    if not cls:
        return name, None
    try:
        if "-" in cls:
            lo, hi = cls.split("-")
            classes = list(range(int(lo), int(hi) + 1))
        else:
            classes = [int(c) for c in cls.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad class list in {ref!r}") from exc
    if len(classes) < 2 or len(set(classes)) != len(classes):
        raise ConfigError(f"{ref!r} must name at least two distinct classes")
    return name, classes


def _synth_pair(cfg):
    rng = derive_rng(cfg.data_seed, 0)
    centers = dio.synth_centers(rng, cfg.synth_classes, cfg.synth_dim)
    n = cfg.synth_classes
    train = dio.synth_samples(rng, centers, n * cfg.synth_train_per_class, cfg.synth_difficulty)
    test = dio.synth_samples(
        rng, centers, n * cfg.synth_test_per_class, cfg.synth_difficulty, split="test"
    )
    return train, test


def load_task(cfg, ref):
    """Normalized (train, test) for a dataset reference."""
    name, classes = parse_dataset_ref(ref)
    if name == "synth":
        train, test = _synth_pair(cfg)
    else:
        train, test = dio.LOADERS[name](cfg.data_dir)
    if classes is not None:
        if max(classes) >= train.n_classes:
            raise ConfigError(f"{ref!r} names classes beyond {train.n_classes}")
        train, test = dio.select_classes(train, classes), dio.select_classes(test, classes)
    return dio.normalize_channels(train, train), dio.normalize_channels(train, test)


# -- training loops ---------------------------------------------------------


def batch_stream(rng, n, batch_size):
    """Endless minibatch indices: a fresh permutation per epoch, short tail dropped."""
    size = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - size + 1, size):
            yield perm[i : i + size]


def _batch(ds, idx, rng, augment):
    x = ds.images[idx]
    if augment and ds.is_image:
        x = dio.augment_hflip(x, rng)
    return x


def build_network(arch, input_shape, n_classes, rng):
    return ARCHITECTURES[arch](input_shape, n_classes, rng)


def pretrain(cfg, seed, source_train, source_test=None):
    """Train a network from scratch on the source task; returns (net, test accuracy)."""
    net = build_network(
        cfg.arch, source_train.input_shape, source_train.n_classes, derive_rng(seed, _PRETRAIN_INIT)
    )
    params = net.parameters()
    state = optim.init_optimizer(params, "adam", cfg.pretrain_lr)
    rng = derive_rng(seed, _PRETRAIN_BATCHES)
    batches = batch_stream(rng, len(source_train), cfg.pretrain_batch_size)
    for _ in range(cfg.pretrain_steps):
        idx = next(batches)
        x = _batch(source_train, idx, rng, cfg.augment)
        y = one_hot(source_train.labels[idx], source_train.n_classes)
        bt = backward(forward(net, x, TRAIN), y)
        optim.step(state, params, bt.flat_grads())
    acc = None
    if source_test is not None and len(source_test):
        acc = accuracy(predict(net, source_test.images), source_test.labels)
    return net, acc


def _pretrain_key(cfg, seed):
    keys = ("arch", "source", "pretrain_steps", "pretrain_lr", "pretrain_batch_size", "augment")
    if cfg.source.startswith("synth"):
        keys += ("data_seed", "synth_classes", "synth_dim", "synth_difficulty",
                 "synth_train_per_class")
    blob = json.dumps({k: getattr(cfg, k) for k in keys} | {"seed": seed}, sort_keys=True)
    digest = hashlib.sha1(blob.encode()).hexdigest()[:12]
    slug = cfg.source.replace(":", "_").replace(",", "_")
    return f"{cfg.arch}-{slug}-seed{seed}-{digest}"


def load_or_pretrain(cfg, seed, source_train, source_test=None):
    """Backbone for ``seed``, cached under ``<out>/cache`` when ``cfg.cache``."""
    path = Path(cfg.out) / "cache" / f"{_pretrain_key(cfg, seed)}.npz"
    if cfg.cache and path.exists():
        net = build_network(
            cfg.arch, source_train.input_shape, source_train.n_classes, derive_rng(seed, 0)
        )
        with np.load(path) as saved:
            for i, name, p in net.param_groups():
                p[...] = saved[f"{i}.{name}"]
            acc = float(saved["source_test_accuracy"])
        return net, (None if math.isnan(acc) else acc)
    net, acc = pretrain(cfg, seed, source_train, source_test)
    if cfg.cache:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, **net.state_dict(), source_test_accuracy=np.nan if acc is None else acc)
    return net, acc


def head_init(cfg, strategy, n_classes):
    if strategy in ("mei", "mei_fn"):
        return InitSpec.mei(n_classes, gamma=cfg.gamma, lam=cfg.lam, phi_w=cfg.phi_w)
    return InitSpec(cfg.he_mode)


def measure_test_at(step, eval_every, last_step):
    """Every step up to 10, then every ``eval_every`` steps, plus the last one."""
    return step <= 10 or step % eval_every == 0 or step == last_step


def finetune(cfg, backbone, seed, strategy, train, test, sink=None):
    """One (strategy, seed) run; returns its list of record dicts."""
    n_classes = train.n_classes
    init = head_init(cfg, strategy, n_classes)
    head_rng = derive_rng(seed, _MEI_HEAD if init.kind == "mei" else _HE_HEAD)
    net = replace_head(backbone, n_classes, init, head_rng, use_fn=(strategy == "mei_fn"))
    params = net.parameters()
    state = optim.init_optimizer(params, cfg.optimizer, cfg.gamma)
    batches = batch_stream(derive_rng(seed, _BATCHES), len(train), cfg.batch_size)
    aug_rng = derive_rng(seed, _AUGMENT)
    probe = train.images[: cfg.probe_size]
    if probe.shape[0] < 2:
        probe = train.images

    rows = []
    start = time.perf_counter()
    for step in range(cfg.steps + 1):
        idx = next(batches)
        x = _batch(train, idx, aug_rng, cfg.augment)
        y = one_hot(train.labels[idx], n_classes)
        trace = forward(net, x, TRAIN)
        bt = backward(trace, y)
        var_xL = reduce_stats(forward(net, probe, TRAIN, track_stats=False).x_last).variance
        report = make_report(step, trace, bt, y, train.labels[idx], var_xL=var_xL)
        check_invariants(report, n_classes)
        test_acc = None
        if measure_test_at(step, cfg.eval_every, cfg.steps):
            test_acc = accuracy(predict(net, test.images), test.labels)
        row = {"strategy": strategy, "seed": seed, **report.as_dict(),
               "test_accuracy": test_acc, "wall_clock": time.perf_counter() - start}
        rows.append(row)
        if sink is not None:
            sink(row)
        if step == cfg.steps:
            break
        warm = strategy == "base_wu" and step < cfg.wu_steps
        mask = optim.warmup_mask(net, optim.WARMUP if warm else optim.JOINT)
        optim.step(state, params, bt.flat_grads(), mask)
    return rows


# -- record I/O -------------------------------------------------------------


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RecordSink:
    """Append-only CSV writer that flushes after every row."""

    def __init__(self, path, fresh=True):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        new = fresh or not self.path.exists()
        self._f = open(self.path, "w" if fresh else "a", newline="")
        self._w = csv.writer(self._f, lineterminator="\n")
        if new:
            self._w.writerow(RECORD_FIELDS)
            self._f.flush()

    def __call__(self, row):
        self._w.writerow([_fmt(row.get(k)) for k in RECORD_FIELDS])
        self._f.flush()

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_records(records, path):
    with RecordSink(path) as sink:
        for row in records:
            sink(row)


def _parse_field(key, text):
    if key == "strategy":
        return text
    if key in ("seed", "step"):
        return int(text)
    return None if text == "" else float(text)


def read_records(path):
    with open(path, newline="") as f:
        return [{k: _parse_field(k, v) for k, v in row.items()} for row in csv.DictReader(f)]


# -- experiment -------------------------------------------------------------


@dataclass
class ExperimentResult:
    records: list
    failed: list = field(default_factory=list)
    summary: dict = None
    pretrain_accuracy: dict = field(default_factory=dict)


def run_experiment(cfg, write=True):
    cfg.validate()
    out = Path(cfg.out)
    source_train, source_test = load_task(cfg, cfg.source)
    train, test = load_task(cfg, cfg.target)

    records, failed, pre_acc = [], [], {}
    sink = None
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=2))
        sink = RecordSink(out / "records.csv")
    try:
        backbones = {}
        for seed in cfg.seeds:
            backbones[seed], pre_acc[seed] = load_or_pretrain(cfg, seed, source_train, source_test)
        for strategy in cfg.strategies:
            for seed in cfg.seeds:
                log.info("fine-tuning strategy=%s seed=%d", strategy, seed)
                try:
                    records += finetune(cfg, backbones[seed], seed, strategy, train, test, sink)
                except NumericError as exc:
                    log.warning("run %s/%d failed: %s", strategy, seed, exc)
                    failed.append({"strategy": strategy, "seed": seed, "error": str(exc)})
    finally:
        if sink is not None:
            sink.close()

    summary = None
    if len(cfg.seeds) >= 2:
        summary = summarize(records)
        summary["failed"] = failed
        if write:
            write_summary(summary, out)
    return ExperimentResult(records, failed, summary, pre_acc)


# -- statistics -------------------------------------------------------------


def mean_ci(values, confidence=0.95):
    """Mean, sample std and Student-t half-width of the confidence interval."""
    v = np.asarray(values, dtype=np.float64)
    n = v.size
    if n < 2:
        raise ValueError("a confidence interval needs at least 2 seeds")
    mean = float(v.mean())
    sd = float(v.std(ddof=1))
    half = float(stats.t.ppf(0.5 + confidence / 2, n - 1) * sd / math.sqrt(n))
    return mean, sd, half


def paired_t_test(treatment, control):
    """Two-sided paired t-test; returns (mean difference, t statistic, p-value)."""
    d = np.asarray(treatment, dtype=np.float64) - np.asarray(control, dtype=np.float64)
    if d.size < 2:
        raise ValueError("a paired t-test needs at least 2 pairs")
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0:
        if mean == 0:
            return mean, 0.0, 1.0
        return mean, math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(d.size))
    p = float(2 * stats.t.sf(abs(t), d.size - 1))
    return mean, float(t), p


def _by_run(records):
    runs = {}
    for r in records:
        runs.setdefault((r["strategy"], int(r["seed"])), []).append(r)
    for rows in runs.values():
        rows.sort(key=lambda r: r["step"])
    return runs


def run_metrics(rows):
    """Per-run scalar metrics from its step-ordered records."""
    by_step = {r["step"]: r for r in rows}
    tested = [r for r in rows if r.get("test_accuracy") is not None]
    early = [r["test_accuracy"] for r in tested if 1 <= r["step"] <= 10]
    m = {
        "first10_test_accuracy": float(np.mean(early)) if early else None,
        "final_test_accuracy": tested[-1]["test_accuracy"] if tested else None,
        "initial_noise_fraction_pct": by_step[0]["noise_fraction_pct"] if 0 in by_step else None,
        "initial_delta_prev_energy": by_step[0]["delta_prev_energy"] if 0 in by_step else None,
        "initial_loss": by_step[0]["loss"] if 0 in by_step else None,
        "var_xL_jump": None,
    }
    if 0 in by_step and 1 in by_step:
        m["var_xL_jump"] = abs(by_step[1]["var_xL"] - by_step[0]["var_xL"])
    return m


SUMMARY_METRICS = (
    "first10_test_accuracy",
    "final_test_accuracy",
    "initial_noise_fraction_pct",
    "initial_delta_prev_energy",
    "initial_loss",
    "var_xL_jump",
)
PAIRS = (("mei", "base"), ("mei_fn", "base_wu"), ("mei_fn", "base"), ("mei", "base_wu"))


def summarize(records, confidence=0.95):
    """Mean and t-interval per (strategy, metric); paired tests on early accuracy."""
    runs = _by_run(records)
    strategies = list(dict.fromkeys(s for s, _ in runs))
    metrics = {key: run_metrics(rows) for key, rows in runs.items()}
    seeds = {s: sorted(seed for st, seed in runs if st == s) for s in strategies}
    if any(len(v) < 2 for v in seeds.values()):
        raise ValueError("summaries need at least 2 seeds per strategy")

    table = []
    for s in strategies:
        for name in SUMMARY_METRICS:
            vals = [metrics[(s, seed)][name] for seed in seeds[s]]
            vals = [v for v in vals if v is not None and not math.isnan(v)]
            if len(vals) < 2:
                continue
            mean, sd, half = mean_ci(vals, confidence)
            table.append({"strategy": s, "metric": name, "n": len(vals),
                          "mean": mean, "std": sd, "half_width": half})

    paired = []
    for treat, ctrl in PAIRS:
        if treat not in seeds or ctrl not in seeds:
            continue
        common = sorted(set(seeds[treat]) & set(seeds[ctrl]))
        a = [metrics[(treat, s)]["first10_test_accuracy"] for s in common]
        b = [metrics[(ctrl, s)]["first10_test_accuracy"] for s in common]
        if len(common) < 2 or None in a or None in b:
            continue
        diff, t, p = paired_t_test(a, b)
        _, _, half = mean_ci(np.subtract(a, b), confidence)
        paired.append({"treatment": treat, "control": ctrl, "metric": "first10_test_accuracy",
                       "n": len(common), "mean_diff": diff, "half_width": half,
                       "t_stat": t, "p_value": p})
    return {"confidence": confidence, "table": table, "paired": paired}


def write_summary(summary, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, rows in (("summary.csv", summary["table"]), ("paired_tests.csv", summary["paired"])):
        path = out / name
        with open(path, "w", newline="") as f:
            if rows:
                w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
                w.writeheader()
                w.writerows({k: _fmt(v) for k, v in r.items()} for r in rows)
        paths.append(path)
    return paths


# -- plot data --------------------------------------------------------------

PLOT_KINDS = {
    "accuracy_curve": "test_accuracy",
    "var_xL_curve": "var_xL",
    "noise_bar": "noise_fraction_pct",
}


def plot_table(records, kind):
    """Rows of (strategy, step, n, mean, std) for a plot kind."""
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; choose from {sorted(PLOT_KINDS)}")
    if not records:
        raise ValueError("no records to plot")
    col = PLOT_KINDS[kind]
    cells = {}
    for r in records:
        if kind == "noise_bar" and r["step"] != 0:
            continue
        v = r.get(col)
        if v is None or (isinstance(v, float) and math.isnan(v)):
            continue
        cells.setdefault((r["strategy"], int(r["step"])), []).append(float(v))
    strategies = list(dict.fromkeys(r["strategy"] for r in records))
    rows = []
    for s in strategies:
        for (st, step), vals in sorted(cells.items(), key=lambda kv: kv[0][1]):
            if st != s:
                continue
            sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            rows.append({"strategy": s, "step": step, "n": len(vals),
                         "mean": float(np.mean(vals)), "std": sd})
    return rows


def export_plotdata(records, kind, out, svg=False):
    """Write ``<kind>.csv`` (and ``<kind>.svg`` when requested); returns the paths."""
    rows = plot_table(records, kind)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{kind}.csv"
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["strategy", "step", "n", "mean", "std"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows({k: _fmt(v) for k, v in r.items()} for r in rows)
    paths = [path]
    if svg:
        paths.append(_plot_svg(rows, kind, out / f"{kind}.svg"))
    return paths


def _plot_svg(rows, kind, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for s in dict.fromkeys(r["strategy"] for r in rows):
        pts = [r for r in rows if r["strategy"] == s]
        x = np.array([r["step"] for r in pts])
        m = np.array([r["mean"] for r in pts])
        sd = np.array([r["std"] for r in pts])
        if kind == "noise_bar":
            ax.bar([s], m, yerr=sd)
            continue
        ax.plot(x, m, label=s)
        ax.fill_between(x, m - sd, m + sd, alpha=0.25)
    ax.set_xlabel("strategy" if kind == "noise_bar" else "training step")
    ax.set_ylabel(PLOT_KINDS[kind])
    if kind != "noise_bar":
        ax.legend()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
