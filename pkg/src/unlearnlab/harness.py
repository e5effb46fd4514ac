"""Experiment orchestration: train initial/ideal models, sweep, aggregate.

A sweep writes everything under ``output_dir``::

    seed_<s>/theta0.json, theta_ideal.json      per-seed model pair
    runs/<run_id>/manifest.json                 resolved configuration
    runs/<run_id>/metrics.csv                   one row per epoch
    runs/<run_id>/extras.json                   probe histogram, inner products
    runs/<run_id>/theta_unlearned.json
    runs/<run_id>/DONE                          completion marker
    aggregate.csv, aggregate.txt                final-epoch mean/std table

``run_id`` is a hash of the manifest, so rerunning a sweep skips runs that
already completed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import GENERATORS, DatasetSplit, ScenarioConfig, batches, split_forget
from .masks import AggSpec, agree_prob_histogram, regime_counts
from .metrics import CSV_COLUMNS, MIA_KINDS, MetricsReport, accuracy, read_metrics_csv, write_metrics_csv
from .nn_core import Batch, ModelSpec, grad, init_params, load_checkpoint, save_checkpoint
from .unlearn import ADDONS, METHODS, AddOnSpec, ConfigError, check_compatible, make_method, run_unlearning

log = logging.getLogger(__name__)

REFERENCE_FOCUS_RTE_OVERHEAD = 0.22


class TrainingError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    model: ModelSpec = field(default_factory=lambda: ModelSpec(16, (256,), 4))
    dataset: dict = field(default_factory=lambda: {
        "name": "blobs", "per_class": 500, "test_per_class": 200, "dim": 16, "separation": 4.0,
    })
    scenario: str = "random_fraction"
    fraction: float = 0.10
    target_class: int | None = None
    methods: list = field(default_factory=lambda: ["SRL"])
    addons: list = field(default_factory=lambda: ["none", "focus"])
    # Full-scale reference: 100 training epochs at lr 0.1, unlearning lr 1e-4, batch 256.
    train_epochs: int = 60
    unlearn_epochs: int = 10
    train_lr: float = 0.05
    unlearn_lr: float = 0.7
    batch_size: int = 32
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    agg: str = "linear"
    alpha: float = 0.05
    beta: float = 0.95
    p: float = 0.3
    gamma: float = 1.0
    eps: float = 1e-8
    variance_provider: str = "adam"
    adam_moment: str = "centered"
    mia_kinds: list = field(default_factory=lambda: list(MIA_KINDS))
    probe_bins: int = 20
    timing: str = "wallclock"
    workers: int = 1
    output_dir: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        if self.dataset.get("name") not in GENERATORS:
            raise ConfigError(f"unknown dataset generator {self.dataset.get('name')!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        for a in self.addons:
            if a not in ADDONS:
                raise ConfigError(f"unknown add-on {a!r}")
        for m in self.methods:
            for a in self.addons:
                check_compatible(make_method(m, self.gamma), self.addon_spec(a))
        for k in self.mia_kinds:
            if k not in MIA_KINDS:
                raise ConfigError(f"unknown MIA feature {k!r}")
        if self.timing not in ("wallclock", "off"):
            raise ConfigError("timing must be 'wallclock' or 'off'")
        if self.train_epochs < 0 or self.unlearn_epochs < 1:
            raise ConfigError("train_epochs must be >= 0 and unlearn_epochs >= 1")
        if self.train_lr <= 0 or self.unlearn_lr <= 0 or self.batch_size < 1:
            raise ConfigError("learning rates and batch size must be positive")
        try:
            ScenarioConfig(self.scenario, self.fraction, self.target_class)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def addon_spec(self, kind: str) -> AddOnSpec:
        return AddOnSpec(
            kind=kind,
            p=self.p if kind == "prob" else None,
            agg=AggSpec(self.agg, self.alpha, self.beta),
            variance_provider=self.variance_provider,
            adam_moment=self.adam_moment,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["model"] = ModelSpec.from_dict(d["model"])
        return cls(**d)


# ---------------------------------------------------------------- config file

_KEYS = {
    "model.input_dim": ("model", "input_dim", int),
    "model.hidden_dims": ("model", "hidden_dims", "intlist"),
    "model.num_classes": ("model", "num_classes", int),
    "model.activation": ("model", "activation", str),
    "dataset.name": ("dataset", "name", str),
    "dataset.per_class": ("dataset", "per_class", int),
    "dataset.test_per_class": ("dataset", "test_per_class", int),
    "dataset.dim": ("dataset", "dim", int),
    "dataset.separation": ("dataset", "separation", float),
    "dataset.noise": ("dataset", "noise", float),
    "scenario.kind": (None, "scenario", str),
    "scenario.fraction": (None, "fraction", float),
    "scenario.target_class": (None, "target_class", "optint"),
    "train.epochs": (None, "train_epochs", int),
    "train.lr": (None, "train_lr", float),
    "train.batch_size": (None, "batch_size", int),
    "unlearn.methods": (None, "methods", "strlist"),
    "unlearn.addons": (None, "addons", "strlist"),
    "unlearn.epochs": (None, "unlearn_epochs", int),
    "unlearn.lr": (None, "unlearn_lr", float),
    "unlearn.agg": (None, "agg", str),
    "unlearn.alpha": (None, "alpha", float),
    "unlearn.beta": (None, "beta", float),
    "unlearn.p": (None, "p", float),
    "unlearn.gamma": (None, "gamma", float),
    "unlearn.eps": (None, "eps", float),
    "unlearn.variance_provider": (None, "variance_provider", str),
    "unlearn.adam_moment": (None, "adam_moment", str),
    "run.seeds": (None, "seeds", "intlist"),
    "run.mia_kinds": (None, "mia_kinds", "strlist"),
    "run.probe_bins": (None, "probe_bins", int),
    "run.timing": (None, "timing", str),
    "run.workers": (None, "workers", int),
    "run.output_dir": (None, "output_dir", str),
}


def _convert(raw: str, kind):
    if kind == "intlist":
        return [int(v) for v in raw.split(",") if v.strip()]
    if kind == "strlist":
        return [v.strip() for v in raw.split(",") if v.strip()]
    if kind == "optint":
        return None if raw.lower() in ("", "none") else int(raw)
    return kind(raw)


def parse_config(text: str) -> ExperimentConfig:
    """Parse flat ``dotted.key = value`` lines; ``#`` starts a comment.

    Lists are comma-separated. Errors name the offending line.
    """
    cfg = ExperimentConfig()
    model = cfg.model.to_dict()
    dataset = dict(cfg.dataset)
    top = {}
    seen = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} (first on line {seen[key]})")
        seen[key] = lineno
        section, name, kind = _KEYS[key]
        try:
            value = _convert(raw, kind)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {raw!r} for {key}") from None
        {"model": model, "dataset": dataset, None: top}[section][name] = value
    if "dataset.dim" in seen and "model.input_dim" not in seen:
        model["input_dim"] = dataset["dim"]
    try:
        cfg = replace(cfg, model=ModelSpec.from_dict(model), dataset=dataset, **top)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    lines = []
    for key, (section, name, kind) in _KEYS.items():
        src = d["model"] if section == "model" else d["dataset"] if section == "dataset" else d
        if name not in src:
            continue
        v = src[name]
        if isinstance(v, (list, tuple)):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- training

def make_data(cfg: ExperimentConfig, seed) -> DatasetSplit:
    params = {k: v for k, v in cfg.dataset.items() if k != "name"}
    params.setdefault("num_classes", cfg.model.num_classes)
    train, test = GENERATORS[cfg.dataset["name"]](seed=seed, **params)
    return split_forget(train, test, ScenarioConfig(cfg.scenario, cfg.fraction, cfg.target_class, seed=seed))


def train_model(cfg: ExperimentConfig, data: Batch, seed) -> np.ndarray:
    """Seeded init then plain SGD on the mean cross-entropy."""
    theta = init_params(cfg.model, seed)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    for epoch in range(cfg.train_epochs):
        for b in batches(data, cfg.batch_size, rng):
            theta = theta - cfg.train_lr * grad(cfg.model, theta, b, "cross_entropy")
        if not np.all(np.isfinite(theta)):
            raise TrainingError(f"training diverged at epoch {epoch + 1}")
    log.info("trained on %d examples: train accuracy %.2f%%", len(data), accuracy(cfg.model, theta, data))
    return theta


def train_initial(cfg: ExperimentConfig, seed, split: DatasetSplit | None = None) -> np.ndarray:
    split = make_data(cfg, seed) if split is None else split
    return train_model(cfg, split.train, seed)


def train_ideal(cfg: ExperimentConfig, split: DatasetSplit, seed) -> np.ndarray:
    """Same initialisation and schedule as :func:`train_initial`, retain set only."""
    return train_model(cfg, split.retain, seed)


def prepare_seed(cfg: ExperimentConfig, seed, out: Path | None = None):
    """Data split plus ``(theta0, theta_ideal)``, cached as checkpoints under ``out``."""
    split = make_data(cfg, seed)
    if out is not None:
        d = out / f"seed_{seed}"
        p0, ps = d / "theta0.json", d / "theta_ideal.json"
        if p0.exists() and ps.exists():
            return split, load_checkpoint(p0)[1], load_checkpoint(ps)[1]
    theta0 = train_initial(cfg, seed, split)
    theta_ideal = train_ideal(cfg, split, seed)
    if out is not None:
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(p0, cfg.model, theta0)
        save_checkpoint(ps, cfg.model, theta_ideal)
    return split, theta0, theta_ideal


# ---------------------------------------------------------------- runs

@dataclass
class RunRecord:
    run_id: str
    manifest: dict
    reports: list = field(default_factory=list)
    status: str = "ok"
    error: str = ""
    agree_hist: list = field(default_factory=list)
    regimes: dict = field(default_factory=dict)
    inner_products: list = field(default_factory=list)
    paths: dict = field(default_factory=dict)
    theta: np.ndarray | None = field(default=None, repr=False)

    @property
    def method(self) -> str:
        return self.manifest["method"]

    @property
    def addon(self) -> str:
        return self.manifest["addon"]

    @property
    def seed(self) -> int:
        return self.manifest["seed"]

    def rows(self) -> list[dict]:
        return [r.row(self.run_id, self.seed, self.method, self.addon) for r in self.reports]


def manifest_for(cfg: ExperimentConfig, seed, method, addon) -> dict:
    keep = cfg.to_dict()
    for k in ("methods", "addons", "seeds", "workers", "output_dir"):
        keep.pop(k)
    return {"method": method, "addon": addon, "seed": int(seed), "config": keep, "code_version": __version__}


def run_id_for(manifest: dict) -> str:
    blob = json.dumps(manifest, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def execute_run(cfg: ExperimentConfig, seed, method: str, addon: str, split=None, theta0=None,
                theta_ideal=None) -> RunRecord:
    """Unlearn one (method, add-on, seed) triple from ``theta0``."""
    manifest = manifest_for(cfg, seed, method, addon)
    rec = RunRecord(run_id_for(manifest), manifest)
    if split is None:
        split, theta0, theta_ideal = prepare_seed(cfg, seed)
    trace = {}
    clock = time.perf_counter if cfg.timing == "wallclock" else (lambda: 0.0)
    theta, reports = run_unlearning(
        cfg.model, theta0, make_method(method, cfg.gamma), cfg.addon_spec(addon), split,
        epochs=cfg.unlearn_epochs, eta=cfg.unlearn_lr, batch_size=cfg.batch_size, seed=seed,
        eps=cfg.eps, theta_ideal=theta_ideal, mia_kinds=tuple(cfg.mia_kinds), clock=clock,
        probe_epoch=max(1, (cfg.unlearn_epochs + 1) // 2), trace=trace,
    )
    rec.reports = reports
    rec.inner_products = trace.get("inner_products", [])
    if "agree_prob" in trace:
        counts, _ = agree_prob_histogram(trace["agree_prob"], cfg.probe_bins)
        rec.agree_hist = [int(c) for c in counts]
        rec.regimes = regime_counts(trace["agree_prob"])
    rec.theta = theta
    return rec


def _write_run(run_dir: Path, cfg: ExperimentConfig, rec: RunRecord) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "manifest.json").write_text(json.dumps(rec.manifest, indent=1, sort_keys=True))
    if rec.status == "ok":
        write_metrics_csv(run_dir / "metrics.csv", rec.rows())
        save_checkpoint(run_dir / "theta_unlearned.json", cfg.model, rec.theta)
    extras = {
        "run_id": rec.run_id, "status": rec.status, "error": rec.error,
        "agree_hist": rec.agree_hist, "regimes": rec.regimes, "inner_products": rec.inner_products,
    }
    (run_dir / "extras.json").write_text(json.dumps(extras, indent=1))
    (run_dir / "DONE").write_text(rec.status + "\n")


def load_run(run_dir) -> RunRecord:
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    extras = json.loads((run_dir / "extras.json").read_text())
    rec = RunRecord(extras["run_id"], manifest, status=extras["status"], error=extras["error"],
                    agree_hist=extras["agree_hist"], regimes=extras["regimes"],
                    inner_products=extras["inner_products"])
    if rec.status == "ok":
        rec.reports = [MetricsReport.from_row(r) for r in read_metrics_csv(run_dir / "metrics.csv")]
        rec.paths = {
            "theta0": str(run_dir.parent.parent / f"seed_{rec.seed}" / "theta0.json"),
            "theta_ideal": str(run_dir.parent.parent / f"seed_{rec.seed}" / "theta_ideal.json"),
            "theta_unlearned": str(run_dir / "theta_unlearned.json"),
        }
    return rec


def config_from_manifest(manifest: dict) -> ExperimentConfig:
    d = dict(manifest["config"])
    d.update(methods=[manifest["method"]], addons=[manifest["addon"]], seeds=[manifest["seed"]])
    return ExperimentConfig.from_dict(d)


def rerun_manifest(manifest: dict, out) -> RunRecord:
    """Reproduce one run from its manifest into a fresh output directory."""
    cfg = config_from_manifest(manifest).validate()
    out = Path(out)
    s = manifest["seed"]
    return _run_and_store(cfg, s, manifest["method"], manifest["addon"], out, *prepare_seed(cfg, s, out))


def _job(cfg_dict, seed, method, addon, out):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    out = Path(out)
    split, theta0, theta_ideal = prepare_seed(cfg, seed, out)
    return _run_and_store(cfg, seed, method, addon, out, split, theta0, theta_ideal)


def _run_and_store(cfg, seed, method, addon, out, split, theta0, theta_ideal) -> RunRecord:
    manifest = manifest_for(cfg, seed, method, addon)
    run_dir = out / "runs" / run_id_for(manifest)
    if (run_dir / "DONE").exists():
        log.info("skipping completed run %s", run_dir.name)
        return load_run(run_dir)
    try:
        rec = execute_run(cfg, seed, method, addon, split, theta0, theta_ideal)
    except Exception as exc:  # recorded, the sweep carries on
        log.error("run %s/%s seed %s failed: %s", method, addon, seed, exc)
        rec = RunRecord(run_id_for(manifest), manifest, status="failed", error=f"{type(exc).__name__}: {exc}")
    _write_run(run_dir, cfg, rec)
    return load_run(run_dir)


def run_sweep(cfg: ExperimentConfig, out=None) -> list[RunRecord]:
    """Every (seed, method, add-on) triple; results persisted under ``out``."""
    cfg.validate()
    out = Path(cfg.output_dir if out is None else out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(dump_config(cfg))
    jobs = [(s, m, a) for s in cfg.seeds for m in cfg.methods for a in cfg.addons]
    if cfg.workers > 1:
        for s in cfg.seeds:
            prepare_seed(cfg, s, out)
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(_job, cfg.to_dict(), s, m, a, str(out)) for s, m, a in jobs]
            records = [f.result() for f in futures]
    else:
        records, cache = [], {}
        for s, m, a in jobs:
            if s not in cache:
                cache = {s: prepare_seed(cfg, s, out)}
            records.append(_run_and_store(cfg, s, m, a, out, *cache[s]))
    write_aggregate(out, records)
    return records


def load_records(out) -> list[RunRecord]:
    runs = Path(out) / "runs"
    if not runs.exists():
        return []
    return [load_run(d) for d in sorted(runs.iterdir()) if (d / "DONE").exists()]


# ---------------------------------------------------------------- aggregation

AGG_METRICS = list(CSV_COLUMNS[5:])


def _mean_std(values):
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def aggregate_rows(rows: list[dict], epoch: int | None = None) -> list[dict]:
    """Mean and std over seeds per (method, add-on) at ``epoch`` (default: last)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["method"], r["addon"]), []).append(r)
    table = []
    for (method, addon), rs in groups.items():
        e = max(r["epoch"] for r in rs) if epoch is None else epoch
        sel = sorted((r for r in rs if r["epoch"] == e), key=lambda r: r["seed"])
        entry = {"method": method, "addon": addon, "epoch": e, "n": len(sel)}
        for m in AGG_METRICS:
            entry[f"{m}_mean"], entry[f"{m}_std"] = _mean_std([r[m] for r in sel])
        table.append(entry)
    by_method = {(t["method"], t["addon"]): t for t in table}
    for t in table:
        base = by_method.get((t["method"], "none"))
        ok = base is not None and base["rte_seconds_mean"] > 0
        t["rte_ratio_vs_none"] = t["rte_seconds_mean"] / base["rte_seconds_mean"] if ok else float("nan")
    order = {a: i for i, a in enumerate(ADDONS)}
    table.sort(key=lambda t: (t["method"], order.get(t["addon"], 99)))
    return table


def aggregate_records(records: list[RunRecord], epoch=None) -> list[dict]:
    return aggregate_rows([row for r in records if r.status == "ok" for row in r.rows()], epoch)


def aggregate_from_dir(out, epoch=None) -> list[dict]:
    """Same table recomputed from the per-run CSV files alone."""
    rows = []
    for d in sorted((Path(out) / "runs").iterdir()):
        if (d / "metrics.csv").exists():
            rows.extend(read_metrics_csv(d / "metrics.csv"))
    return aggregate_rows(rows, epoch)


def format_table(table: list[dict], metrics=("mia_entropy", "rua", "ta", "ra", "ua", "fid")) -> str:
    head = ["method", "addon", "n"] + list(metrics) + ["rte_ratio"]
    body = []
    for t in table:
        cells = [t["method"], t["addon"], str(t["n"])]
        for m in metrics:
            cells.append(f"{t[f'{m}_mean']:.2f} ± {t[f'{m}_std']:.2f}")
        r = t["rte_ratio_vs_none"]
        cells.append("-" if math.isnan(r) else f"{r:.2f}")
        body.append(cells)
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [head] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_aggregate(out, records=None, table=None) -> list[dict]:
    """Write ``aggregate.csv`` and ``aggregate.txt`` from records or a ready table."""
    table = aggregate_records(records) if table is None else table
    if not table:
        return table
    out = Path(out)
    cols = list(table[0].keys())
    with open(out / "aggregate.csv", "w") as fh:
        fh.write(",".join(cols) + "\n")
        for t in table:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in (t[c] for c in cols)) + "\n")
    text = format_table(table)
    text += f"\nrte_ratio: add-on RTE over the same method without add-on " \
            f"(reference overhead for the focus add-on on CIFAR-scale models: +{REFERENCE_FOCUS_RTE_OVERHEAD:.0%})\n"
    (out / "aggregate.txt").write_text(text)
    return table


# ---------------------------------------------------------------- figures

FIGURE_METRICS = ("ua", "ra", "ta", "rua", "fid", "mia_entropy", "mia_mix_entropy", "rte_seconds")


def emit_figures(records: list[RunRecord], out_dir) -> dict:
    """Plot-ready CSVs with columns ``x, series, mean, std``.

    One file per metric against epoch, plus ``fig_agree_prob_hist.csv`` with
    the mid-run agreement-probability histogram (x = bin centre). Returns the
    written paths and the regime counts of each series.
    """
    ok = [r for r in records if r.status == "ok"]
    if not ok:
        raise ValueError("no completed runs to plot")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    series: dict = {}
    for r in ok:
        series.setdefault(f"{r.method}-{r.addon}", []).append(r)
    paths = {}
    for m in FIGURE_METRICS:
        lines = ["x,series,mean,std"]
        for name, recs in series.items():
            n_epochs = min(len(r.reports) for r in recs)
            for e in range(n_epochs):
                mean, std = _mean_std([r.rows()[e][m] for r in recs])
                lines.append(f"{e},{name},{mean!r},{std!r}")
        p = out / f"fig_{m}.csv"
        p.write_text("\n".join(lines) + "\n")
        paths[m] = p
    lines = ["x,series,mean,std"]
    regimes = {}
    for name, recs in series.items():
        hists = [r.agree_hist for r in recs if r.agree_hist]
        if not hists:
            continue
        h = np.array(hists, dtype=np.float64)
        bins = h.shape[1]
        centers = (np.arange(bins) + 0.5) / bins
        for c, col in zip(centers, h.T):
            mean, std = _mean_std(col)
            lines.append(f"{c!r},{name},{mean!r},{std!r}")
        regimes[name] = {k: float(np.mean([r.regimes[k] for r in recs if r.regimes]))
                         for k in ("disagree", "uncertain", "agree")}
        log.info("agreement regimes for %s: %s", name, regimes[name])
    p = out / "fig_agree_prob_hist.csv"
    p.write_text("\n".join(lines) + "\n")
    paths["agree_prob_hist"] = p
    (out / "agree_prob_regimes.json").write_text(json.dumps(regimes, indent=1))
    return {"paths": paths, "regimes": regimes}
