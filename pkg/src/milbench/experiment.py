"""Train-size sweep: learned MIL pooling vs. the Bayes oracle."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .bayes import oracle_scores
from .errors import ConfigError, DataMismatchError
from .metrics import auprc, auroc
from .model import VALID_METHODS, ModelConfig, grid_search, predict
from .numerics import SeededRng
from .synthgen import GeneratorParams, SplitSpec, sample_dataset, split

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

DEFAULT_LRS = (0.1, 0.01, 0.001, 0.0001)
DEFAULT_REGS = (1.0, 0.1, 0.01, 0.001, 0.0001, 1e-5, 1e-6, 0.0)
DEFAULT_SIZES = (100, 200, 500, 1000, 2000, 5000, 10000)
ORACLE = ("oracle", "bayes")
DEFAULT_METHODS = (ORACLE, ("embedding", "mean"), ("embedding", "smap"), ("embedding", "transmil"))


@dataclass
class ExperimentConfig:
    generator: GeneratorParams = field(default_factory=GeneratorParams)
    sizes: tuple = DEFAULT_SIZES
    test_size: int = 1000
    methods: tuple = DEFAULT_METHODS
    lrs: tuple = DEFAULT_LRS
    regs: tuple = DEFAULT_REGS
    seeds: tuple = (0, 1, 2)
    data_seed: int = 0  # test-set stream
    train_fraction: float = 0.8
    model: dict = field(default_factory=lambda: {"epochs": 1000, "batch_size": 64, "reg_kind": "l2"})
    output_dir: str = "results"
    threads: int = 1

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.methods = tuple(tuple(m) for m in self.methods)
        self.lrs, self.regs = tuple(self.lrs), tuple(self.regs)
        if list(self.sizes) != sorted(self.sizes) or not self.sizes:
            raise ConfigError("sizes must be non-empty and ascending")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        for m in self.methods:
            if m not in VALID_METHODS and m != ORACLE:
                raise ConfigError(f"invalid method {m}")
        self.model_config("embedding", "mean")  # validates model overrides

    def model_config(self, ordering: str, pooling: str, seed: int = 0) -> ModelConfig:
        try:
            return ModelConfig(ordering=ordering, pooling=pooling, init_seed=seed, **self.model)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def to_dict(self) -> dict:
        d = asdict(self)
        d["generator"] = self.generator.to_dict()
        d["sizes"], d["seeds"] = list(self.sizes), list(self.seeds)
        d["methods"] = [list(m) for m in self.methods]
        d["lrs"], d["regs"] = list(self.lrs), list(self.regs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "generator" in d:
            d["generator"] = GeneratorParams(**{**GeneratorParams().to_dict(), **d["generator"]})
        if "model" in d:
            d["model"] = {**cls().model, **d["model"]}
        return cls(**d)

    def hash(self) -> str:
        """Identity of the sweep's results: excludes output location and worker count."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("threads")
        d["version"] = __version__
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if path.suffix == ".toml":
        with open(path, "rb") as f:
            return ExperimentConfig.from_dict(tomllib.load(f))
    return ExperimentConfig.from_dict(json.loads(path.read_text()))


@dataclass
class ResultRow:
    method: str
    ordering: str
    train_size: int
    seed: int
    test_auroc: float
    test_auprc: float
    wall_time_s: float
    best_lr: Optional[float] = None
    best_reg: Optional[float] = None

    @property
    def key(self) -> tuple:
        return (self.method, self.ordering, self.train_size, self.seed)


RESULT_COLUMNS = tuple(f.name for f in fields(ResultRow))


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def append_rows(path, rows: Sequence[ResultRow]) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([_fmt(getattr(r, c)) for c in RESULT_COLUMNS])


def read_rows(path) -> list[ResultRow]:
    path = Path(path)
    if not path.exists():
        return []
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            opt = lambda s: float(s) if s else None
            rows.append(ResultRow(rec["method"], rec["ordering"], int(rec["train_size"]), int(rec["seed"]),
                                  float(rec["test_auroc"]), float(rec["test_auprc"]), float(rec["wall_time_s"]),
                                  opt(rec["best_lr"]), opt(rec["best_reg"])))
    return rows


def make_test_set(config: ExperimentConfig):
    return sample_dataset(config.generator, config.test_size, SeededRng(config.data_seed, stream=2))


def train_pool(config: ExperimentConfig, seed: int, n: int):
    """First ``n`` bags of the seed's training pool (prefix-stable across n)."""
    return sample_dataset(config.generator, n, SeededRng(seed, stream=1))


def split_for(config: ExperimentConfig, pool, seed: int, size: int):
    rng = SeededRng(seed, stream=3).child(size)
    return split(pool, SplitSpec(config.train_fraction, seed, config.test_size), rng)


def bayes_row(test, config: ExperimentConfig, size: int, seed: int) -> ResultRow:
    t0 = time.perf_counter()
    scores = oracle_scores(test, config.generator)
    y = [b.label for b in test]
    return ResultRow("bayes", "oracle", size, seed, auroc(scores, y), auprc(scores, y), time.perf_counter() - t0)


def run_method(config: ExperimentConfig, ordering: str, pooling: str, size: int, seed: int,
               train, val, test) -> ResultRow:
    t0 = time.perf_counter()
    base = config.model_config(ordering, pooling, seed)
    best_cfg, ckpt = grid_search(config.lrs, config.regs, train, val, base, workers=config.threads)
    probs = predict(best_cfg, ckpt.params, test)
    y = [b.label for b in test]
    return ResultRow(pooling, ordering, size, seed, auroc(probs, y), auprc(probs, y),
                     time.perf_counter() - t0, best_cfg.lr, best_cfg.reg_strength)


def write_manifest(out: Path, config: ExperimentConfig) -> None:
    manifest = {"config": config.to_dict(), "config_hash": config.hash(), "version": __version__,
                "numpy": np.__version__, "seeds": list(config.seeds)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run_sweep(config: ExperimentConfig, resume: bool = False) -> list[ResultRow]:
    """Run (or finish) the sweep; returns all rows in results.csv.

    Rows already present in ``results.csv`` are skipped when ``resume`` is
    set and the stored manifest matches this config's hash.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = out / "results.csv"
    manifest = out / "manifest.json"
    if resume and manifest.exists():
        stored = json.loads(manifest.read_text())["config_hash"]
        if stored != config.hash():
            raise DataMismatchError(f"{manifest} was written for config {stored}, not {config.hash()}")
    elif results.exists():
        results.unlink()
        (out / "failures.csv").unlink(missing_ok=True)
    write_manifest(out, config)
    done = {r.key for r in read_rows(results)}

    n_grid = len(config.lrs) * len(config.regs)
    learned = [m for m in config.methods if m != ORACLE]
    total = len(learned) * len(config.sizes) * len(config.seeds) * n_grid
    finished = sum(n_grid for k in done if k[0] != "bayes")
    log.info("sweep %s: %d training runs total, %d already done", config.hash(), total, finished)

    test = None
    for seed in config.seeds:
        pending = [(size, o, p) for size in config.sizes for o, p in config.methods
                   if (p, o, size, seed) not in done]
        if not pending:
            continue
        test = test if test is not None else make_test_set(config)
        pool = train_pool(config, seed, config.sizes[-1]) if learned else None
        for size, ordering, pooling in pending:
            if pooling == "bayes":
                append_rows(results, [bayes_row(test, config, size, seed)])
                continue
            try:
                train, val = split_for(config, pool[:size], seed, size)
                row = run_method(config, ordering, pooling, size, seed, train, val, test)
            except Exception as e:  # record and keep sweeping
                log.exception("run %s/%s size=%d seed=%d failed", pooling, ordering, size, seed)
                _record_failure(out, pooling, ordering, size, seed, e)
                continue
            append_rows(results, [row])
            finished += n_grid
            log.info("[%d/%d] %s/%s size=%d seed=%d test AUROC %.4f (%.1fs)", finished, total, pooling,
                     ordering, size, seed, row.test_auroc, row.wall_time_s)
        del pool
    rows = read_rows(results)
    write_plot_data(out, rows)
    return rows


def _record_failure(out: Path, pooling, ordering, size, seed, err) -> None:
    path = out / "failures.csv"
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(["method", "ordering", "train_size", "seed", "status"])
        w.writerow([pooling, ordering, size, seed, f"{type(err).__name__}: {err}"])


def curves(rows: Sequence[ResultRow]) -> dict:
    """{(method, ordering): [(size, mean_auroc, std_auroc), ...]} over seeds."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.method, r.ordering), {}).setdefault(r.train_size, []).append(r.test_auroc)
    return {k: [(s, float(np.mean(v)), float(np.std(v))) for s, v in sorted(by_size.items())]
            for k, by_size in groups.items()}


def write_plot_data(out, rows: Sequence[ResultRow]) -> list[Path]:
    paths = []
    for (method, ordering), pts in sorted(curves(rows).items()):
        path = Path(out) / f"plot_{method}_{ordering}.tsv"
        with open(path, "w") as f:
            f.write("size\tmean_auroc\tstd_auroc\n")
            for s, mu, sd in pts:
                f.write(f"{s}\t{mu!r}\t{sd!r}\n")
        paths.append(path)
    return paths


def summary(rows: Sequence[ResultRow]) -> dict:
    out = {}
    for (method, ordering), pts in sorted(curves(rows).items()):
        out[f"{method}/{ordering}"] = {str(s): {"mean_auroc": mu, "std_auroc": sd} for s, mu, sd in pts}
    return out


def rows_equal_ignoring_time(a: Path, b: Path) -> bool:
    def strip(path):
        with open(path, newline="") as f:
            recs = list(csv.reader(f))
        i = recs[0].index("wall_time_s")
        return [r[:i] + r[i + 1:] for r in recs]
    return strip(a) == strip(b)
