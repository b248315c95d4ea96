"""Experiment runner, report files, checkpoints and table reproduction."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import statistics
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .anderson import restarted_anderson_train
from .errors import ShapeMismatch
from .mnist_io import Dataset, load_mnist
from .optimizer import HistoryRow, TrainConfig, make_model, train_sgd

log = logging.getLogger(__name__)

DATA_DIR_ENV = "ANDERSON_NN_DATA_DIR"
CSV_COLUMNS = ("epoch", "phase", "train_acc", "eval_acc", "mse_loss", "ce_loss", "wall_s")
DTYPES = {"float64": np.float64, "float32": np.float32}

# Reference accuracy (%) per table: budget -> (standard, anderson).
REFERENCE_TABLES = {
    "table1": {4: (57.94, 60.14), 8: (60.74, 81.04), 20: (86.52, 91.12), 40: (87.00, 92.28),
               100: (91.28, 94.02), 500: (97.86, 99.52), 1000: (99.64, 99.46)},
    "table2": {4: (99.31, 99.41), 8: (99.83, 99.83)},
    "table3": {4: (97.28, 97.69), 8: (97.87, 98.02)},
}
TABLE_SETUPS = {
    "table1": dict(model="dnn", n_train_subset=5000, eval_target="self"),
    "table2": dict(model="cnn", n_train_subset=60000, eval_target="self"),
    "table3": dict(model="cnn", n_train_subset=60000, eval_target="test"),
}


@dataclass
class ExperimentSpec:
    model: str = "dnn"
    data_dir: str | None = None
    n_train_subset: int = 5000
    eval_target: str = "self"
    accel: str = "none"
    window: int = 4
    rounds: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    init_scheme: str = "he"
    bn_eval_mode: str = "running"
    safeguard: bool = False
    dtype: str = "float64"
    out: str | None = None
    checkpoint_dir: str | None = None
    checkpoint_interval: int = 0
    # zero out wall times so identical runs give identical report bytes
    reference_mode: bool = False

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if self.model not in ("dnn", "mlp", "cnn"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.eval_target not in ("self", "test"):
            raise ValueError(f"unknown eval target {self.eval_target!r}")
        if self.accel not in ("none", "diagonal", "coupled", "rom"):
            raise ValueError(f"unknown accel {self.accel!r}")
        if self.dtype not in DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        if self.accel != "none" and self.window * self.rounds > self.train.max_epochs:
            raise ValueError("window * rounds exceeds max_epochs")

    def fingerprint(self) -> str:
        d = asdict(self)
        for k in ("data_dir", "out", "checkpoint_dir"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunReport:
    fingerprint: str
    rows: list
    summary: dict = field(default_factory=dict)
    params: dict | None = field(default=None, repr=False)


def resolve_data_dir(data_dir: str | None) -> str:
    data_dir = data_dir or os.environ.get(DATA_DIR_ENV)
    if not data_dir:
        raise FileNotFoundError(f"no MNIST directory given (pass --data-dir or set {DATA_DIR_ENV})")
    return data_dir


def load_datasets(spec: ExperimentSpec) -> tuple[Dataset, Dataset]:
    data_dir = resolve_data_dir(spec.data_dir)
    dtype = DTYPES[spec.dtype]
    train = load_mnist(data_dir, "train", spec.n_train_subset, dtype=dtype)
    if spec.eval_target == "self":
        return train, train
    return train, load_mnist(data_dir, "test", dtype=dtype)


def run_experiment(spec: ExperimentSpec, train_set: Dataset | None = None, eval_set: Dataset | None = None,
                   params: dict | None = None) -> RunReport:
    """Train per ``spec`` and collect one report row per epoch and per Anderson update.

    Datasets are read from ``spec.data_dir`` unless given directly.
    """
    if train_set is None:
        train_set, eval_set = load_datasets(spec)
    elif eval_set is None:
        eval_set = train_set
    model = make_model(spec.model, bn_eval_mode=spec.bn_eval_mode, init_scheme=spec.init_scheme,
                       dtype=DTYPES[spec.dtype])
    if params is None:
        params = model.init(spec.train.seed)

    def on_event(row: HistoryRow, p):
        log.info("epoch %d %s train=%.4f eval=%.4f", row.epoch, row.phase, row.train_accuracy, row.eval_accuracy)
        if spec.checkpoint_dir and spec.checkpoint_interval and row.epoch % spec.checkpoint_interval == 0:
            os.makedirs(spec.checkpoint_dir, exist_ok=True)
            checkpoint_save(p, os.path.join(spec.checkpoint_dir, f"epoch{row.epoch:05d}-{row.phase}.ckpt"),
                            model=model.name)

    if spec.accel == "none":
        params, rows = train_sgd(params, train_set, spec.train, model, eval_dataset=eval_set, on_epoch=on_event)
    else:
        params, rows = restarted_anderson_train(spec.train, train_set, model, spec.accel, spec.window, spec.rounds,
                                                spec.safeguard, params=params, eval_dataset=eval_set,
                                                on_event=on_event)
    if spec.reference_mode:
        for r in rows:
            r.wall_seconds = 0.0
    last = rows[-1] if rows else None
    summary = {
        "model": spec.model,
        "accel": spec.accel,
        "seed": spec.train.seed,
        "epochs_run": last.epoch if last else 0,
        "final_eval_acc": last.eval_accuracy if last else None,
        "final_train_acc": last.train_accuracy if last else None,
        "stopped_early": bool(last and last.eval_accuracy >= spec.train.stop_accuracy),
        "alphas": [list(r.alpha) for r in rows if r.alpha is not None],
    }
    return RunReport(spec.fingerprint(), rows, summary, params)


# ------------------------------------------------------------------ reports

def _row_values(r: HistoryRow):
    return (r.epoch, r.phase, r.train_accuracy, r.eval_accuracy, r.mse_loss, r.ce_loss, r.wall_seconds)


def emit_report(report: RunReport, fmt: str = "csv") -> bytes:
    """CSV with columns epoch,phase,train_acc,eval_acc,mse_loss,ce_loss,wall_s, or the JSON mirror."""
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in report.rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in _row_values(r)])
        return buf.getvalue().encode()
    if fmt == "json":
        doc = {
            "fingerprint": report.fingerprint,
            "columns": list(CSV_COLUMNS),
            "rows": [dict(zip(CSV_COLUMNS, _row_values(r))) for r in report.rows],
            "summary": report.summary,
        }
        return (json.dumps(doc, indent=1) + "\n").encode()
    raise ValueError(f"unknown report format {fmt!r}")


def parse_csv_report(data: bytes) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(data.decode())))
    for r in rows:
        r["epoch"] = int(r["epoch"])
        for k in CSV_COLUMNS[2:]:
            r[k] = float(r[k])
    return rows


def parse_json_report(data: bytes) -> dict:
    return json.loads(data.decode())


# -------------------------------------------------------------- checkpoints
#
# Layout (little-endian):
#   magic b"ANNCKPT\0" | u32 version | u16 len + model name | u32 tensor count
#   per tensor: u16 len + name | u8 dtype code | u8 ndim | ndim x u64 dims | raw data
#   u32 CRC-32 of everything before it

CKPT_MAGIC = b"ANNCKPT\0"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


class VersionMismatch(CheckpointError):
    pass


def checkpoint_save(params: dict, path: str, model: str = "") -> None:
    out = bytearray(CKPT_MAGIC)
    name_b = model.encode()
    out += struct.pack("<IH", CKPT_VERSION, len(name_b)) + name_b
    out += struct.pack("<I", len(params))
    for name, a in params.items():
        a = np.ascontiguousarray(a)
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BB", _DTYPE_CODES[a.dtype], a.ndim)
        out += struct.pack(f"<{a.ndim}Q", *a.shape)
        out += a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(out)
    os.replace(tmp, path)


def checkpoint_load(path: str, expected: dict | None = None) -> dict:
    """Read a checkpoint; with ``expected`` (a params template) names and shapes must match."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(CKPT_MAGIC) + 14 or not data.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    pos = len(CKPT_MAGIC)
    version, nlen = struct.unpack_from("<IH", body, pos)
    if version != CKPT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {CKPT_VERSION}")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: truncated or corrupt (checksum mismatch)")
    try:
        pos += 6 + nlen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2:pos + 2 + ln].decode()
            pos += 2 + ln
            code, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            dtype = _CODE_DTYPES[code]
            n = int(np.prod(shape)) * dtype.itemsize
            if pos + n > len(body):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            params[name] = np.frombuffer(body, dtype=dtype.newbyteorder("<"), count=n // dtype.itemsize,
                                         offset=pos).astype(dtype).reshape(shape)
            pos += n
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint ({e})") from None
    if expected is not None:
        want = {k: v.shape for k, v in expected.items()}
        got = {k: v.shape for k, v in params.items()}
        if want != got:
            raise ShapeMismatch(f"{path}: checkpoint tensors {got} do not match model {want}")
    return params


# ------------------------------------------------------------------- tables

TABLE_BUDGETS = {name: sorted(cells) for name, cells in REFERENCE_TABLES.items()}


def _accuracy_at(rows, budget: int, phase: str) -> float:
    """Eval accuracy of the ``phase`` row at ``budget``; the last row if the run stopped before."""
    hits = [r for r in rows if r.epoch == budget and r.phase == phase]
    if hits:
        return hits[-1].eval_accuracy
    earlier = [r for r in rows if r.epoch <= budget]
    return earlier[-1].eval_accuracy


@dataclass
class TableCell:
    table: str
    budget: int
    column: str  # "standard" or "anderson-<method>"
    values: list
    reference: float

    @property
    def mean(self):
        return statistics.fmean(self.values)

    @property
    def median(self):
        return statistics.median(self.values)

    @property
    def min(self):
        return min(self.values)

    @property
    def max(self):
        return max(self.values)


@dataclass
class TableReport:
    table: str
    seeds: list
    cells: list
    runs: dict = field(default_factory=dict)

    def cell(self, budget: int, column: str) -> TableCell:
        for c in self.cells:
            if c.budget == budget and c.column == column:
                return c
        raise KeyError((budget, column))

    def to_csv(self) -> bytes:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["table", "epochs", "column", "n_seeds", "mean", "median", "min", "max", "reference"])
        for c in self.cells:
            w.writerow([c.table, c.budget, c.column, len(c.values), f"{100 * c.mean:.2f}",
                        f"{100 * c.median:.2f}", f"{100 * c.min:.2f}", f"{100 * c.max:.2f}", f"{c.reference:.2f}"])
        return buf.getvalue().encode()

    def to_json(self) -> bytes:
        doc = {
            "table": self.table,
            "seeds": self.seeds,
            "cells": [dict(epochs=c.budget, column=c.column, values=c.values, mean=c.mean, median=c.median,
                           min=c.min, max=c.max, reference=c.reference) for c in self.cells],
        }
        return (json.dumps(doc, indent=1) + "\n").encode()


def table_suite(which: str, seeds, data_dir: str | None = None, methods=("diagonal", "coupled"),
                dtype: str = "float64", bn_eval_mode: str = "running", budgets=None,
                datasets: tuple[Dataset, Dataset] | None = None, train: TrainConfig | None = None,
                n_train: int | None = None) -> TableReport:
    """Standard vs restarted-Anderson accuracy at each of a table's epoch budgets.

    Each (column, seed) is a single run to the largest budget; smaller budgets
    are read off that run (the shuffle of every epoch depends only on seed and
    epoch, so a shorter run is a prefix of the longer one).
    """
    if which not in REFERENCE_TABLES:
        raise ValueError(f"unknown table {which!r}")
    seeds = list(seeds)
    budgets = list(budgets or TABLE_BUDGETS[which])
    top = max(budgets)
    setup = dict(TABLE_SETUPS[which])
    if n_train is not None:
        setup["n_train_subset"] = n_train
    base = ExperimentSpec(data_dir=data_dir, dtype=dtype, bn_eval_mode=bn_eval_mode, **setup)
    if datasets is None:
        datasets = load_datasets(base)
    train_set, eval_set = datasets
    train = train or TrainConfig()
    values: dict[str, list] = {}
    runs = {}
    columns = [("standard", "none")] + [(f"anderson-{m}", m) for m in methods]
    for column, accel in columns:
        for seed in seeds:
            cfg = TrainConfig(**{**asdict(train), "seed": seed, "epochs": top, "max_epochs": max(top, train.max_epochs)})
            spec = ExperimentSpec(**{**asdict(base), "train": cfg, "accel": accel,
                                     "rounds": top // base.window if accel != "none" else 1})
            report = run_experiment(spec, train_set, eval_set)
            runs[(column, seed)] = report
            phase = "sgd" if accel == "none" else "anderson"
            for b in budgets:
                values.setdefault((column, b), []).append(_accuracy_at(report.rows, b, phase))
            log.info("%s %s seed %d done", which, column, seed)
    cells = []
    for b in budgets:
        std, anderson = REFERENCE_TABLES[which].get(b, (float("nan"), float("nan")))
        for column, _ in columns:
            cells.append(TableCell(which, b, column, values[(column, b)], std if column == "standard" else anderson))
    return TableReport(which, seeds, cells, runs)
