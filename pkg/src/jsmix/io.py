"""File formats: capture and occasion CSVs, run configuration, fit outputs."""
from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import InputError
from .kernels import BACKEND
from .model import UNIT_DAYS, CaptureData, ModelSpec, TimeGrid, build_time_grid
from .priors import PriorConfig
from .sampler import DrawStore, McmcConfig


# -- capture histories ----------------------------------------------------------

def read_capture_csv(path) -> CaptureData:
    """Read ``id,t1..tT`` rows of 0/1 detections.

    Raises
    ------
    InputError
        Ragged rows, non-binary cells, duplicate ids, all-zero rows or an
        empty data section, each naming the offending row and column.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"capture file not found: {path}")
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise InputError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2 or header[0].lower() != "id":
        raise InputError(f"{path}: header must be id,t1..tT")
    T = len(header) - 1
    body = rows[1:]
    if not body:
        raise InputError(f"{path}: no capture histories")
    ids, mat, seen = [], np.zeros((len(body), T), dtype=np.uint8), {}
    for i, row in enumerate(body):
        line = i + 2
        if len(row) != T + 1:
            raise InputError(f"{path}: line {line} has {len(row) - 1} occasions, expected {T}")
        rid = row[0].strip()
        if rid in seen:
            raise InputError(f"{path}: duplicate id {rid!r} on lines {seen[rid]} and {line}")
        seen[rid] = line
        ids.append(rid)
        for j, cell in enumerate(row[1:]):
            v = cell.strip()
            if v not in ("0", "1"):
                raise InputError(f"{path}: line {line}, column {header[j + 1]!r}: cell {v!r} is not 0/1")
            mat[i, j] = v == "1"
        if not mat[i].any():
            raise InputError(f"{path}: line {line} (id {rid!r}) has no captures")
    return CaptureData(mat, n_augmented=0, ids=ids)


def write_capture_csv(path, data: CaptureData) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"t{t + 1}" for t in range(data.T)])
        for rid, row in zip(data.ids, data.observed):
            w.writerow([rid] + [int(x) for x in row])


# -- occasions ------------------------------------------------------------------

@dataclass
class Occasions:
    offsets: np.ndarray
    dates: list | None = None

    def calendar_years(self) -> list[int]:
        if self.dates is None:
            raise InputError("yearly summaries from dates need a dated occasions file")
        return [d.year for d in self.dates]


def read_occasions_csv(path) -> Occasions:
    """Read ``t,day_offset`` or ``t,date`` (ISO) rows, one per occasion."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"occasions file not found: {path}")
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if len(rows) < 2:
        raise InputError(f"{path}: no occasions")
    header = [h.strip().lower() for h in rows[0]]
    if len(header) != 2 or header[0] != "t" or header[1] not in ("day_offset", "date"):
        raise InputError(f"{path}: header must be t,day_offset or t,date")
    dated = header[1] == "date"
    idx, values = [], []
    for i, row in enumerate(rows[1:]):
        line = i + 2
        if len(row) != 2:
            raise InputError(f"{path}: line {line} must have 2 fields")
        try:
            t = int(row[0])
        except ValueError:
            raise InputError(f"{path}: line {line}: occasion index {row[0]!r} is not an integer") from None
        if t in idx:
            raise InputError(f"{path}: line {line}: duplicate occasion index {t}")
        try:
            val = _dt.date.fromisoformat(row[1].strip()) if dated else float(row[1])
        except ValueError:
            raise InputError(f"{path}: line {line}: cannot parse {row[1]!r}") from None
        idx.append(t)
        values.append(val)
    if idx != list(range(1, len(idx) + 1)):
        raise InputError(f"{path}: occasion indices must run 1..T in order")
    if dated:
        offsets = np.array([(d - values[0]).days for d in values], dtype=float)
    else:
        offsets = np.array(values, dtype=float)
    if np.any(np.diff(offsets) <= 0):
        bad = int(np.argmax(np.diff(offsets) <= 0)) + 2
        raise InputError(f"{path}: occasion {bad} is not after occasion {bad - 1}")
    return Occasions(offsets=offsets, dates=values if dated else None)


def write_occasions_csv(path, grid: TimeGrid) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "day_offset"])
        for t, off in enumerate(grid.occasion_times):
            w.writerow([t + 1, _num(off)])


# -- configuration --------------------------------------------------------------

@dataclass
class RunConfig:
    data: str | None = None
    occasions: str | None = None
    model: object = "rpt"
    priors: dict = field(default_factory=dict)
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    unit: str = "month"
    augment: int = 500
    calendar: object = None
    out: str = "fit"
    jobs: int = 1

    def __post_init__(self):
        if self.augment < 0:
            raise InputError("augmentation size must be non-negative")
        if self.unit not in UNIT_DAYS:
            raise InputError(f"unknown time unit {self.unit!r}")
        if self.jobs < 1:
            raise InputError("jobs must be at least 1")
        self.model_spec()
        PriorConfig.from_dict(self.priors)

    def model_spec(self) -> ModelSpec:
        if isinstance(self.model, dict):
            return ModelSpec.from_dict(self.model)
        return ModelSpec.from_name(str(self.model))

    def prior_config(self) -> PriorConfig:
        return PriorConfig.from_dict(self.priors)

    def check_files(self) -> None:
        for label, p in (("data", self.data), ("occasions", self.occasions)):
            if p is None:
                raise InputError(f"no {label} file given")
            if not Path(p).exists():
                raise InputError(f"{label} file not found: {p}")

    def to_dict(self) -> dict:
        return {
            "data": self.data,
            "occasions": self.occasions,
            "model": self.model if isinstance(self.model, dict) else str(self.model),
            "priors": self.prior_config().to_dict(),
            "mcmc": self.mcmc.to_dict(),
            "unit": self.unit,
            "augment": self.augment,
            "calendar": self.calendar,
            "out": self.out,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        if "config" in data and "manifest_version" in data:
            data = dict(data["config"])
        known = {"data", "occasions", "model", "priors", "mcmc", "unit", "augment", "calendar", "out", "jobs"}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown configuration keys: {sorted(unknown)}")
        mcmc = data.pop("mcmc", None) or {}
        try:
            mc = McmcConfig(**mcmc)
        except TypeError as exc:
            raise InputError(f"bad mcmc settings: {exc}") from None
        return cls(mcmc=mc, **data)


def load_config(path) -> RunConfig:
    """Read a JSON run configuration, or the manifest of a previous fit."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise InputError(f"{path}: configuration must be a JSON object")
    return RunConfig.from_dict(data)


# -- outputs --------------------------------------------------------------------

def _num(x) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 2**53 else repr(x)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def versions() -> dict:
    return {
        "jsmix": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
        "kernels": BACKEND,
    }


def write_draws_csv(path, store: DrawStore, block: str) -> None:
    names = store.names[block]
    arr = store.blocks[block]
    iters = store.iterations
    with Path(path).open("w") as fh:
        fh.write("chain,iter,parameter,value\n")
        for c in range(arr.shape[0]):
            for k, name in enumerate(names):
                col = arr[c, :, k]
                fh.write("".join(f"{c + 1},{it},{name},{_num(v)}\n" for it, v in zip(iters, col)))


def write_outputs(store: DrawStore, summary, out_dir, config: dict, ids) -> dict:
    """Write a fit directory; identical inputs give identical bytes.

    Files: ``manifest.json``, ``draws_<block>.csv``, ``summary.json``,
    ``membership.csv``, ``waic.json`` and ``.npy`` arrays for reloading.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for block in store.names:
        name = f"draws_{block}.csv"
        write_draws_csv(out / name, store, block)
        np.save(out / f"draws_{block}.npy", store.blocks[block])
        files[block] = name
    np.save(out / "loglik_unique.npy", store.loglik_unique)
    np.save(out / "uidx.npy", store.uidx)
    np.save(out / "multiplicity.npy", store.multiplicity)
    if store.labels is not None:
        np.save(out / "latent_labels.npy", store.labels)
        np.save(out / "latent_entry.npy", store.entry)
        np.save(out / "latent_exit.npy", store.exit)
    (out / "summary.json").write_text(_dump_json(summary.to_dict()))
    (out / "membership.csv").write_text(summary.membership_csv(ids))
    (out / "waic.json").write_text(_dump_json(summary.waic))
    manifest = {
        "manifest_version": 1,
        "config": config,
        "config_hash": config_hash(config),
        "seeds": [int(s) for s in store.seeds],
        "versions": versions(),
        "model": store.spec.to_dict(),
        "grid": {"occasion_times": store.grid.occasion_times.tolist(), "unit": store.grid.unit},
        "names": store.names,
        "iterations": store.iterations.tolist(),
        "n_observed": int(store.n_observed),
        "ids": list(ids),
        "draw_files": files,
    }
    (out / "manifest.json").write_text(_dump_json(manifest))
    return manifest


def load_fit(fit_dir) -> tuple[DrawStore, dict]:
    """Rebuild the :class:`DrawStore` of a fit directory."""
    d = Path(fit_dir)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise InputError(f"{d} is not a fit directory (no manifest.json)")
    manifest = json.loads(mpath.read_text())
    spec = ModelSpec.from_dict(manifest["model"])
    grid = build_time_grid(manifest["grid"]["occasion_times"], manifest["grid"]["unit"])
    mc = dict(manifest["config"]["mcmc"])
    blocks = {b: np.load(d / f"draws_{b}.npy") for b in manifest["names"]}
    latent = (d / "latent_labels.npy").exists()
    store = DrawStore(
        spec=spec,
        grid=grid,
        mcmc=McmcConfig(**mc),
        seeds=manifest["seeds"],
        names=manifest["names"],
        blocks=blocks,
        loglik_unique=np.load(d / "loglik_unique.npy"),
        uidx=np.load(d / "uidx.npy"),
        multiplicity=np.load(d / "multiplicity.npy"),
        n_observed=manifest["n_observed"],
        labels=np.load(d / "latent_labels.npy") if latent else None,
        entry=np.load(d / "latent_entry.npy") if latent else None,
        exit=np.load(d / "latent_exit.npy") if latent else None,
        iterations=np.asarray(manifest["iterations"]),
    )
    return store, manifest


def write_json(path, obj) -> None:
    Path(path).write_text(_dump_json(obj))


def write_csv_rows(path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_num(x) if isinstance(x, (float, np.floating)) else x for x in r])
