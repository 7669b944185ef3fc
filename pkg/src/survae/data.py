"""Dataset ingestion, preprocessing, fold plans, and the synthetic generator."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import yaml

log = logging.getLogger(__name__)

KINDS = ("real", "binary", "categorical")


class DataError(ValueError):
    """Malformed dataset or schema file."""


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str
    k: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical" and (self.k is None or self.k < 2):
            raise DataError(f"feature {self.name!r}: categorical needs k >= 2")

    @property
    def n_params(self) -> int:
        return {"real": 2, "binary": 1, "categorical": self.k or 0}[self.kind]

    @property
    def input_width(self) -> int:
        return self.k if self.kind == "categorical" else 1


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[Feature, ...]
    time_column: str = "time"
    event_column: str = "event"
    time_unit: str = ""

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise DataError("feature names must be unique")
        if self.time_column in names or self.event_column in names:
            raise DataError("time/event columns cannot also be features")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def of_kind(self, kind: str) -> list[int]:
        return [i for i, f in enumerate(self.features) if f.kind == kind]

    def to_dict(self) -> dict:
        feats = []
        for f in self.features:
            entry = {"name": f.name, "kind": f.kind}
            if f.kind == "categorical":
                entry["k"] = f.k
            feats.append(entry)
        return {
            "features": feats,
            "time_column": self.time_column,
            "event_column": self.event_column,
            "time_unit": self.time_unit,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "FeatureSchema":
        try:
            feats = tuple(Feature(e["name"], e["kind"], e.get("k")) for e in raw["features"])
        except (KeyError, TypeError) as exc:
            raise DataError(f"schema: malformed feature entry ({exc})") from None
        return cls(
            feats,
            raw.get("time_column", "time"),
            raw.get("event_column", "event"),
            str(raw.get("time_unit", "")),
        )

    def digest(self) -> str:
        """Hash of the model-relevant part (the unit label is informational)."""
        d = self.to_dict()
        d.pop("time_unit")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def load_schema(path) -> FeatureSchema:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise DataError(f"{path}: schema must be a mapping")
    return FeatureSchema.from_dict(raw)


def save_schema(schema: FeatureSchema, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(schema.to_dict(), fh, sort_keys=False)


@dataclass(frozen=True)
class SurvivalRecord:
    x: tuple
    t: float
    d: int


@dataclass
class SurvivalData:
    """Column-oriented dataset.

    ``covariates`` holds reals and binaries as floats and categoricals as
    integer codes; ``levels`` maps each categorical feature to its level
    strings in code order.
    """

    schema: FeatureSchema
    covariates: np.ndarray
    times: np.ndarray
    events: np.ndarray
    levels: dict = field(default_factory=dict)
    raw_times: list | None = None
    name: str = ""

    def __post_init__(self):
        n = len(self.times)
        if self.covariates.shape != (n, len(self.schema.features)):
            raise DataError("covariate matrix does not match schema / record count")
        if np.any(self.times <= 0):
            raise DataError("times must be > 0")
        if not np.all((self.events == 0) | (self.events == 1)):
            raise DataError("events must be 0 or 1")

    def __len__(self) -> int:
        return len(self.times)

    def subset(self, idx) -> "SurvivalData":
        idx = np.asarray(idx, dtype=int)
        raw = [self.raw_times[i] for i in idx] if self.raw_times is not None else None
        return SurvivalData(
            self.schema, self.covariates[idx], self.times[idx], self.events[idx],
            self.levels, raw, self.name,
        )

    def records(self) -> Iterator[SurvivalRecord]:
        for x, t, d in zip(self.covariates, self.times, self.events):
            yield SurvivalRecord(tuple(x), float(t), int(d))

    @property
    def censored_fraction(self) -> float:
        return float(1.0 - self.events.mean())


def _parse_float(cell: str, row: int, col: str) -> float:
    cell = cell.strip()
    if cell == "" or cell.lower() in ("na", "nan", "null", "none"):
        raise DataError(f"row {row}, column {col!r}: missing value")
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: cannot parse {cell!r}") from None
    if not math.isfinite(v):
        raise DataError(f"row {row}, column {col!r}: non-finite value {cell!r}")
    return v


def load_dataset(csv_path, schema: FeatureSchema | str | Path, levels: dict | None = None) -> SurvivalData:
    """Read a CSV against a schema.

    Rows are numbered from 1 (the header is row 0).  Categorical levels are
    coded by first appearance unless ``levels`` (e.g. from a trained model)
    fixes the mapping.
    """
    if not isinstance(schema, FeatureSchema):
        schema = load_schema(schema)
    levels = {k: list(v) for k, v in (levels or {}).items()}
    fixed = set(levels)
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{csv_path}: empty file") from None
        needed = schema.names + [schema.time_column, schema.event_column]
        missing = [c for c in needed if c not in header]
        if missing:
            raise DataError(f"{csv_path}: missing columns {missing}")
        pos = {c: header.index(c) for c in needed}
        xs, ts, ds, raw_t = [], [], [], []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"row {row_no}: expected {len(header)} cells, got {len(row)}")
            t_cell = row[pos[schema.time_column]].strip()
            t = _parse_float(t_cell, row_no, schema.time_column)
            if t <= 0:
                raise DataError(f"row {row_no}, column {schema.time_column!r}: time must be > 0")
            d = _parse_float(row[pos[schema.event_column]], row_no, schema.event_column)
            if d not in (0.0, 1.0):
                raise DataError(f"row {row_no}, column {schema.event_column!r}: event must be 0 or 1, got {d:g}")
            x = []
            for f in schema.features:
                cell = row[pos[f.name]].strip()
                if f.kind == "categorical":
                    if cell == "":
                        raise DataError(f"row {row_no}, column {f.name!r}: missing value")
                    lv = levels.setdefault(f.name, [])
                    if cell not in lv:
                        if f.name in fixed:
                            raise DataError(f"row {row_no}, column {f.name!r}: unknown level {cell!r}")
                        lv.append(cell)
                        if len(lv) > f.k:
                            raise DataError(
                                f"row {row_no}, column {f.name!r}: more than k={f.k} levels"
                            )
                    x.append(float(lv.index(cell)))
                else:
                    v = _parse_float(cell, row_no, f.name)
                    if f.kind == "binary" and v not in (0.0, 1.0):
                        raise DataError(f"row {row_no}, column {f.name!r}: binary value must be 0 or 1")
                    x.append(v)
            xs.append(x)
            ts.append(t)
            ds.append(int(d))
            raw_t.append(t_cell)
    if not ts:
        raise DataError(f"{csv_path}: no records")
    return SurvivalData(
        schema,
        np.array(xs, dtype=np.float64).reshape(len(ts), len(schema.features)),
        np.array(ts),
        np.array(ds, dtype=int),
        levels,
        raw_t,
        Path(csv_path).stem,
    )


def write_dataset(data: SurvivalData, csv_path) -> None:
    s = data.schema
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(s.names + [s.time_column, s.event_column])
        for i in range(len(data)):
            row = []
            for j, f in enumerate(s.features):
                v = data.covariates[i, j]
                if f.kind == "categorical":
                    row.append(data.levels[f.name][int(v)])
                elif f.kind == "binary":
                    row.append(str(int(v)))
                else:
                    row.append(repr(float(v)))
            t = data.raw_times[i] if data.raw_times is not None else repr(float(data.times[i]))
            row += [t, str(int(data.events[i]))]
            w.writerow(row)


# -- preprocessing -----------------------------------------------------------


@dataclass
class Preprocessor:
    """Standardization statistics fitted on a training split.

    Real features are centred and scaled with the population (1/N) standard
    deviation; binaries pass through; categoricals are one-hot encoded.
    """

    schema: FeatureSchema
    means: np.ndarray
    stds: np.ndarray

    @property
    def input_width(self) -> int:
        return sum(f.input_width for f in self.schema.features)

    def transform(self, data: SurvivalData) -> "Encoded":
        if data.schema.digest() != self.schema.digest():
            raise DataError("dataset schema does not match the fitted preprocessor")
        s = self.schema
        real, binary, cat = s.of_kind("real"), s.of_kind("binary"), s.of_kind("categorical")
        x = data.covariates
        real_z = (x[:, real] - self.means) / self.stds
        blocks = []
        for j, f in enumerate(s.features):
            if f.kind == "real":
                blocks.append(real_z[:, [real.index(j)]])
            elif f.kind == "binary":
                blocks.append(x[:, [j]])
            else:
                blocks.append(np.eye(f.k)[x[:, j].astype(int)])
        inputs = np.hstack(blocks) if blocks else np.zeros((len(data), 0))
        return Encoded(
            inputs=inputs,
            real=real_z,
            binary=x[:, binary],
            categorical=x[:, cat].astype(int),
        )

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "stds": self.stds.tolist()}

    @classmethod
    def from_dict(cls, schema: FeatureSchema, raw: dict) -> "Preprocessor":
        return cls(schema, np.array(raw["means"], dtype=np.float64), np.array(raw["stds"], dtype=np.float64))


@dataclass
class Encoded:
    inputs: np.ndarray
    real: np.ndarray
    binary: np.ndarray
    categorical: np.ndarray

    def rows(self, idx) -> "Encoded":
        return Encoded(self.inputs[idx], self.real[idx], self.binary[idx], self.categorical[idx])


def fit_preprocessor(train: SurvivalData) -> Preprocessor:
    if len(train) == 0:
        raise DataError("cannot fit a preprocessor on an empty split")
    real = train.schema.of_kind("real")
    x = train.covariates[:, real]
    means = x.mean(axis=0)
    stds = x.std(axis=0)
    for j, s in zip(real, stds):
        if s == 0:
            log.warning("feature %r has zero variance; using scale 1", train.schema.features[j].name)
    stds = np.where(stds == 0, 1.0, stds)
    return Preprocessor(train.schema, means, stds)


# -- splitting ---------------------------------------------------------------


@dataclass
class FoldPlan:
    k: int
    seed: int
    folds: list  # list of (train_idx, test_idx) arrays

    def __iter__(self):
        return iter(self.folds)


def _stratified_order(events: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    parts = []
    for flag in (1, 0):
        idx = np.flatnonzero(events == flag)
        parts.append(idx[rng.permutation(len(idx))])
    return np.concatenate(parts)


def kfold_split(data_or_events, k: int = 5, seed: int = 0) -> FoldPlan:
    """Stratified k-fold: shuffle within each event class, then deal round-robin."""
    events = data_or_events.events if isinstance(data_or_events, SurvivalData) else np.asarray(data_or_events)
    n = len(events)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"k={k} exceeds dataset size {n}")
    order = _stratified_order(events, np.random.default_rng(seed))
    assign = np.empty(n, dtype=int)
    assign[order] = np.arange(n) % k
    folds = []
    for f in range(k):
        folds.append((np.flatnonzero(assign != f), np.flatnonzero(assign == f)))
    return FoldPlan(k, seed, folds)


def stratified_holdout(events, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Split positions into (keep, holdout) with ``fraction`` held out per event class."""
    events = np.asarray(events)
    if not 0.0 < fraction < 1.0:
        raise ValueError("holdout fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    keep, hold = [], []
    for flag in (1, 0):
        idx = np.flatnonzero(events == flag)
        idx = idx[rng.permutation(len(idx))]
        n_hold = int(round(fraction * len(idx)))
        hold.append(idx[:n_hold])
        keep.append(idx[n_hold:])
    keep, hold = np.sort(np.concatenate(keep)), np.sort(np.concatenate(hold))
    if len(keep) == 0 or len(hold) == 0:
        raise ValueError("holdout split left an empty side")
    return keep, hold


# -- synthetic data ----------------------------------------------------------


@dataclass
class SynthSpec:
    n: int = 2000
    p: int = 5
    beta: tuple = (0.8, -0.6, 0.5, -0.3, 0.2)
    alpha: float = 1.5
    lambda0: float = 1.0
    censoring: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.beta = tuple(float(b) for b in self.beta)
        if len(self.beta) != self.p:
            raise ValueError(f"beta has {len(self.beta)} entries, expected p={self.p}")
        if not 0.0 <= self.censoring < 1.0:
            raise ValueError("censoring fraction must be in [0, 1)")
        if self.alpha <= 0 or self.lambda0 <= 0:
            raise ValueError("alpha and lambda0 must be > 0")
        if self.n < 1:
            raise ValueError("n must be >= 1")


@dataclass
class SynthTruth:
    spec: SynthSpec
    scales: np.ndarray
    censor_max: float | None

    def cdf(self, t, rows=None):
        """True F(t | x_i) for the selected subjects, shape (len(rows), len(t))."""
        lam = self.scales if rows is None else self.scales[np.asarray(rows)]
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        return 1.0 - np.exp(-((t[None, :] / lam[:, None]) ** self.spec.alpha))

    def to_dict(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "true_lambda": self.scales.tolist(),
            "censor_max": self.censor_max,
        }


def synth_generate(spec: SynthSpec, tol: float = 0.02, max_iter: int = 200) -> tuple[SurvivalData, SynthTruth]:
    """Weibull event times with scale lambda0 * exp(beta . x), uniform censoring.

    The censoring upper bound is found by bisection so the realized censored
    fraction lands within ``tol`` of the target.
    """
    rng = np.random.default_rng(spec.seed)
    x = rng.standard_normal((spec.n, spec.p))
    lam = spec.lambda0 * np.exp(x @ np.array(spec.beta))
    event_t = lam * (-np.log1p(-rng.random(spec.n))) ** (1.0 / spec.alpha)
    u = rng.random(spec.n)
    u = np.where(u == 0.0, np.finfo(float).tiny, u)

    c_max = None
    if spec.censoring == 0:
        t, d = event_t, np.ones(spec.n, dtype=int)
    else:
        def frac(c):
            return float(np.mean(u * c < event_t))

        lo, hi = 0.0, float(event_t.max()) / u.min() + 1.0
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            f = frac(mid)
            if abs(f - spec.censoring) <= tol:
                c_max = mid
                break
            if f > spec.censoring:
                lo = mid
            else:
                hi = mid
        if c_max is None:
            raise ValueError(f"could not reach censoring fraction {spec.censoring} within {max_iter} steps")
        censor_t = u * c_max
        d = (event_t <= censor_t).astype(int)
        t = np.minimum(event_t, censor_t)

    feats = tuple(Feature(f"x{j}", "real") for j in range(spec.p))
    schema = FeatureSchema(feats, "time", "event", "units")
    data = SurvivalData(schema, x, t, d, {}, None, "synthetic")
    return data, SynthTruth(spec, lam, c_max)


def save_truth(truth: SynthTruth, path, extra: dict | None = None) -> None:
    payload = truth.to_dict()
    payload.update(extra or {})
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def load_truth(path) -> SynthTruth:
    with open(path) as fh:
        raw = json.load(fh)
    spec = SynthSpec(**raw["spec"])
    return SynthTruth(spec, np.array(raw["true_lambda"]), raw.get("censor_max"))
