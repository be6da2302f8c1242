"""Dataset ingestion from CSV + JSON manifest, seeded splits and synthetic data."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, stats

from .numerics import Rng

TASKS = ("regression", "binclass", "multiclass")
FEATURE_KINDS = ("numeric", "categorical", "binary")
DEFAULT_RATIOS = (0.64, 0.16, 0.20)
MISSING = {"", "na", "nan", "null", "none", "?"}


class SchemaError(ValueError):
    pass


class MissingValueError(ValueError):
    def __init__(self, path, line, column):
        super().__init__(f"{path}:{line}: missing value in column {column!r}")
        self.line = line


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str  # numeric | categorical | binary | target


@dataclass(frozen=True)
class Schema:
    name: str
    task: str
    columns: tuple[ColumnSchema, ...]
    n_classes: int | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise SchemaError(f"unknown task {self.task!r}")
        targets = [c for c in self.columns if c.kind == "target"]
        if len(targets) != 1:
            raise SchemaError(f"need exactly one target column, got {len(targets)}")
        for c in self.columns:
            if c.kind not in FEATURE_KINDS + ("target",):
                raise SchemaError(f"unknown kind {c.kind!r} for column {c.name!r}")
        if self.task == "binclass" and self.n_classes not in (None, 2):
            raise SchemaError("binclass requires n_classes == 2")
        if self.task == "multiclass" and (self.n_classes is None or self.n_classes < 2):
            raise SchemaError("multiclass requires n_classes >= 2")

    @property
    def target(self) -> str:
        return next(c.name for c in self.columns if c.kind == "target")

    @property
    def feature_kinds(self) -> dict:
        return {c.name: c.kind for c in self.columns if c.kind != "target"}

    @property
    def n_out(self) -> int:
        if self.task == "regression":
            return 1
        return 2 if self.task == "binclass" else int(self.n_classes)

    @property
    def is_classification(self) -> bool:
        return self.task != "regression"


@dataclass
class Split:
    columns: dict  # feature name -> ndarray (float for numeric, str otherwise)
    y: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass
class DatasetBundle:
    schema: Schema
    train: Split
    val: Split
    test: Split
    bayes_score: float | None = field(default=None)

    @property
    def M(self) -> int:
        return len(self.schema.feature_kinds)

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise SchemaError(f"cannot read manifest {path}: {e}") from e
    for key in ("name", "task", "columns", "files"):
        if key not in doc:
            raise SchemaError(f"manifest missing field {key!r}")
    files = doc["files"]
    if not isinstance(files, dict) or not ("single" in files or {"train", "val", "test"} <= set(files)):
        raise SchemaError("files must give 'single' or 'train'/'val'/'test'")
    return doc


def schema_from_manifest(doc: dict) -> Schema:
    try:
        cols = tuple(ColumnSchema(c["name"], c["kind"]) for c in doc["columns"])
    except (KeyError, TypeError) as e:
        raise SchemaError(f"bad column entry: {e}") from e
    return Schema(doc["name"], doc["task"], cols, doc.get("n_classes"))


def _parse_csv(path: Path, schema: Schema) -> Split:
    names = [c.name for c in schema.columns]
    kinds = {c.name: c.kind for c in schema.columns}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        unknown = [h for h in header if h not in kinds]
        if unknown:
            raise SchemaError(f"{path}: unknown column(s) {unknown}")
        absent = [n for n in names if n not in header]
        if absent:
            raise SchemaError(f"{path}: missing column(s) {absent}")
        pos = {h: i for i, h in enumerate(header)}
        raw = {n: [] for n in names}
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            for n in names:
                v = row[pos[n]]
                if v.strip().lower() in MISSING:
                    raise MissingValueError(path, line, n)
                if kinds[n] == "numeric" or (kinds[n] == "target"):
                    try:
                        fv = float(v)
                    except ValueError:
                        raise SchemaError(f"{path}:{line}: non-numeric value {v!r} in {n!r}") from None
                    if not math.isfinite(fv):
                        raise MissingValueError(path, line, n)
                    raw[n].append(fv)
                else:
                    raw[n].append(v)
    cols = {}
    for n in names:
        if kinds[n] == "target":
            continue
        cols[n] = np.array(raw[n], dtype=np.float64 if kinds[n] == "numeric" else object)
    y = np.array(raw[schema.target], dtype=np.float64)
    if schema.is_classification:
        c = schema.n_out
        if np.any(y != np.round(y)) or np.any(y < 0) or np.any(y >= c):
            bad = sorted(set(y[(y != np.round(y)) | (y < 0) | (y >= c)].tolist()))[:5]
            raise SchemaError(f"{path}: target values {bad} outside classes 0..{c - 1}")
        y = y.astype(np.int64)
    return Split(cols, y)


def _take(split: Split, idx) -> Split:
    return Split({k: v[idx] for k, v in split.columns.items()}, split.y[idx])


def split_indices(n: int, ratios=DEFAULT_RATIOS, seed: int = 0):
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise SchemaError(f"bad split ratios {ratios}")
    perm = Rng(seed, 0x5917).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def load(manifest_path, csv_paths=None) -> DatasetBundle:
    """Load a dataset. ``csv_paths`` (one path, or three for train/val/test) overrides the manifest."""
    manifest_path = Path(manifest_path)
    doc = read_manifest(manifest_path)
    schema = schema_from_manifest(doc)
    base = manifest_path.parent
    files = doc["files"]
    if csv_paths is not None:
        csv_paths = [csv_paths] if isinstance(csv_paths, (str, Path)) else list(csv_paths)
        files = {"single": csv_paths[0]} if len(csv_paths) == 1 else dict(zip(("train", "val", "test"), csv_paths))
    if "single" in files:
        full = _parse_csv(base / files["single"], schema)
        sp = doc.get("split") or {}
        tr, va, te = split_indices(len(full), tuple(sp.get("ratios", DEFAULT_RATIOS)), int(sp.get("seed", 0)))
        parts = [_take(full, tr), _take(full, va), _take(full, te)]
    else:
        parts = [_parse_csv(base / files[k], schema) for k in ("train", "val", "test")]
    if any(len(p) == 0 for p in parts):
        raise SchemaError("every split needs at least one row")
    return DatasetBundle(schema, *parts)


def write_csv(path, split: Split, schema: Schema):
    names = [c.name for c in schema.columns]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(names)
        for i in range(len(split)):
            row = []
            for n in names:
                v = split.y[i] if n == schema.target else split.columns[n][i]
                row.append(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v))
            w.writerow(row)


def save(bundle: DatasetBundle, directory) -> Path:
    """Write a pre-split dataset (three CSVs + manifest) and return the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    s = bundle.schema
    for k in ("train", "val", "test"):
        write_csv(d / f"{k}.csv", getattr(bundle, k), s)
    doc = {"name": s.name, "task": s.task,
           "columns": [{"name": c.name, "kind": c.kind} for c in s.columns],
           "files": {k: f"{k}.csv" for k in ("train", "val", "test")}}
    if s.task == "multiclass":
        doc["n_classes"] = s.n_classes
    path = d / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def blobs_bayes_accuracy(separation: float, n_classes: int = 2) -> float:
    """Bayes accuracy for equal-prior unit-variance blobs spaced ``separation`` apart on a line.

    Integrates each class density over its decision interval numerically.
    """
    mus = np.arange(n_classes) * separation
    cuts = np.concatenate([[-np.inf], (mus[:-1] + mus[1:]) / 2, [np.inf]])
    total = 0.0
    for c, mu in enumerate(mus):
        lo, hi = cuts[c], cuts[c + 1]
        total += integrate.quad(stats.norm(mu, 1.0).pdf, lo, hi)[0]
    return total / n_classes


def synth(kind: str, n: int, M: int, noise: float = 0.1, seed: int = 0, *,
          separation: float = 4.0, n_classes: int = 2, ratios=DEFAULT_RATIOS) -> DatasetBundle:
    """Synthetic datasets with a known Bayes-optimal score.

    - ``linear-regression``: x ~ N(0, I), beta uniform on the unit sphere,
      y = x.beta + noise*eps, so the signal has unit variance. Bayes RMSE =
      noise; ``bayes_score`` holds -noise.
    - ``gaussian-blobs``: class c has mean c*separation*noise*u for a random unit
      vector u and covariance noise^2 I. Bayes accuracy depends only on
      ``separation`` (in units of the blob std).
    - ``xor-classification``: z ~ U[-1, 1]^M, label = [z0 * z1 > 0], x = z + noise*eps.
      Bayes accuracy is 1 for noise = 0 and not tabulated otherwise.
    """
    if n < 30:
        raise ValueError("n must be >= 30")
    rng = Rng(seed, 0x5e7)
    names = [f"x{j}" for j in range(M)]
    if kind == "linear-regression":
        X = rng.normal(size=(n, M))
        beta = rng.normal(size=M)
        beta /= np.linalg.norm(beta)
        y = X @ beta + noise * rng.normal(size=n)
        task, n_cls, bayes = "regression", None, -noise
    elif kind == "gaussian-blobs":
        u = rng.normal(size=M)
        u /= np.linalg.norm(u)
        y = rng.integers(0, n_classes, size=n)
        centers = (y - (n_classes - 1) / 2)[:, None] * separation * noise * u[None, :]
        X = centers + noise * rng.normal(size=(n, M))
        task = "binclass" if n_classes == 2 else "multiclass"
        n_cls = None if n_classes == 2 else n_classes
        bayes = blobs_bayes_accuracy(separation, n_classes)
    elif kind == "xor-classification":
        if M < 2:
            raise ValueError("xor needs M >= 2")
        Z = rng.uniform(-1, 1, size=(n, M))
        y = (Z[:, 0] * Z[:, 1] > 0).astype(np.int64)
        X = Z + noise * rng.normal(size=(n, M))
        task, n_cls, bayes = "binclass", None, (1.0 if noise == 0 else None)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    cols = tuple(ColumnSchema(c, "numeric") for c in names) + (ColumnSchema("y", "target"),)
    schema = Schema(f"synth-{kind}", task, cols, n_cls)
    full = Split({c: X[:, j].copy() for j, c in enumerate(names)}, np.asarray(y))
    tr, va, te = split_indices(n, ratios, seed)
    return DatasetBundle(schema, _take(full, tr), _take(full, va), _take(full, te), bayes)
