"""Datasets, file ingestion, the synthetic interaction benchmark and metrics."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .model import Categorical, FeatureSchema, Numeric, encode


class DataError(ValueError):
    """Malformed input file or inconsistent dataset."""


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    schema: FeatureSchema
    name: str = ""
    columns: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64).ravel()
        if X.ndim != 2:
            X = X.reshape(-1, self.schema.n_features)
        if X.shape[1] != self.schema.n_features:
            raise DataError(f"rows have {X.shape[1]} columns, schema has {self.schema.n_features} features")
        if X.shape[0] != y.shape[0]:
            raise DataError(f"{X.shape[0]} rows but {y.shape[0]} targets")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if not self.columns:
            object.__setattr__(self, "columns", tuple(f"x{k + 1}" for k in range(X.shape[1])))

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        return replace(self, X=self.X[idx], y=self.y[idx])

    def encoded(self):
        return encode(self.X, self.schema)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.schema.to_text().encode())
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()


def remap_labels(y: np.ndarray) -> np.ndarray:
    """Map binary labels to {-1, +1}; {0, 1} become {-1, +1}."""
    vals = set(np.unique(y).tolist())
    if vals <= {-1.0, 1.0}:
        return y
    if vals <= {0.0, 1.0}:
        return 2.0 * y - 1.0
    raise DataError(f"classification labels must be in {{0, 1}} or {{-1, +1}}, found {sorted(vals)[:5]}")


def _check_categorical(X, schema, offset=0):
    for k, f in enumerate(schema.features):
        if isinstance(f, Categorical):
            col = X[:, k]
            bad = (col != np.round(col)) | (col < 1) | (col > f.levels)
            if bad.any():
                row = int(np.flatnonzero(bad)[0])
                raise DataError(
                    f"row {row + offset}, column {k + 1}: categorical value {col[row]:g} outside 1..{f.levels}"
                )


def load_csv(
    path,
    target_column: str = "y",
    schema: FeatureSchema | None = None,
    *,
    delimiter: str = ",",
    classification: bool = True,
    require_target: bool = True,
) -> Dataset:
    """Read a dense CSV with a header row; ``target_column`` names the target.

    With ``require_target=False`` a file without that column loads with all
    targets set to zero (for scoring unlabeled rows).
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        has_target = target_column in header
        if not has_target and require_target:
            raise DataError(f"{path}: missing target column {target_column!r}")
        t = header.index(target_column) if has_target else None
        rows, ys = [], []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                bad = next(c for c in row if not _is_float(c))
                raise DataError(f"{path}:{lineno}: non-numeric cell {bad!r}") from None
            ys.append(vals.pop(t) if has_target else 0.0)
            rows.append(vals)
    columns = tuple(h for i, h in enumerate(header) if i != t)
    d = len(columns)
    X = np.array(rows, dtype=np.float64).reshape(-1, d)
    y = np.array(ys, dtype=np.float64)
    if schema is None:
        schema = FeatureSchema.numeric(d)
    if schema.n_features != d:
        raise DataError(f"{path}: {d} feature columns but schema has {schema.n_features}")
    try:
        _check_categorical(X, schema, offset=2)
    except DataError as err:
        raise DataError(f"{path}: line {err}") from None
    if classification and has_target:
        y = remap_labels(y)
    return Dataset(X, y, schema, name=path.stem, columns=columns)


def _is_float(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def load_sparse(path, schema: FeatureSchema, *, classification: bool = True) -> Dataset:
    """Read ``label idx:val ...`` lines (1-based indices) into a dense dataset."""
    path = Path(path)
    d = schema.n_features
    rows, ys = [], []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                ys.append(float(parts[0]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad label {parts[0]!r}") from None
            row = np.zeros(d)
            for tok in parts[1:]:
                idx, sep, val = tok.partition(":")
                try:
                    j = int(idx)
                    v = float(val)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad entry {tok!r}") from None
                if not sep or not 1 <= j <= d:
                    raise DataError(f"{path}:{lineno}: index {idx!r} outside 1..{d}")
                row[j - 1] = v
            rows.append(row)
    X = np.array(rows).reshape(-1, d)
    y = np.array(ys)
    _check_categorical(X, schema)
    if classification:
        y = remap_labels(y)
    return Dataset(X, y, schema, name=path.stem)


def write_csv(ds: Dataset, path, target_column: str = "y", delimiter: str = ",") -> None:
    """Write ``ds`` so that :func:`load_csv` reads it back bit-exactly."""
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    writer.writerow(list(ds.columns) + [target_column])
    for row, t in zip(ds.X.tolist(), ds.y.tolist()):
        writer.writerow([repr(v) for v in row] + [repr(t)])
    Path(path).write_text(buf.getvalue())


def one_hot_encode(ds: Dataset, columns: Sequence[int] | None = None) -> Dataset:
    """Replace each categorical column by its K binary indicator columns.

    ``columns`` are 0-based feature indices; by default every categorical
    feature is expanded. Indicators appear in level-ascending order at the
    position of the original column.
    """
    feats = ds.schema.features
    if columns is None:
        columns = [k for k, f in enumerate(feats) if isinstance(f, Categorical)]
    columns = set(columns)
    for k in columns:
        if not isinstance(feats[k], Categorical):
            raise DataError(f"column {k} ({ds.columns[k]}) is not categorical")
    blocks, new_feats, names = [], [], []
    for k, f in enumerate(feats):
        col = ds.X[:, k]
        if k in columns:
            levels = np.arange(1, f.levels + 1)
            blocks.append((col[:, None] == levels[None, :]).astype(np.float64))
            new_feats.extend(Numeric() for _ in levels)
            names.extend(f"{ds.columns[k]}={lv}" for lv in levels)
        else:
            blocks.append(col[:, None])
            new_feats.append(f)
            names.append(ds.columns[k])
    X = np.hstack(blocks) if blocks else ds.X
    return Dataset(X, ds.y, FeatureSchema(tuple(new_feats)), name=ds.name, columns=tuple(names))


@dataclass(frozen=True)
class SynthSpec:
    n_train: int = 100_000
    n_test: int = 100_000
    d: int = 30
    m: int = 20
    order: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.order > self.d:
            raise DataError(f"interaction order {self.order} exceeds the number of features {self.d}")
        if self.order < 1 or self.m < 1:
            raise DataError("order and m must be >= 1")
        if self.n_train < 1 or self.n_test < 0:
            raise DataError("n_train must be >= 1 and n_test >= 0")


@dataclass(frozen=True)
class GroundTruth:
    interactions: tuple[tuple[int, ...], ...]  # 0-based feature indices
    weights: tuple[float, ...]

    def response(self, X: np.ndarray) -> np.ndarray:
        y = np.zeros(X.shape[0])
        for idx, eps in zip(self.interactions, self.weights):
            y += eps * np.prod(X[:, list(idx)], axis=1)
        return y

    def to_json(self) -> str:
        return json.dumps(
            {
                "labels": "sign of the response",
                "interactions": [[j + 1 for j in idx] for idx in self.interactions],
                "weights": list(self.weights),
            },
            indent=2,
        )


def synth_generate(spec: SynthSpec):
    """Random +-1 data whose labels are the sign of a sum of feature products.

    Each of the ``m`` interactions picks ``order`` distinct features; its
    weight is uniform on (-1, 1). Returns ``(train, test, ground_truth)``.
    """
    rng = np.random.default_rng(spec.seed)
    interactions = tuple(
        tuple(sorted(rng.choice(spec.d, size=spec.order, replace=False).tolist())) for _ in range(spec.m)
    )
    weights = tuple(rng.uniform(-1.0, 1.0, size=spec.m).tolist())
    truth = GroundTruth(interactions, weights)
    n = spec.n_train + spec.n_test
    X = rng.choice(np.array([-1.0, 1.0]), size=(n, spec.d))
    y = np.sign(truth.response(X))
    y[y == 0] = 1.0
    schema = FeatureSchema.numeric(spec.d)
    train = Dataset(X[: spec.n_train], y[: spec.n_train], schema, name="synth_train")
    test = Dataset(X[spec.n_train:], y[spec.n_train:], schema, name="synth_test")
    return train, test, truth


def train_test_split(ds: Dataset, fraction: float, seed=0):
    if not 0 < fraction < 1:
        raise DataError(f"fraction must be in (0, 1), got {fraction}")
    n_train = int(round(fraction * ds.n_rows))
    if n_train == 0 or n_train == ds.n_rows:
        raise DataError(f"split of {ds.n_rows} rows at {fraction} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(ds.n_rows)
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney U statistic (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    pos = labels > 0
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs both classes")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(scores, labels) -> float:
    pred = np.where(np.asarray(scores) > 0, 1.0, -1.0)
    return float(np.mean(pred == np.asarray(labels)))


CAR_ATTRIBUTES = (
    ("buying", 4),
    ("maint", 4),
    ("doors", 4),
    ("persons", 3),
    ("lug_boot", 3),
    ("safety", 3),
)


def car_like() -> Dataset:
    """All 1728 attribute combinations of a Car-evaluation-shaped table.

    Six categorical attributes with 4, 4, 4, 3, 3, 3 levels (21 in total); the
    label is +1 for the "unacceptable" class of a fixed rule table and -1
    otherwise. Levels are coded 1..K from the worst to the best value.
    """
    grids = np.meshgrid(*[np.arange(1, k + 1) for _, k in CAR_ATTRIBUTES], indexing="ij")
    X = np.stack([g.ravel() for g in grids], axis=1).astype(np.float64)
    buying, maint, doors, persons, lug, safety = X.T
    price = (buying - 1) + (maint - 1)  # 0 (very expensive) .. 6 (cheap)
    comfort = (persons == 3) * 1.0 + (doors >= 3) * 1.0 + (lug - 1)
    unacc = (persons == 1) | (safety == 1)
    unacc |= (price <= 1) & (safety < 3)
    unacc |= (price <= 2) & (comfort <= 1)
    unacc |= (lug == 1) & (safety == 2) & (price <= 3)
    unacc |= (doors == 1) & (persons == 2) & (lug < 3)
    y = np.where(unacc, 1.0, -1.0)
    schema = FeatureSchema(tuple(Categorical(k) for _, k in CAR_ATTRIBUTES))
    return Dataset(X, y, schema, name="car_like", columns=tuple(n for n, _ in CAR_ATTRIBUTES))


FIXTURES = ("car_onehot",)


def fixture_paths(name: str = "car_onehot") -> tuple[Path, Path]:
    """``(csv, schema)`` paths of a dataset shipped with the package."""
    if name not in FIXTURES:
        raise DataError(f"unknown fixture {name!r}; available: {', '.join(FIXTURES)}")
    base = Path(__file__).resolve().parent / "fixtures"
    return base / f"{name}.csv", base / f"{name}.schema"


def load_fixture(name: str = "car_onehot") -> Dataset:
    """The one-hot Car-like table: 1728 rows, 21 binary features, labels +-1."""
    csv_path, schema_path = fixture_paths(name)
    return load_csv(csv_path, schema=FeatureSchema.from_text(schema_path.read_text()))


UCI_CAR_LEVELS = (
    ("buying", ("vhigh", "high", "med", "low")),
    ("maint", ("vhigh", "high", "med", "low")),
    ("doors", ("2", "3", "4", "5more")),
    ("persons", ("2", "4", "more")),
    ("lug_boot", ("small", "med", "big")),
    ("safety", ("low", "med", "high")),
)


def car_from_uci(path, positive_class: str = "unacc") -> Dataset:
    """Read the UCI ``car.data`` file as a categorical one-versus-rest dataset.

    Levels are coded 1..K in the order of :data:`UCI_CAR_LEVELS`, the same
    coding as :func:`car_like`; rows of ``positive_class`` get label +1.
    """
    path = Path(path)
    rows, ys = [], []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            if len(row) != len(UCI_CAR_LEVELS) + 1:
                raise DataError(f"{path}:{lineno}: expected {len(UCI_CAR_LEVELS) + 1} fields, got {len(row)}")
            coded = []
            for k, ((name, levels), cell) in enumerate(zip(UCI_CAR_LEVELS, row)):
                if cell not in levels:
                    raise DataError(f"{path}:{lineno}, column {k + 1} ({name}): unknown level {cell!r}")
                coded.append(levels.index(cell) + 1.0)
            rows.append(coded)
            ys.append(1.0 if row[-1] == positive_class else -1.0)
    schema = FeatureSchema(tuple(Categorical(len(lv)) for _, lv in UCI_CAR_LEVELS))
    X = np.array(rows, dtype=np.float64).reshape(-1, len(UCI_CAR_LEVELS))
    return Dataset(X, np.array(ys), schema, name=path.stem, columns=tuple(n for n, _ in UCI_CAR_LEVELS))
