"""Toy circles, tabular CSV ingestion, and the plain-text dataset cache."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

DATA_HEADER = "arprl-data v1"
MISSING_TOKENS = {"", "?", "na", "nan", "null"}


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    num_attr_values: int
    num_classes: int
    mean: np.ndarray
    std: np.ndarray
    kind: str = "tabular"
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.x)
        if len(self.y) != n or len(self.u) != n:
            raise DataError("x, y and u must have the same number of rows")
        both = np.concatenate([self.train_idx, self.test_idx])
        if len(np.unique(both)) != len(both) or len(both) != n:
            raise DataError("train/test split must be disjoint and cover every row")
        if n and (self.y.max() >= self.num_classes or self.u.max() >= self.num_attr_values):
            raise DataError("label or attribute index exceeds its cardinality")

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def split(self, which: str):
        idx = {"train": self.train_idx, "test": self.test_idx}[which]
        return self.x[idx], self.y[idx], self.u[idx]

    def raw(self, x: np.ndarray | None = None) -> np.ndarray:
        """Undo standardization."""
        x = self.x if x is None else x
        return x * self.std + self.mean

    def majority_rate(self, target: str = "attribute", which: str = "test") -> float:
        _, y, u = self.split(which)
        v = u if target == "attribute" else y
        k = self.num_attr_values if target == "attribute" else self.num_classes
        return float(np.bincount(v, minlength=k).max() / len(v))


def _split(n: int, rng: np.random.Generator, train_frac: float = 0.8):
    order = rng.permutation(n)
    n_train = int(round(train_frac * n))
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def standardize(x: np.ndarray, train_idx: np.ndarray, columns=None):
    """Standardize ``columns`` (default: all) with train-split statistics; constant columns keep std 1."""
    d = x.shape[1]
    cols = np.arange(d) if columns is None else np.asarray(columns, dtype=np.intp)
    mean, std = np.zeros(d), np.ones(d)
    if len(cols):
        tr = x[train_idx][:, cols]
        mu = tr.mean(axis=0)
        sd = tr.std(axis=0)
        sd[sd == 0] = 1.0
        mean[cols], std[cols] = mu, sd
    return (x - mean) / std, mean, std


def gen_circles(n_per_class: int, seed: int, radius: float = 0.25) -> Dataset:
    """Two circles centred at (0,0) and (1,0); label = circle, attribute = above the x-axis."""
    if n_per_class < 10:
        raise DataError(f"n_per_class must be >= 10, got {n_per_class}")
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [1.0, 0.0]])
    y = np.repeat([0, 1], n_per_class)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=2 * n_per_class)
    pts = centers[y] + radius * np.column_stack([np.cos(theta), np.sin(theta)])
    u = (pts[:, 1] > 0).astype(np.int64)
    train_idx, test_idx = _split(len(y), rng)
    x, mean, std = standardize(pts, train_idx)
    return Dataset(x, y.astype(np.int64), u, train_idx, test_idx, 2, 2, mean, std,
                   kind="toy", feature_names=["c0", "c1"])


@dataclass
class TabularSchema:
    label: str
    attribute: str
    categorical: list[str] = field(default_factory=list)
    delimiter: str = ","
    drop: list[str] = field(default_factory=list)

    def validate(self, header: list[str]) -> None:
        if self.label == self.attribute:
            raise DataError(f"label and attribute column are both {self.label!r}")
        for col in [self.label, self.attribute, *self.categorical, *self.drop]:
            if col not in header:
                raise DataError(f"missing column {col!r}")
        for col in (self.label, self.attribute):
            if col in self.categorical:
                raise DataError(f"column {col!r} cannot be both a target and a feature")


def _index_values(values: list[str]) -> tuple[np.ndarray, list[str]]:
    levels = sorted(set(values))
    lookup = {v: i for i, v in enumerate(levels)}
    return np.array([lookup[v] for v in values], dtype=np.int64), levels


def load_tabular(path, schema: TabularSchema, seed: int = 0) -> Dataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter=schema.delimiter, skipinitialspace=True))
    rows = [r for r in rows if r]
    if len(rows) < 2:
        raise DataError(f"{path}: empty file (header and at least one data row required)")
    header = [h.strip() for h in rows[0]]
    schema.validate(header)
    body = []
    dropped = 0
    for lineno, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise DataError(f"{path}: row {lineno} has {len(r)} cells, expected {len(header)}")
        cells = [c.strip() for c in r]
        if any(c.lower() in MISSING_TOKENS for c in cells):
            dropped += 1
            continue
        body.append((lineno, cells))
    if dropped:
        logger.warning("%s: dropped %d rows with missing values", path, dropped)
    if not body:
        raise DataError(f"{path}: no complete rows")
    col = {name: i for i, name in enumerate(header)}

    y, _ = _index_values([cells[col[schema.label]] for _, cells in body])
    u, _ = _index_values([cells[col[schema.attribute]] for _, cells in body])
    skip = {schema.label, schema.attribute, *schema.drop}
    blocks, names, numeric_cols = [], [], []
    width = 0
    for name in header:
        if name in skip:
            continue
        values = [cells[col[name]] for _, cells in body]
        if name in schema.categorical:
            codes, levels = _index_values(values)
            blocks.append(np.eye(len(levels))[codes])
            names.extend(f"{name}={lv}" for lv in levels)
            width += len(levels)
        else:
            out = np.empty(len(values))
            for i, v in enumerate(values):
                try:
                    out[i] = float(v)
                except ValueError:
                    raise DataError(f"{path}: row {body[i][0]}, column {name!r}: "
                                    f"cannot parse {v!r} as a number") from None
            blocks.append(out[:, None])
            names.append(name)
            numeric_cols.append(width)
            width += 1
    if not blocks:
        raise DataError(f"{path}: no feature columns left after removing label/attribute")
    x = np.hstack(blocks)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = _split(len(x), rng)
    x, mean, std = standardize(x, train_idx, numeric_cols)
    return Dataset(x, y, u, train_idx, test_idx, int(u.max()) + 1, int(y.max()) + 1,
                   mean, std, kind="tabular", feature_names=names)


def infer_categorical(path, delimiter: str = ",", exclude=()) -> list[str]:
    """Columns holding any non-missing cell that does not parse as a number."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh, delimiter=delimiter, skipinitialspace=True) if r]
    if not rows:
        raise DataError(f"{path}: empty file (header and at least one data row required)")
    header = [h.strip() for h in rows[0]]
    found = []
    for j, name in enumerate(header):
        if name in exclude:
            continue
        for r in rows[1:]:
            c = r[j].strip() if j < len(r) else ""
            if c.lower() in MISSING_TOKENS:
                continue
            try:
                float(c)
            except ValueError:
                found.append(name)
                break
    return found


# ---- synthetic Adult-style table -------------------------------------------------

ADULT_COLUMNS = ["age", "workclass", "education-num", "marital-status", "occupation",
                 "relationship", "race", "sex", "hours-per-week", "capital-gain", "income"]
ADULT_CATEGORICAL = ["workclass", "marital-status", "occupation", "relationship", "race"]
MARITAL = ["Divorced", "Married-AF-spouse", "Married-civ-spouse", "Married-spouse-absent",
           "Never-married", "Separated", "Widowed"]


def adult_schema(attribute: str = "sex") -> TabularSchema:
    cats = [c for c in ADULT_CATEGORICAL + ["sex"] if c != attribute]
    return TabularSchema(label="income", attribute=attribute, categorical=cats)


def gen_adult_like(n: int, seed: int, missing_rate: float = 0.01) -> list[list[str]]:
    """Rows (header first) of a synthetic census table with Adult's column layout.

    Sex is strongly reflected in relationship, occupation and hours; income
    depends on education, age, hours, capital gain and (through occupation and
    hours) on sex, so hiding sex costs some label accuracy.
    """
    rng = np.random.default_rng(seed)
    male = rng.random(n) < 0.55
    age = np.clip(rng.normal(39, 12, n), 17, 90).round()
    edu = np.clip(rng.normal(10, 2.5, n), 1, 16).round()
    hours = np.clip(rng.normal(np.where(male, 44, 35), 8), 1, 99).round()
    married = rng.random(n) < np.clip(0.1 + 0.012 * (age - 17), 0.1, 0.7)
    marital = np.where(married, "Married-civ-spouse",
                       rng.choice([m for m in MARITAL if m != "Married-civ-spouse"], size=n,
                                  p=[0.3, 0.02, 0.06, 0.42, 0.1, 0.1]))
    rel_unmarried = rng.choice(["Not-in-family", "Own-child", "Unmarried", "Other-relative"],
                               size=n, p=[0.45, 0.25, 0.2, 0.1])
    relationship = np.where(married, np.where(male, "Husband", "Wife"), rel_unmarried)
    occ_male = ["Craft-repair", "Transport-moving", "Exec-managerial", "Prof-specialty", "Sales"]
    occ_female = ["Adm-clerical", "Other-service", "Prof-specialty", "Sales", "Exec-managerial"]
    occupation = np.where(male, rng.choice(occ_male, size=n, p=[0.3, 0.2, 0.2, 0.15, 0.15]),
                          rng.choice(occ_female, size=n, p=[0.35, 0.3, 0.15, 0.12, 0.08]))
    workclass = rng.choice(["Private", "Self-emp", "Gov"], size=n, p=[0.7, 0.12, 0.18])
    race = rng.choice(["White", "Black", "Asian-Pac-Islander", "Other"], size=n,
                      p=[0.85, 0.09, 0.04, 0.02])
    cap = np.where(rng.random(n) < 0.08, rng.exponential(5000, n), 0.0).round()
    occ_bonus = np.isin(occupation, ["Exec-managerial", "Prof-specialty"]) * 0.8
    score = (0.35 * (edu - 10) + 0.03 * (age - 39) + 0.04 * (hours - 40)
             + 0.6 * married + occ_bonus + 0.00015 * cap - 1.0)
    income = rng.random(n) < 1.0 / (1.0 + np.exp(-score))
    cols = {
        "age": age.astype(int).astype(str), "workclass": workclass,
        "education-num": edu.astype(int).astype(str), "marital-status": marital,
        "occupation": occupation, "relationship": relationship, "race": race,
        "sex": np.where(male, "Male", "Female"), "hours-per-week": hours.astype(int).astype(str),
        "capital-gain": cap.astype(int).astype(str),
        "income": np.where(income, ">50K", "<=50K"),
    }
    rows = [[str(cols[c][i]) for c in ADULT_COLUMNS] for i in range(n)]
    holes = rng.random(n) < missing_rate
    for i in np.flatnonzero(holes):
        rows[i][ADULT_COLUMNS.index("workclass")] = "?"
    return [list(ADULT_COLUMNS)] + rows


def write_csv(rows, path, delimiter: str = ",") -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, delimiter=delimiter, lineterminator="\n").writerows(rows)


# ---- internal cache ----------------------------------------------------------------

def _line(arr) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(arr, dtype=np.float64).reshape(-1))


def _ints(arr) -> str:
    return " ".join(str(int(v)) for v in arr)


def save_dataset(ds: Dataset, path) -> None:
    n, d = ds.x.shape
    lines = [DATA_HEADER,
             f"dims {n} {d} {len(ds.train_idx)} {len(ds.test_idx)} {ds.num_classes} {ds.num_attr_values}",
             f"kind {ds.kind}",
             "features " + "\t".join(ds.feature_names),
             "mean " + _line(ds.mean), "std " + _line(ds.std),
             "train " + _ints(ds.train_idx), "test " + _ints(ds.test_idx),
             "y " + _ints(ds.y), "u " + _ints(ds.u)]
    lines += ["x " + _line(row) for row in ds.x]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    lines = path.read_text(encoding="utf-8").split("\n")
    if not lines or lines[0] != DATA_HEADER:
        raise DataError(f"{path}: missing '{DATA_HEADER}' header")
    fields: dict[str, str] = {}
    xrows = []
    for line in lines[1:]:
        if not line:
            continue
        key, _, rest = line.partition(" ")
        if key == "x":
            xrows.append([float(v) for v in rest.split()])
        else:
            fields[key] = rest
    try:
        n, d, ntr, nte, k, a = (int(v) for v in fields["dims"].split())
        floats = lambda s: np.array([float(v) for v in s.split()], dtype=np.float64)
        ints = lambda s: np.array([int(v) for v in s.split()], dtype=np.int64)
        x = np.array(xrows, dtype=np.float64).reshape(n, d)
        names = fields.get("features", "").split("\t") if fields.get("features") else []
        ds = Dataset(x, ints(fields["y"]), ints(fields["u"]), ints(fields.get("train", "")),
                     ints(fields.get("test", "")), a, k, floats(fields["mean"]), floats(fields["std"]),
                     kind=fields.get("kind", "tabular"), feature_names=names)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed dataset cache ({exc})") from None
    if len(ds.train_idx) != ntr or len(ds.test_idx) != nte:
        raise DataError(f"{path}: split sizes do not match dims line")
    return ds
