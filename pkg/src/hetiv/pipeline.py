"""Survey microdata pipeline: typed loading, sample restrictions, drug-use
coding and weighted descriptive statistics.

Datasets hold one column per survey variable. Numeric and binary columns are
float64 vectors with NaN marking missing values; categorical columns are
object vectors with None marking missing. A dataset is never mutated after
construction: every transformation returns a new one with an extended
provenance log.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import DataError

NUMERIC = "numeric"
BINARY = "binary"
CATEGORICAL = "categorical"
_KINDS = (NUMERIC, BINARY, CATEGORICAL)

#: Cell contents treated as missing on input.
MISSING_MARKERS = ("", "NA")


@dataclass(frozen=True)
class ColumnSpec:
    """Declaration of one input column: its name and kind."""

    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise DataError(f"unknown column kind {self.kind!r} for {self.name!r}")


@dataclass
class Dataset:
    """Immutable-by-convention table of observation records.

    Parameters
    ----------
    frame: pd.DataFrame
        Column data. Numeric/binary columns are float64 (NaN = missing),
        categorical columns are object (None = missing).
    kinds: dict
        Column name -> kind ("numeric" | "binary" | "categorical").
    weight_column: str or None
        Name of the sampling-weight column, if any.
    provenance: list of str
        Source path followed by one entry per applied filter.
    empty_warning: bool
        Set when a restriction produced zero rows.
    """

    frame: pd.DataFrame
    kinds: dict
    weight_column: str | None = None
    provenance: list = field(default_factory=list)
    empty_warning: bool = False

    def __post_init__(self):
        for name in self.frame.columns:
            if name not in self.kinds:
                raise DataError(f"column {name!r} has no declared kind")
        for name, kind in self.kinds.items():
            if kind == BINARY:
                vals = self.frame[name].to_numpy(dtype=float)
                ok = np.isnan(vals) | (vals == 0.0) | (vals == 1.0)
                if not ok.all():
                    bad = int(np.flatnonzero(~ok)[0])
                    raise DataError(
                        f"binary column {name!r} contains non-binary value in row {bad + 1}"
                    )
        if self.weight_column is not None:
            w = self.frame[self.weight_column].to_numpy(dtype=float)
            bad = ~np.isfinite(w) | (w <= 0.0)
            if bad.any():
                row = int(np.flatnonzero(bad)[0])
                raise DataError(
                    f"weight column {self.weight_column!r}: non-positive or "
                    f"non-finite weight in row {row + 1}"
                )

    @property
    def rows(self) -> int:
        return len(self.frame)

    def column(self, name: str) -> np.ndarray:
        """Return one column as a numpy vector (float for numeric/binary)."""
        if name not in self.frame.columns:
            raise DataError(f"column {name!r} not present")
        if self.kinds[name] == CATEGORICAL:
            return self.frame[name].to_numpy(dtype=object)
        return self.frame[name].to_numpy(dtype=float)

    def weights(self) -> np.ndarray | None:
        if self.weight_column is None:
            return None
        return self.frame[self.weight_column].to_numpy(dtype=float)

    def with_filter(self, mask: np.ndarray, log_entry: str) -> "Dataset":
        """Return a row-filtered copy, preserving row order."""
        frame = self.frame.loc[np.asarray(mask, dtype=bool)].reset_index(drop=True)
        return Dataset(
            frame=frame,
            kinds=dict(self.kinds),
            weight_column=self.weight_column,
            provenance=self.provenance + [log_entry],
            empty_warning=len(frame) == 0,
        )


def dataset_from_columns(
    columns: dict,
    kinds: dict,
    weight_column: str | None = None,
    provenance: list | None = None,
) -> Dataset:
    """Build a Dataset directly from name -> vector mappings."""
    frame = pd.DataFrame(
        {
            name: (
                np.asarray(vec, dtype=object)
                if kinds[name] == CATEGORICAL
                else np.asarray(vec, dtype=float)
            )
            for name, vec in columns.items()
        }
    )
    return Dataset(
        frame=frame,
        kinds=dict(kinds),
        weight_column=weight_column,
        provenance=list(provenance or []),
    )


@dataclass(frozen=True)
class RestrictionSpec:
    """Sample restrictions: an inclusive age window plus activity exclusions."""

    min_age: float = 22
    max_age: float = 50
    sex_filter: str | None = None
    activity_exclusions: frozenset = frozenset({"in education", "disabled", "retired"})
    age_column: str = "age"
    sex_column: str = "sex"
    activity_column: str = "activity"

    def __post_init__(self):
        if self.min_age > self.max_age:
            raise DataError(
                f"min_age {self.min_age} exceeds max_age {self.max_age}"
            )


@dataclass(frozen=True)
class DrugTaxonomy:
    """Mapping from substance indicator columns to drug-class labels.

    ``classes`` maps each class label to the tuple of member substances.
    The "any" class must be the union of all substances across classes.
    """

    name: str
    classes: dict

    def __post_init__(self):
        union = set()
        for cls, members in self.classes.items():
            if cls != "any":
                union.update(members)
        any_members = set(self.classes.get("any", ()))
        if any_members != union:
            raise DataError(
                f"taxonomy {self.name!r}: 'any' class must equal the union of "
                f"all substances"
            )

    def substances(self) -> tuple:
        return tuple(self.classes.get("any", ()))


def soft_hard_taxonomy() -> DrugTaxonomy:
    """Soft (tranquilisers, cannabis, inhalants) vs. hard substances."""
    soft = ("tranquilisers", "cannabis", "inhalants")
    hard = (
        "opiates",
        "sedatives",
        "stimulants",
        "cocaine",
        "crack",
        "hallucinogens",
        "heroin",
        "methamphetamines",
    )
    return DrugTaxonomy(
        name="soft_hard",
        classes={"soft": soft, "hard": hard, "any": soft + hard},
    )


def recreational_dependency_taxonomy() -> DrugTaxonomy:
    """Recreational vs. dependency substances (alternative classification)."""
    recreational = (
        "stimulants",
        "cannabis",
        "hallucinogens",
        "inhalants",
        "methamphetamines",
    )
    dependency = (
        "opiates",
        "cocaine",
        "crack",
        "heroin",
        "tranquilisers",
        "sedatives",
    )
    return DrugTaxonomy(
        name="recreational_dependency",
        classes={
            "recreational": recreational,
            "dependency": dependency,
            "any": recreational + dependency,
        },
    )


def _sniff_delimiter(header_line: str) -> str:
    return "\t" if "\t" in header_line else ","


def load_table(
    path,
    schema,
    weight_column: str | None = None,
    delimiter: str | None = None,
) -> Dataset:
    """Load a delimited text file into a typed Dataset.

    Parameters
    ----------
    path: str or Path
        UTF-8 file with a header row. Comma or tab delimited (auto-detected
        from the header when ``delimiter`` is None).
    schema: sequence of ColumnSpec
        Declared columns. Every declared name must appear in the header;
        undeclared file columns are ignored.
    weight_column: str, optional
        Numeric column holding strictly positive sampling weights.

    Missing markers (empty cell, "NA") and unparseable cells become missing;
    per-column missing counts are appended to the provenance log. Rows are
    1-indexed in error messages.
    """
    specs = list(schema)
    if weight_column is not None and weight_column not in {s.name for s in specs}:
        specs.append(ColumnSpec(weight_column, NUMERIC))
    try:
        handle = open(path, "r", encoding="utf-8", newline="")
    except FileNotFoundError:
        raise DataError(f"input file not found: {path}")
    with handle:
        first = handle.readline()
        if not first:
            raise DataError(f"input file is empty: {path}")
        delim = delimiter or _sniff_delimiter(first)
        handle.seek(0)
        reader = csv.reader(handle, delimiter=delim)
        header = next(reader)
        header = [h.strip() for h in header]
        missing_cols = [s.name for s in specs if s.name not in header]
        if missing_cols:
            raise DataError(
                f"header of {path} lacks declared column(s): {', '.join(missing_cols)}"
            )
        col_idx = {s.name: header.index(s.name) for s in specs}
        raw = {s.name: [] for s in specs}
        for row_no, row in enumerate(reader, start=1):
            if not row or all(cell.strip() == "" for cell in row):
                continue
            for s in specs:
                idx = col_idx[s.name]
                raw[s.name].append(row[idx].strip() if idx < len(row) else "")

    n = len(next(iter(raw.values()))) if raw else 0
    columns = {}
    kinds = {}
    unparseable = {}
    for s in specs:
        cells = raw[s.name]
        kinds[s.name] = s.kind
        if s.kind == CATEGORICAL:
            columns[s.name] = np.array(
                [None if c in MISSING_MARKERS else c for c in cells], dtype=object
            )
            unparseable[s.name] = sum(1 for c in cells if c in MISSING_MARKERS)
            continue
        vec = np.full(n, np.nan)
        bad = 0
        for i, cell in enumerate(cells):
            if cell in MISSING_MARKERS:
                bad += 1
                continue
            try:
                value = float(cell)
            except ValueError:
                bad += 1
                continue
            if s.kind == BINARY and value not in (0.0, 1.0):
                bad += 1
                continue
            vec[i] = value
        columns[s.name] = vec
        unparseable[s.name] = bad

    if weight_column is not None:
        w = columns[weight_column]
        for i in range(n):
            if not math.isnan(w[i]) and w[i] <= 0.0:
                raise DataError(
                    f"non-positive weight {w[i]} in row {i + 1} of {path}"
                )
            if math.isnan(w[i]):
                raise DataError(f"missing weight in row {i + 1} of {path}")

    provenance = [f"loaded {path} ({n} rows)"]
    for name, count in unparseable.items():
        if count:
            provenance.append(f"column {name}: {count} missing/unparseable cells")
    return Dataset(
        frame=pd.DataFrame(columns),
        kinds=kinds,
        weight_column=weight_column,
        provenance=provenance,
    )


def apply_restrictions(d: Dataset, r: RestrictionSpec) -> Dataset:
    """Apply age, sex and activity restrictions; row order is preserved.

    Rows with missing age or activity are dropped along with out-of-range
    ones. Boundary ages are included. An empty result is valid and sets the
    dataset's empty_warning flag.
    """
    if r.age_column not in d.frame.columns:
        raise DataError(f"restriction needs column {r.age_column!r}")
    age = d.column(r.age_column)
    mask = (age >= r.min_age) & (age <= r.max_age)
    out = d.with_filter(mask, f"age in [{r.min_age}, {r.max_age}]: kept {int(mask.sum())}")

    if r.sex_filter is not None:
        if r.sex_column not in out.frame.columns:
            raise DataError(f"restriction needs column {r.sex_column!r}")
        sex = out.column(r.sex_column)
        mask = np.array([v == r.sex_filter for v in sex], dtype=bool)
        out = out.with_filter(mask, f"sex == {r.sex_filter}: kept {int(mask.sum())}")

    if r.activity_exclusions:
        if r.activity_column not in out.frame.columns:
            raise DataError(f"restriction needs column {r.activity_column!r}")
        act = out.column(r.activity_column)
        mask = np.array(
            [v is not None and v not in r.activity_exclusions for v in act],
            dtype=bool,
        )
        out = out.with_filter(
            mask,
            f"activity not in {sorted(r.activity_exclusions)}: kept {int(mask.sum())}",
        )
    return out


def code_drug_use(d: Dataset, t: DrugTaxonomy, window: str | None = None) -> Dataset:
    """Add one binary class indicator per taxonomy class.

    A class indicator is 1 when any member substance indicator is 1, missing
    when all member indicators are missing, and 0 otherwise. Substance
    columns are named ``substance`` or ``substance_<window>`` when a recall
    window suffix is given.
    """

    def col_name(substance: str) -> str:
        return substance if window is None else f"{substance}_{window}"

    for substance in t.substances():
        if col_name(substance) not in d.frame.columns:
            raise DataError(
                f"taxonomy {t.name!r} references absent column {col_name(substance)!r}"
            )

    frame = d.frame.copy()
    kinds = dict(d.kinds)
    for cls, members in t.classes.items():
        stack = np.column_stack([d.column(col_name(m)) for m in members])
        any_one = np.nanmax(np.where(np.isnan(stack), -np.inf, stack), axis=1) == 1.0
        all_missing = np.isnan(stack).all(axis=1)
        out = np.where(any_one, 1.0, 0.0)
        out[all_missing & ~any_one] = np.nan
        frame[cls] = out
        kinds[cls] = BINARY
    return Dataset(
        frame=frame,
        kinds=kinds,
        weight_column=d.weight_column,
        provenance=d.provenance + [f"coded taxonomy {t.name} ({len(t.classes)} classes)"],
    )


def weighted_descriptives(d: Dataset, variables) -> pd.DataFrame:
    """Weighted means and standard deviations for the named columns.

    The mean is sum(w*x)/sum(w). The standard deviation follows the
    frequency-weight convention, sqrt(sum(w*(x-mean)^2) / (sum(w) - 1)),
    which matches expanding each row into w copies for integer weights.
    Missing values are dropped pairwise together with their weights. Without
    a weight column all weights are 1 and the statistics are the unweighted
    ones.

    Returns a DataFrame indexed by variable with columns mean, sd, n and
    sum_weights.
    """
    w_all = d.weights()
    records = []
    for name in variables:
        if name not in d.frame.columns:
            raise DataError(f"descriptives: column {name!r} not present")
        if d.kinds[name] == CATEGORICAL:
            raise DataError(f"descriptives: column {name!r} is categorical")
        x = d.column(name)
        keep = ~np.isnan(x)
        if w_all is not None:
            keep &= ~np.isnan(w_all)
        if not keep.any():
            raise DataError(f"descriptives: no nonmissing observations for {name!r}")
        xv = x[keep]
        wv = w_all[keep] if w_all is not None else np.ones(keep.sum())
        sw = wv.sum()
        mean = float(np.dot(wv, xv) / sw)
        if sw > 1.0:
            sd = float(math.sqrt(np.dot(wv, (xv - mean) ** 2) / (sw - 1.0)))
        else:
            sd = float("nan")
        records.append(
            {"variable": name, "mean": mean, "sd": sd, "n": int(keep.sum()), "sum_weights": float(sw)}
        )
    return pd.DataFrame.from_records(records).set_index("variable")
