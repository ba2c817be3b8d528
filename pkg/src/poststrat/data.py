"""Respondent-level survey data and poststratification cell structure.

A survey is a set of respondent records, each carrying one level per
categorical adjustment factor, one or more outcome values (NaN = item
missing), and optionally a precomputed weight and a two-wave label.
Crossing the factors yields the poststratification cells: every
combination of levels is a cell, whether or not it was sampled, so the
population grid is always complete.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError, SchemaError


@dataclass(frozen=True)
class FactorSpec:
    """A categorical adjustment variable: ordered levels plus an omitted baseline."""

    name: str
    levels: tuple[str, ...]
    baseline: int = 0

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))
        if not self.levels:
            raise SchemaError(f"factor {self.name!r} has no levels")
        if len(set(self.levels)) != len(self.levels):
            raise SchemaError(f"factor {self.name!r} has duplicate levels")
        if not 0 <= self.baseline < len(self.levels):
            raise SchemaError(
                f"factor {self.name!r}: baseline index {self.baseline} out of range"
            )

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def code_of(self, level: str) -> int:
        try:
            return self.levels.index(str(level))
        except ValueError:
            raise SchemaError(
                f"level {level!r} is not a level of factor {self.name!r}"
            ) from None


@dataclass(frozen=True)
class SurveyDataset:
    """Respondent records: factor level codes, outcomes, optional weight and wave.

    ``codes[i, f]`` is the level index of respondent ``i`` on factor ``f``
    (ordered as in ``factors``). Outcome arrays are float with NaN marking
    item nonresponse. Instances are immutable; share freely across threads.
    """

    factors: tuple[FactorSpec, ...]
    codes: np.ndarray
    outcomes: dict[str, np.ndarray]
    weight: np.ndarray | None = None
    wave: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.codes.shape[0]

    @property
    def factor_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.factors)

    def factor(self, name: str) -> FactorSpec:
        for f in self.factors:
            if f.name == name:
                return f
        raise SchemaError(f"dataset has no factor named {name!r}")

    def factor_index(self, name: str) -> int:
        for i, f in enumerate(self.factors):
            if f.name == name:
                return i
        raise SchemaError(f"dataset has no factor named {name!r}")

    def outcome(self, name: str) -> np.ndarray:
        try:
            return self.outcomes[name]
        except KeyError:
            raise SchemaError(f"dataset has no outcome named {name!r}") from None

    def observed_mask(self, outcome: str) -> np.ndarray:
        """Complete-case mask for one outcome (True where the value is present)."""
        return ~np.isnan(self.outcome(outcome))

    def subset(self, mask: np.ndarray) -> "SurveyDataset":
        mask = np.asarray(mask)
        return SurveyDataset(
            factors=self.factors,
            codes=self.codes[mask],
            outcomes={k: v[mask] for k, v in self.outcomes.items()},
            weight=None if self.weight is None else self.weight[mask],
            wave=None if self.wave is None else self.wave[mask],
        )

    @classmethod
    def from_levels(
        cls,
        factors: Sequence[FactorSpec],
        levels: Mapping[str, Sequence[str]],
        outcomes: Mapping[str, Sequence[float]] | None = None,
        weight: Sequence[float] | None = None,
        wave: Sequence[int] | None = None,
    ) -> "SurveyDataset":
        """Build a dataset from per-factor level labels, validating every record."""
        factors = tuple(factors)
        if not factors:
            raise SchemaError("at least one factor is required")
        lengths = {name: len(vals) for name, vals in levels.items()}
        for f in factors:
            if f.name not in levels:
                raise SchemaError(f"no level values supplied for factor {f.name!r}")
        n = lengths[factors[0].name]
        if any(v != n for v in lengths.values()):
            raise DataError("factor level columns have unequal lengths")

        codes = np.empty((n, len(factors)), dtype=np.intp)
        for fi, f in enumerate(factors):
            lookup = {lev: c for c, lev in enumerate(f.levels)}
            for i, val in enumerate(levels[f.name]):
                code = lookup.get(str(val))
                if code is None:
                    raise SchemaError(
                        f"row {i}: level {val!r} is not a level of factor {f.name!r}"
                    )
                codes[i, fi] = code

        out = {}
        for name, vals in (outcomes or {}).items():
            arr = np.asarray(vals, dtype=float)
            if arr.shape != (n,):
                raise DataError(f"outcome {name!r} has length {arr.shape}, expected {n}")
            out[name] = arr

        w = None
        if weight is not None:
            w = np.asarray(weight, dtype=float)
            if np.any(~np.isfinite(w)) or np.any(w <= 0):
                raise DataError("weights must be positive finite reals")
        zv = None
        if wave is not None:
            zv = np.asarray(wave, dtype=np.intp)
            if not np.isin(zv, (0, 1)).all():
                raise DataError("wave labels must be 0 or 1")
        return cls(factors=factors, codes=codes, outcomes=out, weight=w, wave=zv)


@dataclass(frozen=True)
class PoststratificationTable:
    """The full cross-classification grid: J cells with sample and population counts.

    ``combos[j]`` holds the level codes of cell ``j`` in C order over the
    factor grid (first factor slowest). Cells with no respondents are
    retained so population matrices always cover the whole grid.
    ``N_j`` is real-valued so margin-fitted tables plug in unchanged.
    """

    factors: tuple[FactorSpec, ...]
    combos: np.ndarray
    n_j: np.ndarray
    cell_of: np.ndarray
    N_j: np.ndarray | None = None

    @property
    def J(self) -> int:
        return self.combos.shape[0]

    @property
    def n(self) -> int:
        return int(self.n_j.sum())

    @property
    def N(self) -> float:
        return float(self.require_population().sum())

    def require_population(self) -> np.ndarray:
        if self.N_j is None:
            raise DataError("population counts have not been attached to this table")
        return self.N_j

    def dims(self) -> tuple[int, ...]:
        return tuple(f.n_levels for f in self.factors)

    def cell_labels(self) -> list[tuple[str, ...]]:
        return [
            tuple(f.levels[c] for f, c in zip(self.factors, row)) for row in self.combos
        ]

    def label_of(self, j: int) -> str:
        return "/".join(
            f"{f.name}={f.levels[c]}" for f, c in zip(self.factors, self.combos[j])
        )


def assign_cells(
    dataset: SurveyDataset, factors: Sequence[FactorSpec | str]
) -> PoststratificationTable:
    """Cross-classify respondents into poststratification cells.

    Every combination of levels of the requested factors is a cell
    (J = product of level counts), including combinations nobody sampled.
    The returned table carries the per-respondent cell index.
    """
    resolved: list[FactorSpec] = []
    idx: list[int] = []
    for f in factors:
        name = f if isinstance(f, str) else f.name
        spec = dataset.factor(name)
        if not isinstance(f, str) and f != spec:
            raise SchemaError(
                f"factor {name!r} does not match the dataset schema for that name"
            )
        resolved.append(spec)
        idx.append(dataset.factor_index(name))
    if not resolved:
        raise SchemaError("at least one factor is required to form cells")
    if len(set(idx)) != len(idx):
        raise SchemaError("duplicate factor in cell cross-classification")

    dims = tuple(f.n_levels for f in resolved)
    J = int(np.prod(dims))
    cell_of = np.ravel_multi_index(
        tuple(dataset.codes[:, i] for i in idx), dims
    ).astype(np.intp)
    n_j = np.bincount(cell_of, minlength=J).astype(np.intp)
    combos = np.stack(
        [g.ravel() for g in np.indices(dims)], axis=1
    ).astype(np.intp)
    return PoststratificationTable(
        factors=tuple(resolved), combos=combos, n_j=n_j, cell_of=cell_of
    )


def attach_population(
    table: PoststratificationTable, counts: Mapping[tuple[str, ...], float]
) -> PoststratificationTable:
    """Attach known population counts N_j, keyed by level-label combinations.

    Every cell of the grid must be present in ``counts`` and vice versa;
    a silent zero default would hide mismatched schemas.
    """
    labels = table.cell_labels()
    known = set(labels)
    unknown = [k for k in counts if k not in known]
    if unknown:
        raise DataError(f"population counts include unknown cells: {unknown[:5]}")
    missing = [lab for lab in labels if lab not in counts]
    if missing:
        raise DataError(f"population counts missing for cells: {missing[:5]}")
    N = np.array([float(counts[lab]) for lab in labels])
    if np.any(~np.isfinite(N)) or np.any(N < 0):
        raise DataError("population counts must be finite and nonnegative")
    if N.sum() <= 0:
        raise DataError("total population must be positive")
    return replace(table, N_j=N)


def split_waves(dataset: SurveyDataset) -> tuple[SurveyDataset, SurveyDataset]:
    """Split a two-wave dataset on its wave label (0 first, 1 second)."""
    if dataset.wave is None:
        raise SchemaError("dataset carries no wave labels")
    return dataset.subset(dataset.wave == 0), dataset.subset(dataset.wave == 1)


# ---------------------------------------------------------------------------
# CSV interfaces
#
# Survey CSV: header row required; one column per factor (string levels),
# one per outcome (numeric, empty = missing), optional `weight`, optional
# `wave` (0/1). Population CSV: one column per factor plus `N`.
# ---------------------------------------------------------------------------

RESERVED_COLUMNS = ("weight", "wave")


def _read_rows(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file; a header row is required")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return list(reader.fieldnames), rows


def _parse_float(val: str, where: str) -> float:
    if val is None or val == "":
        return math.nan
    try:
        return float(val)
    except ValueError:
        raise DataError(f"{where}: cannot parse {val!r} as a number") from None


def read_survey_csv(
    path,
    factors: Sequence[FactorSpec | str],
    outcomes: Sequence[str] | None = None,
) -> SurveyDataset:
    """Read a survey CSV.

    ``factors`` may be FactorSpec objects (levels validated against them) or
    bare column names (levels then discovered from the data, sorted). Columns
    other than factors, ``weight`` and ``wave`` are treated as outcomes
    unless an explicit outcome list is given.
    """
    header, rows = _read_rows(path)
    factor_names = [f if isinstance(f, str) else f.name for f in factors]
    for name in factor_names:
        if name not in header:
            raise SchemaError(f"{path}: missing factor column {name!r}")

    specs: list[FactorSpec] = []
    for f in factors:
        if isinstance(f, str):
            seen = sorted({row[f] for row in rows})
            specs.append(FactorSpec(f, tuple(seen)))
        else:
            specs.append(f)

    if outcomes is None:
        outcomes = [
            c for c in header if c not in factor_names and c not in RESERVED_COLUMNS
        ]
    levels = {name: [row[name] for row in rows] for name in factor_names}
    out = {
        name: [_parse_float(row[name], f"{path} row {i} column {name}") for i, row in enumerate(rows)]
        for name in outcomes
    }
    weight = None
    if "weight" in header:
        weight = [_parse_float(row["weight"], f"{path} row {i} weight") for i, row in enumerate(rows)]
    wave = None
    if "wave" in header:
        wave = [int(row["wave"]) for row in rows]
    return SurveyDataset.from_levels(specs, levels, out, weight=weight, wave=wave)


def write_survey_csv(dataset: SurveyDataset, path) -> None:
    """Write a dataset back to the survey CSV schema (round-trip safe)."""
    header = list(dataset.factor_names) + list(dataset.outcomes)
    if dataset.weight is not None:
        header.append("weight")
    if dataset.wave is not None:
        header.append("wave")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(dataset.n):
            row = [
                f.levels[dataset.codes[i, fi]] for fi, f in enumerate(dataset.factors)
            ]
            for name in dataset.outcomes:
                v = dataset.outcomes[name][i]
                row.append("" if math.isnan(v) else repr(float(v)))
            if dataset.weight is not None:
                row.append(repr(float(dataset.weight[i])))
            if dataset.wave is not None:
                row.append(str(int(dataset.wave[i])))
            writer.writerow(row)


def read_population_csv(
    path, factors: Sequence[FactorSpec]
) -> dict[tuple[str, ...], float]:
    """Read population counts keyed by factor-level combinations.

    Expects one column per factor plus a numeric ``N`` column.
    """
    header, rows = _read_rows(path)
    if "N" not in header:
        raise SchemaError(f"{path}: missing population count column 'N'")
    names = [f.name for f in factors]
    for name in names:
        if name not in header:
            raise SchemaError(f"{path}: missing factor column {name!r}")
    counts: dict[tuple[str, ...], float] = {}
    for i, row in enumerate(rows):
        key = tuple(row[name] for name in names)
        if key in counts:
            raise DataError(f"{path}: duplicate population cell {key}")
        val = _parse_float(row["N"], f"{path} row {i} N")
        if math.isnan(val) or val < 0:
            raise DataError(f"{path} row {i}: population count must be nonnegative")
        counts[key] = val
    return counts


def write_population_csv(
    path, factors: Sequence[FactorSpec], counts: Mapping[tuple[str, ...], float]
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f.name for f in factors] + ["N"])
        for key, val in counts.items():
            writer.writerow(list(key) + [repr(float(val))])
