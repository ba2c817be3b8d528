"""Design matrices for cell-structured regressions.

Terms are main effects or interactions of the poststratification factors.
Classical coding omits each factor's baseline level; batch coding keeps
every indicator column and tags the block with a batch identifier so all
its coefficients can share one prior variance component. A constant
column is always present and always first.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import PoststratificationTable, SurveyDataset
from .errors import ConfigError, DataError, RankDeficiencyError, SchemaError

CODINGS = ("classical", "batch")

# Singular values below RANK_TOL times the largest declare collinearity.
RANK_TOL = 1e-10


@dataclass(frozen=True)
class Term:
    """One design term: a factor or an interaction of factors, with its coding."""

    factors: tuple[str, ...]
    coding: str = "classical"

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if not self.factors:
            raise SchemaError("a term needs at least one factor")
        if len(set(self.factors)) != len(self.factors):
            raise SchemaError(f"term {self.name!r} repeats a factor")
        if self.coding not in CODINGS:
            raise SchemaError(f"unknown coding {self.coding!r} for term {self.name!r}")

    @property
    def name(self) -> str:
        return ":".join(self.factors)


@dataclass(frozen=True)
class DesignSpec:
    """Ordered list of terms; the constant term is implicit and always first."""

    terms: tuple[Term, ...]

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        seen = set()
        for t in self.terms:
            key = frozenset(t.factors)
            if key in seen:
                raise SchemaError(f"duplicate term {t.name!r}")
            seen.add(key)

    @classmethod
    def of(cls, *terms: str | Term, coding: str = "classical") -> "DesignSpec":
        """Shorthand: terms as 'factor' or 'a:b' strings with one shared coding."""
        built = [
            t if isinstance(t, Term) else Term(tuple(t.split(":")), coding)
            for t in terms
        ]
        return cls(tuple(built))


@dataclass(frozen=True)
class DesignMatrices:
    """Sample matrix X (n x k), population cell matrix X_pop (J x k), batch map.

    ``batch_map[c]`` is None for unpenalized columns, else the batch id whose
    variance component governs column ``c``. Rows of X equal the X_pop row of
    the respondent's cell by construction.
    """

    X: np.ndarray
    X_pop: np.ndarray
    batch_map: tuple[str | None, ...]
    column_names: tuple[str, ...]
    cell_of: np.ndarray
    N_pop: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    @property
    def J(self) -> int:
        return self.X_pop.shape[0]

    @property
    def batches(self) -> tuple[str, ...]:
        seen: list[str] = []
        for b in self.batch_map:
            if b is not None and b not in seen:
                seen.append(b)
        return tuple(seen)

    def require_population(self) -> np.ndarray:
        if self.N_pop is None:
            raise DataError("design matrices carry no population cell counts")
        return self.N_pop


def _term_columns(term: Term, table: PoststratificationTable):
    """Indicator columns of one term evaluated on the cell grid."""
    specs = [table.factors[[f.name for f in table.factors].index(name)] for name in term.factors]
    fidx = [[f.name for f in table.factors].index(name) for name in term.factors]
    cols, names = [], []
    if term.coding == "classical":
        level_sets = [
            [l for l in range(s.n_levels) if l != s.baseline] for s in specs
        ]
    else:
        level_sets = [list(range(s.n_levels)) for s in specs]
    for combo in itertools.product(*level_sets):
        col = np.ones(table.J)
        for fi, lev, spec in zip(fidx, combo, specs):
            col = col * (table.combos[:, fi] == lev)
        cols.append(col)
        names.append(
            ":".join(f"{s.name}={s.levels[l]}" for s, l in zip(specs, combo))
        )
    return cols, names


def build_design(
    spec: DesignSpec,
    table: PoststratificationTable,
    dataset: SurveyDataset | None = None,
) -> DesignMatrices:
    """Build X and X_pop for a design over the table's factors.

    Classical coding contributes (levels - 1) columns per main effect and the
    product of (levels - 1) for interactions; batch coding contributes the
    full level counts. Column order is a pure function of the spec, so equal
    specs give byte-identical matrices. Raises ``RankDeficiencyError`` naming
    the first unpenalized term whose columns are collinear with what precedes
    them in the sample.
    """
    table_names = {f.name for f in table.factors}
    for t in spec.terms:
        for name in t.factors:
            if name not in table_names:
                raise SchemaError(
                    f"term {t.name!r} uses factor {name!r} absent from the cell table"
                )
    if dataset is not None and dataset.n != table.cell_of.shape[0]:
        raise DataError("dataset and table disagree on the number of respondents")

    pop_cols = [np.ones(table.J)]
    names = ["const"]
    batch_map: list[str | None] = [None]
    term_spans: list[tuple[Term, slice]] = []
    for t in spec.terms:
        cols, cnames = _term_columns(t, table)
        term_spans.append((t, slice(len(pop_cols), len(pop_cols) + len(cols))))
        pop_cols.extend(cols)
        names.extend(cnames)
        batch_map.extend([t.name if t.coding == "batch" else None] * len(cols))

    X_pop = np.column_stack(pop_cols)
    X = X_pop[table.cell_of]

    # Collinearity among the unpenalized columns is surfaced, not repaired;
    # penalized batches are allowed to overlap (the prior keeps them proper).
    kept = X[:, [0]]
    for t, span in term_spans:
        if t.coding == "batch":
            continue
        block = X[:, span]
        trial = np.hstack([kept, block])
        s = np.linalg.svd(trial, compute_uv=False)
        if trial.shape[1] > trial.shape[0] or s[-1] <= RANK_TOL * s[0]:
            raise RankDeficiencyError(
                f"classical design is collinear at term {t.name!r}"
            )
        kept = trial

    return DesignMatrices(
        X=X,
        X_pop=X_pop,
        batch_map=tuple(batch_map),
        column_names=tuple(names),
        cell_of=table.cell_of.copy(),
        N_pop=None if table.N_j is None else table.N_j.copy(),
    )


def prior_precision(
    matrices: DesignMatrices, sigmas: Mapping[str, float]
) -> np.ndarray:
    """Diagonal prior precision: zero for unpenalized columns, 1/sigma^2 per batch.

    Every batch appearing in the design must have a finite sigma > 0; a batch
    meant to be unpenalized should be recoded as such, not given sigma = inf.
    """
    diag = np.zeros(matrices.k)
    for c, b in enumerate(matrices.batch_map):
        if b is None:
            continue
        if b not in sigmas:
            raise SchemaError(f"no standard deviation supplied for batch {b!r}")
        s = float(sigmas[b])
        if not np.isfinite(s) or s <= 0:
            raise DataError(f"batch {b!r}: sigma must be finite and positive, got {s}")
        diag[c] = 1.0 / (s * s)
    return np.diag(diag)


def design_from_config(source) -> DesignSpec:
    """Parse a DesignSpec from a JSON config: a list of {term, coding} objects.

    ``source`` may be a path or an already-parsed list/dict. Terms are written
    ``"factor"`` or ``"factorA:factorB"``.
    """
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, encoding="utf-8") as fh:
            source = json.load(fh)
    if isinstance(source, dict):
        source = source.get("terms", None)
        if source is None:
            raise ConfigError("design config must have a 'terms' list")
    if not isinstance(source, list):
        raise ConfigError("design config must be a list of {term, coding} entries")
    terms = []
    for entry in source:
        if isinstance(entry, str):
            entry = {"term": entry}
        if "term" not in entry:
            raise ConfigError(f"design entry {entry!r} lacks a 'term' key")
        coding = entry.get("coding", "classical")
        terms.append(Term(tuple(str(entry["term"]).split(":")), coding))
    return DesignSpec(tuple(terms))
