"""Typed containers for multilevel mixed data."""

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidSchema, UnknownCategory

QUANTITATIVE = "quantitative"
CATEGORICAL = "categorical"
FEATURE = "feature"
GROUP = "group"


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str = QUANTITATIVE
    categories: tuple = ()
    role: str = FEATURE

    def __post_init__(self):
        if self.role not in (FEATURE, GROUP):
            raise InvalidSchema(f"column {self.name!r}: unknown role {self.role!r}")
        if self.role == FEATURE and self.kind not in (QUANTITATIVE, CATEGORICAL):
            raise InvalidSchema(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.role == FEATURE and self.kind == CATEGORICAL:
            cats = tuple(str(c) for c in self.categories)
            if len(cats) < 2 or len(set(cats)) != len(cats):
                raise InvalidSchema(
                    f"column {self.name!r}: need at least 2 distinct categories")
            object.__setattr__(self, "categories", cats)

    @property
    def is_categorical(self):
        return self.kind == CATEGORICAL

    def to_dict(self):
        d = {"name": self.name, "kind": self.kind, "role": self.role}
        if self.categories:
            d["categories"] = list(self.categories)
        return d


def validate_schema(columns):
    columns = tuple(columns)
    n_group = sum(c.role == GROUP for c in columns)
    if n_group != 1:
        raise InvalidSchema(f"expected exactly one group column, found {n_group}")
    names = [c.name for c in columns]
    if len(set(names)) != len(names):
        raise InvalidSchema("duplicate column names")
    if not any(c.role == FEATURE for c in columns):
        raise InvalidSchema("schema has no feature columns")
    return columns


def schema_hash(columns):
    """Digest of the feature columns, used to check that sites agree on layout."""
    feats = [c.to_dict() for c in columns if c.role == FEATURE]
    blob = json.dumps(feats, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class GroupStructure:
    """Row-to-group assignment with groups coded ``0..K-1``."""

    assignment: np.ndarray
    labels: tuple = ()

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=int)
        object.__setattr__(self, "assignment", a)
        K = int(a.max()) + 1 if a.size else 0
        if a.size and (a.min() < 0 or np.any(np.bincount(a, minlength=K) == 0)):
            raise InvalidSchema("group codes must cover 0..K-1 with no empty group")
        if not self.labels:
            object.__setattr__(self, "labels", tuple(str(k) for k in range(K)))

    @classmethod
    def from_labels(cls, labels):
        """Code groups in order of first appearance."""
        codes = {}
        assignment = [codes.setdefault(lab, len(codes)) for lab in labels]
        return cls(np.array(assignment, dtype=int), tuple(codes))

    @classmethod
    def single(cls, n):
        return cls(np.zeros(n, dtype=int))

    @property
    def n(self):
        return len(self.assignment)

    @property
    def K(self):
        return len(self.labels)

    @property
    def sizes(self):
        return np.bincount(self.assignment, minlength=self.K)

    def rows(self, k):
        return np.flatnonzero(self.assignment == k)

    def means(self, X):
        """(K, p) matrix of per-group column means."""
        X = np.asarray(X, dtype=float)
        return np.vstack([X[self.rows(k)].mean(axis=0) for k in range(self.K)])

    def expand(self, G):
        """Replicate per-group rows to per-individual rows."""
        return np.asarray(G)[self.assignment]

    def subset(self, rows):
        sub = self.assignment[rows]
        keep = np.unique(sub)
        remap = {int(k): i for i, k in enumerate(keep)}
        return GroupStructure(np.array([remap[int(k)] for k in sub], dtype=int),
                              tuple(self.labels[int(k)] for k in keep))


@dataclass
class MixedDataset:
    """Quantitative and categorical features with group labels and missingness.

    ``quantitative`` holds NaN at missing cells; ``categorical`` holds integer
    category codes with -1 at missing cells.  ``schema`` lists every column in
    file order, including the group column.
    """

    schema: tuple
    quantitative: np.ndarray
    categorical: np.ndarray
    groups: GroupStructure
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.schema = validate_schema(self.schema)
        n = self.groups.n
        self.quantitative = np.asarray(self.quantitative, dtype=float).reshape(
            n, len(self.quantitative_columns))
        self.categorical = np.asarray(self.categorical, dtype=int).reshape(
            n, len(self.categorical_columns))
        for j, col in enumerate(self.categorical_columns):
            codes = self.categorical[:, j]
            if np.any((codes < -1) | (codes >= len(col.categories))):
                raise InvalidSchema(f"column {col.name!r}: category code out of range")

    # -- construction -------------------------------------------------------

    @classmethod
    def from_arrays(cls, quantitative=None, categorical=None, groups=None,
                    categories=None, quantitative_names=None, categorical_names=None,
                    group_name="group"):
        """Build a dataset from arrays.

        ``categorical`` may hold labels (with None/NaN for missing); labels are
        coded against ``categories`` (one sequence per column), which default to
        the sorted observed labels.
        """
        n = None
        if quantitative is not None:
            quantitative = np.asarray(quantitative, dtype=float)
            if quantitative.ndim == 1:
                quantitative = quantitative[:, None]
            n = quantitative.shape[0]
        if categorical is not None:
            categorical = np.asarray(categorical, dtype=object)
            if categorical.ndim == 1:
                categorical = categorical[:, None]
            n = categorical.shape[0]
        if n is None:
            raise InvalidSchema("no feature columns given")
        if quantitative is None:
            quantitative = np.zeros((n, 0))
        if categorical is None:
            categorical = np.zeros((n, 0), dtype=object)
        if groups is None:
            groups = GroupStructure.single(n)
        elif not isinstance(groups, GroupStructure):
            groups = GroupStructure.from_labels(list(groups))

        p_q, p_c = quantitative.shape[1], categorical.shape[1]
        quantitative_names = quantitative_names or [f"q{j + 1}" for j in range(p_q)]
        categorical_names = categorical_names or [f"c{j + 1}" for j in range(p_c)]
        if categories is None:
            categories = []
            for j in range(p_c):
                obs = {str(v) for v in categorical[:, j] if not _is_missing(v)}
                categories.append(tuple(sorted(obs)))
        schema = [ColumnSchema(group_name, role=GROUP)]
        schema += [ColumnSchema(nm) for nm in quantitative_names]
        schema += [ColumnSchema(nm, CATEGORICAL, tuple(cats))
                   for nm, cats in zip(categorical_names, categories)]
        codes = np.full((n, p_c), -1, dtype=int)
        for j, col in enumerate(schema[1 + p_q:]):
            codes[:, j] = encode_labels(categorical[:, j], col)
        return cls(tuple(schema), quantitative, codes, groups)

    # -- structure ----------------------------------------------------------

    @property
    def n(self):
        return self.groups.n

    @property
    def features(self):
        return tuple(c for c in self.schema if c.role == FEATURE)

    @property
    def group_column(self):
        return next(c for c in self.schema if c.role == GROUP)

    @property
    def quantitative_columns(self):
        return tuple(c for c in self.features if not c.is_categorical)

    @property
    def categorical_columns(self):
        return tuple(c for c in self.features if c.is_categorical)

    @property
    def n_categories(self):
        return tuple(len(c.categories) for c in self.categorical_columns)

    @property
    def kind(self):
        """'quantitative', 'categorical' or 'mixed'."""
        has_q = bool(self.quantitative_columns)
        has_c = bool(self.categorical_columns)
        if has_q and has_c:
            return "mixed"
        return QUANTITATIVE if has_q else CATEGORICAL

    @property
    def quantitative_mask(self):
        return ~np.isnan(self.quantitative)

    @property
    def categorical_mask(self):
        return self.categorical >= 0

    @property
    def mask(self):
        """(n, p) observation mask over feature columns in schema order."""
        out = np.empty((self.n, len(self.features)), dtype=bool)
        qi = ci = 0
        qm, cm = self.quantitative_mask, self.categorical_mask
        for j, col in enumerate(self.features):
            if col.is_categorical:
                out[:, j] = cm[:, ci]
                ci += 1
            else:
                out[:, j] = qm[:, qi]
                qi += 1
        return out

    def split_feature_mask(self, mask):
        """Split an (n, p) feature-order mask into (quantitative, categorical) parts."""
        kinds = np.array([c.is_categorical for c in self.features], dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        return mask[:, ~kinds], mask[:, kinds]

    @property
    def is_complete(self):
        return bool(self.mask.all())

    def labels(self):
        """Categorical values as labels (None at missing cells)."""
        out = np.empty(self.categorical.shape, dtype=object)
        for j, col in enumerate(self.categorical_columns):
            codes = self.categorical[:, j]
            out[:, j] = [col.categories[c] if c >= 0 else None for c in codes]
        return out

    # -- derivation ---------------------------------------------------------

    def with_values(self, quantitative=None, categorical=None, groups=None):
        return replace(
            self,
            quantitative=self.quantitative.copy() if quantitative is None else quantitative,
            categorical=self.categorical.copy() if categorical is None else categorical,
            groups=self.groups if groups is None else groups,
            extra=dict(self.extra),
        )

    def masked(self, drop):
        """Copy with the cells flagged in ``drop`` (an (n, p) feature mask) set missing."""
        dq, dc = self.split_feature_mask(drop)
        quant = self.quantitative.copy()
        cat = self.categorical.copy()
        quant[dq] = np.nan
        cat[dc] = -1
        return self.with_values(quant, cat)

    def subset(self, rows):
        rows = np.asarray(rows)
        return replace(self, quantitative=self.quantitative[rows].copy(),
                       categorical=self.categorical[rows].copy(),
                       groups=self.groups.subset(rows), extra=dict(self.extra))

    def select_features(self, names):
        """Keep only the named feature columns (plus the group column)."""
        names = set(names)
        schema = tuple(c for c in self.schema if c.role == GROUP or c.name in names)
        qi = [j for j, c in enumerate(self.quantitative_columns) if c.name in names]
        ci = [j for j, c in enumerate(self.categorical_columns) if c.name in names]
        return MixedDataset(schema, self.quantitative[:, qi].copy(),
                            self.categorical[:, ci].copy(), self.groups)


def _is_missing(v):
    return v is None or (isinstance(v, float) and np.isnan(v))


def encode_labels(values, column):
    """Map labels to category codes (-1 for missing)."""
    index = {c: i for i, c in enumerate(column.categories)}
    out = np.full(len(values), -1, dtype=int)
    for i, v in enumerate(values):
        if _is_missing(v):
            continue
        key = str(v)
        if key not in index:
            raise UnknownCategory(v, column.name)
        out[i] = index[key]
    return out


def stack(datasets):
    """Row-concatenate site datasets; each site becomes one group."""
    first = datasets[0]
    for d in datasets[1:]:
        if schema_hash(d.schema) != schema_hash(first.schema):
            raise InvalidSchema("datasets have different feature schemas")
    quant = np.vstack([d.quantitative for d in datasets])
    cat = np.vstack([d.categorical for d in datasets])
    assignment = np.concatenate([np.full(d.n, k) for k, d in enumerate(datasets)])
    groups = GroupStructure(assignment, tuple(str(k) for k in range(len(datasets))))
    return MixedDataset(first.schema, quant, cat, groups)
