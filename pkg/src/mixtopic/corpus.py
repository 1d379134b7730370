"""Sparse heterogeneous patient records and the on-disk text format.

Two whitespace-separated text files describe a corpus:

* a meta file with lines ``type_id feature_id state_count``;
* a data file with lines ``patient_id type_id feature_id state_id count``.

Regular data types have ``state_count == 1`` for every feature.  At most one
type is the lab type: each of its features is a lab test and its state count
is the number of distinct result values of that test.
"""

from __future__ import annotations

import hashlib
import os
from collections import namedtuple
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ParseError, SchemaError, ValidationError

__all__ = [
    "TypeSchema",
    "LabSchema",
    "Schema",
    "RegularToken",
    "LabObservation",
    "Corpus",
    "CorpusSummary",
    "parse_meta",
    "parse_corpus",
    "corpus_summary",
    "write_meta",
    "write_corpus",
]

REGULAR = "regular"
LAB = "lab"

RegularToken = namedtuple("RegularToken", "patient_id type_id feature_id count")
LabObservation = namedtuple("LabObservation", "patient_id lab_id value count")


@dataclass(frozen=True)
class TypeSchema:
    type_id: int
    feature_count: int
    kind: str = REGULAR


@dataclass(frozen=True)
class LabSchema:
    lab_id: int
    value_count: int


@dataclass(frozen=True)
class Schema:
    """Data types plus per-test value vocabularies.

    Regular types are indexed ``0..T-1`` in type-id order; lab tests are
    indexed ``0..L-1``.  Features of all regular types are laid out in one flat
    index space (``feature_offsets``), as are the values of all lab tests
    (``value_offsets``).
    """

    types: tuple
    labs: tuple = ()

    def __post_init__(self):
        kinds = [t.kind for t in self.types]
        if not self.types:
            raise SchemaError("no types defined")
        if kinds.count(LAB) > 1:
            raise SchemaError("more than one lab type defined")
        ids = [t.type_id for t in self.types]
        if ids != list(range(1, len(ids) + 1)):
            raise SchemaError(f"type ids must be contiguous from 1, got {ids}")
        for t in self.types:
            if t.feature_count < 1:
                raise SchemaError(f"type {t.type_id} has no features")
        lab_ids = [lab.lab_id for lab in self.labs]
        if lab_ids != list(range(1, len(lab_ids) + 1)):
            raise SchemaError("lab ids must be contiguous from 1")
        for lab in self.labs:
            if lab.value_count < 2:
                raise SchemaError(f"lab {lab.lab_id} needs at least 2 values")
        if LAB in kinds:
            lab_type = self.types[kinds.index(LAB)]
            if lab_type.feature_count != len(self.labs):
                raise SchemaError("lab type feature count disagrees with lab list")
        elif self.labs:
            raise SchemaError("labs given without a lab type")

    @classmethod
    def build(cls, feature_counts, value_counts=(), lab_type_id=None):
        """Schema from plain lists; the lab type goes last unless placed."""
        feature_counts = [int(w) for w in feature_counts]
        value_counts = [int(v) for v in value_counts]
        n_types = len(feature_counts) + (1 if value_counts else 0)
        if value_counts and lab_type_id is None:
            lab_type_id = n_types
        types = []
        it = iter(feature_counts)
        for type_id in range(1, n_types + 1):
            if type_id == lab_type_id:
                types.append(TypeSchema(type_id, len(value_counts), LAB))
            else:
                types.append(TypeSchema(type_id, next(it), REGULAR))
        labs = tuple(LabSchema(i + 1, v) for i, v in enumerate(value_counts))
        return cls(tuple(types), labs)

    @cached_property
    def regular_types(self):
        return tuple(t for t in self.types if t.kind == REGULAR)

    @cached_property
    def lab_type_id(self):
        for t in self.types:
            if t.kind == LAB:
                return t.type_id
        return None

    @property
    def T(self):
        return len(self.regular_types)

    @property
    def L(self):
        return len(self.labs)

    @cached_property
    def W(self):
        return np.array([t.feature_count for t in self.regular_types], dtype=np.int64)

    @cached_property
    def V(self):
        return np.array([lab.value_count for lab in self.labs], dtype=np.int64)

    @cached_property
    def feature_offsets(self):
        return np.concatenate([[0], np.cumsum(self.W)]).astype(np.int64)

    @cached_property
    def value_offsets(self):
        return np.concatenate([[0], np.cumsum(self.V)]).astype(np.int64)

    @property
    def n_features(self):
        return int(self.W.sum())

    @property
    def n_values(self):
        return int(self.V.sum())

    @property
    def v_max(self):
        return int(self.V.max()) if self.L else 1

    @cached_property
    def feature_type(self):
        """Regular-type index of every flat feature."""
        return np.repeat(np.arange(self.T, dtype=np.int64), self.W)

    @cached_property
    def value_lab(self):
        """Lab index of every flat value slot."""
        return np.repeat(np.arange(self.L, dtype=np.int64), self.V)

    @cached_property
    def type_index(self):
        """Map from regular type_id to its 0-based index."""
        return {t.type_id: i for i, t in enumerate(self.regular_types)}

    def meta_lines(self):
        for t in self.types:
            if t.kind == LAB:
                for lab in self.labs:
                    yield f"{t.type_id} {lab.lab_id} {lab.value_count}"
            else:
                for w in range(1, t.feature_count + 1):
                    yield f"{t.type_id} {w} 1"

    @cached_property
    def hash(self):
        h = hashlib.sha256()
        for line in self.meta_lines():
            h.update(line.encode("ascii"))
            h.update(b"\n")
        return h.hexdigest()

    def to_dict(self):
        return {
            "types": [[t.type_id, t.feature_count, t.kind] for t in self.types],
            "labs": [[lab.lab_id, lab.value_count] for lab in self.labs],
        }

    @classmethod
    def from_dict(cls, d):
        types = tuple(TypeSchema(int(a), int(b), str(c)) for a, b, c in d["types"])
        labs = tuple(LabSchema(int(a), int(b)) for a, b in d["labs"])
        return cls(types, labs)


def _read_int_lines(path, n_fields):
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != n_fields:
                raise ParseError(
                    f"expected {n_fields} fields, got {len(parts)}", path, lineno
                )
            try:
                yield lineno, tuple(int(p) for p in parts)
            except ValueError:
                raise ParseError(f"non-integer field in {line!r}", path, lineno) from None


def parse_meta(path):
    """Read a meta file into a :class:`Schema`."""
    per_type = {}
    for lineno, (type_id, feature_id, states) in _read_int_lines(path, 3):
        if type_id < 1 or feature_id < 1 or states < 1:
            raise ParseError("ids and state counts must be positive", path, lineno)
        features = per_type.setdefault(type_id, {})
        if feature_id in features:
            raise SchemaError(
                f"duplicate (type,feature) ({type_id},{feature_id}) at line {lineno}"
            )
        features[feature_id] = states
    if not per_type:
        raise SchemaError("no types defined")

    types = []
    labs = ()
    for type_id in sorted(per_type):
        features = per_type[type_id]
        ids = sorted(features)
        if ids != list(range(1, len(ids) + 1)):
            raise SchemaError(f"feature ids of type {type_id} are not contiguous from 1")
        states = [features[w] for w in ids]
        if max(states) >= 2:
            if min(states) < 2:
                raise SchemaError(
                    f"type {type_id} mixes single-state features with lab tests"
                )
            if labs:
                raise SchemaError("more than one lab type defined")
            labs = tuple(LabSchema(w, s) for w, s in zip(ids, states))
            types.append(TypeSchema(type_id, len(ids), LAB))
        else:
            types.append(TypeSchema(type_id, len(ids), REGULAR))
    return Schema(tuple(types), labs)


def _merge(keys, counts):
    """Sort rows by their key columns and sum counts of duplicate keys."""
    if len(counts) == 0:
        return [k[:0] for k in keys], counts[:0]
    order = np.lexsort(tuple(reversed(keys)))
    keys = [k[order] for k in keys]
    counts = counts[order]
    new = np.ones(len(counts), dtype=bool)
    same = np.ones(len(counts) - 1, dtype=bool)
    for k in keys:
        same &= k[1:] == k[:-1]
    new[1:] = ~same
    starts = np.flatnonzero(new)
    return [k[starts] for k in keys], np.add.reduceat(counts, starts)


def _frozen(a, dtype=np.int64):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Corpus:
    """Immutable sparse corpus with dense patient indices ``0..D-1``.

    Tokens are rows ``(patient, type, feature, count)`` and labs are rows
    ``(patient, test, value, count)``; type, feature, test and value columns
    are 0-based.  Both tables are sorted and free of duplicate keys.  A lab
    test with no row for a patient is unobserved for that patient.
    """

    schema: Schema
    patient_ids: np.ndarray
    tok_patient: np.ndarray
    tok_type: np.ndarray
    tok_feature: np.ndarray
    tok_count: np.ndarray
    lab_patient: np.ndarray
    lab_test: np.ndarray
    lab_value: np.ndarray
    lab_count: np.ndarray
    dropped: int = 0
    _index: dict = field(default=None, repr=False, compare=False)

    @classmethod
    def from_arrays(cls, schema, patient_ids, tokens=None, labs=None, dropped=0):
        """Validate, merge duplicates and freeze.

        ``tokens`` is ``(patient, type, feature, count)`` and ``labs`` is
        ``(patient, test, value, count)``, all 0-based except counts.
        """
        patient_ids = np.asarray(patient_ids, dtype=np.int64)
        D = len(patient_ids)
        if len(np.unique(patient_ids)) != D:
            raise ValidationError("duplicate patient ids")
        empty = np.zeros(0, dtype=np.int64)
        tokens = [np.asarray(a, dtype=np.int64) for a in (tokens or (empty,) * 4)]
        labs = [np.asarray(a, dtype=np.int64) for a in (labs or (empty,) * 4)]

        tp, tt, tw, tc = tokens
        if len(tc):
            if tc.min() < 1:
                raise ValidationError("token counts must be >= 1")
            if tp.min() < 0 or tp.max() >= D:
                raise ValidationError("token patient index out of range")
            if tt.min() < 0 or tt.max() >= schema.T:
                raise ValidationError("token type out of range")
            if tw.min() < 0 or np.any(tw >= schema.W[tt]):
                raise ValidationError("token feature out of range")
        lp, ll, lv, lc = labs
        if len(lc):
            if lc.min() < 1:
                raise ValidationError("lab counts must be >= 1")
            if lp.min() < 0 or lp.max() >= D:
                raise ValidationError("lab patient index out of range")
            if ll.min() < 0 or ll.max() >= schema.L:
                raise ValidationError("lab test out of range")
            if lv.min() < 0 or np.any(lv >= schema.V[ll]):
                raise ValidationError("lab value out of range")

        (tp, tt, tw), tc = _merge([tp, tt, tw], tc)
        (lp, ll, lv), lc = _merge([lp, ll, lv], lc)
        return cls(
            schema,
            _frozen(patient_ids),
            _frozen(tp), _frozen(tt), _frozen(tw), _frozen(tc),
            _frozen(lp), _frozen(ll), _frozen(lv), _frozen(lc),
            int(dropped),
        )

    @property
    def D(self):
        return len(self.patient_ids)

    def index_of(self, patient_id):
        if self._index is None:
            object.__setattr__(
                self, "_index", {int(p): i for i, p in enumerate(self.patient_ids)}
            )
        return self._index[int(patient_id)]

    @cached_property
    def observed(self):
        """Boolean ``(D, L)`` matrix; True where the test has any result row."""
        r = np.zeros((self.D, self.schema.L), dtype=bool)
        r[self.lab_patient, self.lab_test] = True
        r.setflags(write=False)
        return r

    @cached_property
    def token_totals(self):
        """``(D, T)`` total token count per patient and regular type."""
        out = np.zeros((self.D, self.schema.T), dtype=np.int64)
        np.add.at(out, (self.tok_patient, self.tok_type), self.tok_count)
        return out

    @cached_property
    def tok_ptr(self):
        return np.searchsorted(self.tok_patient, np.arange(self.D + 1)).astype(np.int64)

    @cached_property
    def lab_ptr(self):
        return np.searchsorted(self.lab_patient, np.arange(self.D + 1)).astype(np.int64)

    def iter_tokens(self):
        types = self.schema.regular_types
        for j, t, w, c in zip(self.tok_patient, self.tok_type, self.tok_feature, self.tok_count):
            yield RegularToken(int(self.patient_ids[j]), types[t].type_id, int(w) + 1, int(c))

    def iter_labs(self):
        for j, l, v, c in zip(self.lab_patient, self.lab_test, self.lab_value, self.lab_count):
            yield LabObservation(int(self.patient_ids[j]), int(l) + 1, int(v) + 1, int(c))

    def subset(self, idx):
        """Corpus restricted to the given patient indices, in that order."""
        idx = np.asarray(idx, dtype=np.int64)
        remap = np.full(self.D, -1, dtype=np.int64)
        remap[idx] = np.arange(len(idx))
        keep_t = remap[self.tok_patient] >= 0
        keep_l = remap[self.lab_patient] >= 0
        return Corpus.from_arrays(
            self.schema,
            self.patient_ids[idx],
            (remap[self.tok_patient[keep_t]], self.tok_type[keep_t],
             self.tok_feature[keep_t], self.tok_count[keep_t]),
            (remap[self.lab_patient[keep_l]], self.lab_test[keep_l],
             self.lab_value[keep_l], self.lab_count[keep_l]),
        )

    def data_lines(self):
        types = self.schema.regular_types
        pid = self.patient_ids
        lab_type = self.schema.lab_type_id
        ti, li = 0, 0
        # interleave per patient so files read naturally
        for j in range(self.D):
            while ti < len(self.tok_count) and self.tok_patient[ti] == j:
                t = types[self.tok_type[ti]].type_id
                yield f"{pid[j]} {t} {self.tok_feature[ti] + 1} 1 {self.tok_count[ti]}"
                ti += 1
            while li < len(self.lab_count) and self.lab_patient[li] == j:
                yield (f"{pid[j]} {lab_type} {self.lab_test[li] + 1} "
                       f"{self.lab_value[li] + 1} {self.lab_count[li]}")
                li += 1

    def same_as(self, other):
        """Content equality (schema, patient order and all rows)."""
        if self.schema != other.schema:
            return False
        names = ["patient_ids", "tok_patient", "tok_type", "tok_feature", "tok_count",
                 "lab_patient", "lab_test", "lab_value", "lab_count"]
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in names)


def parse_corpus(data_path, schema, strict=True):
    """Read a data file against ``schema``.

    With ``strict=False`` rows naming unknown types, features, tests or values
    are skipped and counted in ``Corpus.dropped`` instead of raising.
    """
    order = {}
    tok_rows = []
    lab_rows = []
    dropped = 0
    lab_type = schema.lab_type_id
    tindex = schema.type_index
    for lineno, (pid, type_id, feature_id, state_id, count) in _read_int_lines(data_path, 5):
        if count <= 0:
            raise ValidationError(f"{data_path}:{lineno}: count must be >= 1, got {count}")
        try:
            if type_id == lab_type:
                l, v = feature_id - 1, state_id - 1
                if not (0 <= l < schema.L):
                    raise ValidationError(f"lab id {feature_id} out of range")
                if not (0 <= v < schema.V[l]):
                    raise ValidationError(f"value {state_id} out of range for lab {feature_id}")
                row = (l, v, count)
                target = lab_rows
            else:
                if type_id not in tindex:
                    raise ValidationError(f"unknown type id {type_id}")
                t = tindex[type_id]
                if not (1 <= feature_id <= schema.W[t]):
                    raise ValidationError(f"feature id {feature_id} out of range for type {type_id}")
                if state_id != 1:
                    raise ValidationError(f"regular type {type_id} requires state_id 1")
                row = (t, feature_id - 1, count)
                target = tok_rows
        except ValidationError as exc:
            if strict:
                raise ValidationError(f"{data_path}:{lineno}: {exc}") from None
            dropped += 1
            # the patient still exists even when all its rows are unknown
            order.setdefault(pid, len(order))
            continue
        j = order.setdefault(pid, len(order))
        target.append((j,) + row)

    def cols(rows):
        if not rows:
            return None
        return tuple(np.array(rows, dtype=np.int64).T)

    patient_ids = np.fromiter(order.keys(), dtype=np.int64, count=len(order))
    return Corpus.from_arrays(schema, patient_ids, cols(tok_rows), cols(lab_rows), dropped)


@dataclass(frozen=True)
class CorpusSummary:
    D: int
    T: int
    L: int
    n_features: int
    token_entries: int
    token_count: int
    lab_entries: int
    lab_count: int
    observation_rate: float

    def as_rows(self):
        return [(k, getattr(self, k)) for k in self.__dataclass_fields__]


def corpus_summary(c):
    D, L = c.D, c.schema.L
    pairs = D * L
    rate = float(c.observed.sum()) / pairs if pairs else 0.0
    return CorpusSummary(
        D=D,
        T=c.schema.T,
        L=L,
        n_features=c.schema.n_features,
        token_entries=int(len(c.tok_count)),
        token_count=int(c.tok_count.sum()),
        lab_entries=int(len(c.lab_count)),
        lab_count=int(c.lab_count.sum()),
        observation_rate=rate,
    )


def write_meta(schema, path):
    with open(path, "w", encoding="ascii") as fh:
        for line in schema.meta_lines():
            fh.write(line + "\n")


def write_corpus(c, path):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="ascii") as fh:
        for line in c.data_lines():
            fh.write(line + "\n")
    os.replace(tmp, path)
