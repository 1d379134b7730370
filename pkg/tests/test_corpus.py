import numpy as np
import pytest
from hypothesis import given

from mixtopic.corpus import (
    LabObservation, RegularToken, Schema, corpus_summary, parse_corpus, parse_meta, write_corpus,
    write_meta,
)
from mixtopic.errors import ParseError, SchemaError, ValidationError

from conftest import corpora


def _write(tmp_path, name, lines):
    p = tmp_path / name
    p.write_text("".join(line + "\n" for line in lines))
    return str(p)


# --- parse_meta -------------------------------------------------------------


def test_meta_empty_file(tmp_path):
    with pytest.raises(SchemaError, match="no types defined"):
        parse_meta(_write(tmp_path, "m", []))


def test_meta_one_regular_type_and_lab(tmp_path):
    s = parse_meta(_write(tmp_path, "m", ["1 1 1", "1 2 1", "2 1 2"]))
    assert s.T == 1 and list(s.W) == [2]
    assert s.L == 1 and list(s.V) == [2]
    assert s.lab_type_id == 2


def test_meta_duplicate_feature(tmp_path):
    with pytest.raises(SchemaError, match="duplicate"):
        parse_meta(_write(tmp_path, "m", ["1 1 1", "1 1 1"]))


def test_meta_malformed_line_reports_line(tmp_path):
    with pytest.raises(ParseError) as info:
        parse_meta(_write(tmp_path, "m", ["1 1 1", "1 x 1"]))
    assert info.value.lineno == 2


def test_meta_wrong_field_count(tmp_path):
    with pytest.raises(ParseError):
        parse_meta(_write(tmp_path, "m", ["1 1"]))


def test_meta_noncontiguous_features(tmp_path):
    with pytest.raises(SchemaError):
        parse_meta(_write(tmp_path, "m", ["1 1 1", "1 3 1"]))


def test_meta_noncontiguous_types(tmp_path):
    with pytest.raises(SchemaError):
        parse_meta(_write(tmp_path, "m", ["1 1 1", "3 1 1"]))


def test_meta_two_lab_types(tmp_path):
    with pytest.raises(SchemaError):
        parse_meta(_write(tmp_path, "m", ["1 1 2", "2 1 3"]))


def test_meta_mixed_lab_type(tmp_path):
    with pytest.raises(SchemaError):
        parse_meta(_write(tmp_path, "m", ["1 1 2", "1 2 1"]))


def test_meta_tabs_and_comments(tmp_path):
    s = parse_meta(_write(tmp_path, "m", ["# header", "1\t1   1", "1 2\t1"]))
    assert list(s.W) == [2] and s.L == 0


# --- parse_corpus -----------------------------------------------------------


@pytest.fixture
def schema():
    return Schema.build([5], [2])  # type 1 regular (W=5), type 2 labs


def test_corpus_empty_file(tmp_path, schema):
    c = parse_corpus(_write(tmp_path, "d", []), schema)
    assert c.D == 0


def test_corpus_lab_row(tmp_path, schema):
    c = parse_corpus(_write(tmp_path, "d", ["7 2 1 2 3"]), schema)
    assert list(c.iter_labs()) == [LabObservation(7, 1, 2, 3)]
    assert c.observed[c.index_of(7), 0]


def test_corpus_merge_duplicates(tmp_path, schema):
    c = parse_corpus(_write(tmp_path, "d", ["7 1 5 1 1", "7 1 5 1 2"]), schema)
    assert list(c.iter_tokens()) == [RegularToken(7, 1, 5, 3)]


def test_corpus_first_appearance_order(tmp_path, schema):
    c = parse_corpus(_write(tmp_path, "d", ["9 1 1 1 1", "3 1 1 1 1", "9 1 2 1 1"]), schema)
    assert list(c.patient_ids) == [9, 3]


@pytest.mark.parametrize("line", ["1 1 6 1 1", "1 2 2 1 1", "1 2 1 3 1", "1 3 1 1 1", "1 1 1 2 1"])
def test_corpus_out_of_range(tmp_path, schema, line):
    with pytest.raises(ValidationError):
        parse_corpus(_write(tmp_path, "d", [line]), schema)


@pytest.mark.parametrize("count", [0, -2])
def test_corpus_nonpositive_count(tmp_path, schema, count):
    with pytest.raises(ValidationError):
        parse_corpus(_write(tmp_path, "d", [f"1 1 1 1 {count}"]), schema)


def test_corpus_lenient_drops_unknown(tmp_path, schema):
    c = parse_corpus(_write(tmp_path, "d", ["1 1 1 1 1", "1 1 9 1 1", "2 4 1 1 1"]), schema, strict=False)
    assert c.dropped == 2
    assert c.D == 2 and len(c.tok_count) == 1


def test_corpus_comment_lines(tmp_path, schema):
    c = parse_corpus(_write(tmp_path, "d", ["# comment", "1 1 1 1 1"]), schema)
    assert c.D == 1


# --- corpus_summary -----------------------------------------------------------


def test_summary_empty(tmp_path, schema):
    s = corpus_summary(parse_corpus(_write(tmp_path, "d", []), schema))
    assert (s.D, s.token_entries, s.token_count, s.lab_entries, s.lab_count) == (0, 0, 0, 0, 0)
    assert s.observation_rate == 0.0


def test_summary_example(tmp_path, schema):
    c = parse_corpus(_write(tmp_path, "d", ["7 1 5 1 1", "7 1 5 1 2", "7 2 1 2 3"]), schema)
    s = corpus_summary(c)
    assert s.D == 1 and s.token_entries == 1 and s.token_count == 3 and s.lab_entries == 1


def test_summary_saturated():
    D, L = 1000, 10
    s = Schema.build([3], [2] * L)
    jj, ll = np.meshgrid(np.arange(D), np.arange(L), indexing="ij")
    labs = (jj.ravel(), ll.ravel(), np.zeros(D * L), np.ones(D * L))
    from mixtopic.corpus import Corpus

    c = Corpus.from_arrays(s, np.arange(1, D + 1), None, labs)
    assert corpus_summary(c).observation_rate == 1.0


# --- properties -------------------------------------------------------------


@given(corpora())
def test_roundtrip(tmp_path_factory, c):
    d = tmp_path_factory.mktemp("rt")
    write_meta(c.schema, d / "m")
    write_corpus(c, d / "d")
    s2 = parse_meta(d / "m")
    assert s2 == c.schema
    c2 = parse_corpus(d / "d", s2)
    assert c2.same_as(c)


@given(corpora())
def test_observed_iff_lab_rows(c):
    r = np.zeros((c.D, c.schema.L), dtype=bool)
    tot = np.zeros((c.D, c.schema.L), dtype=np.int64)
    np.add.at(tot, (c.lab_patient, c.lab_test), c.lab_count)
    r[tot >= 1] = True
    assert np.array_equal(c.observed, r)


@given(corpora())
def test_token_totals(c):
    for j in range(c.D):
        for t in range(c.schema.T):
            sel = (c.tok_patient == j) & (c.tok_type == t)
            assert c.token_totals[j, t] == c.tok_count[sel].sum()


@given(corpora())
def test_subset_identity(c):
    assert c.subset(np.arange(c.D)).same_as(c)
