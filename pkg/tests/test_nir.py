import json
import math
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enroll.datamodel import ECStatement, Measurement, PatientRecord, Visit
from enroll.nir import (CONTRADICTION, DIMENSIONLESS, ENTAILMENT, INF, NOT_COMPARABLE, Interval,
                        QuantityTriple, UnitTable, compare_quantity, default_unit_table, denormalize,
                        extract_quantities, normalize, quantity_match)

from conftest import DEMO

GOLDEN = Path(__file__).parent / "data" / "nir_golden.jsonl"
TABLE = default_unit_table()

# exact scales, written out by hand, for the oracle below
EXACT = {
    "mcg": ("mass", Fraction(1, 10**6)), "mg": ("mass", Fraction(1, 1000)), "g": ("mass", Fraction(1)),
    "kg": ("mass", Fraction(1000)), "ng/ml": ("conc", Fraction(1, 10**6)), "mg/dl": ("conc", Fraction(1, 100)),
    "g/dl": ("conc", Fraction(10)), "mg/l": ("conc", Fraction(1, 1000)), "hours": ("time", Fraction(1, 24)),
    "days": ("time", Fraction(1)), "weeks": ("time", Fraction(7)), "months": ("time", Fraction(30)),
    "years": ("time", Fraction(365)), "%": ("pct", Fraction(1)), "zorgs": ("?", Fraction(1)),
}


def oracle(lo, hi, lo_closed, hi_closed, ec_unit, value, ehr_unit):
    """Convert the record value into the criterion's unit with exact rationals, then compare.

    ``value`` is the decimal the record means, as a Fraction.
    """
    if ec_unit == "zorgs" or ehr_unit == "zorgs" or EXACT[ec_unit][0] != EXACT[ehr_unit][0]:
        return NOT_COMPARABLE
    x = Fraction(value) * EXACT[ehr_unit][1] / EXACT[ec_unit][1]
    above = lo is None or x > lo or (lo_closed and x == lo)
    below = hi is None or x < hi or (hi_closed and x == hi)
    return ENTAILMENT if above and below else CONTRADICTION


def _interval(lo, hi, lc, hc):
    return Interval(-INF if lo is None else lo, INF if hi is None else hi, lc, hc)


# -- golden extraction ----------------------------------------------------------------

def _golden():
    return [json.loads(line) for line in GOLDEN.read_text(encoding="utf-8").splitlines() if line.strip()]


def _as_rows(triples):
    return [(None if math.isinf(q.range.lo) else q.range.lo, None if math.isinf(q.range.hi) else q.range.hi,
             q.range.lo_closed, q.range.hi_closed, q.unit, q.concept) for q in triples]


def _expected(case):
    return [(t["lo"], t["hi"], t["lo_closed"], t["hi_closed"], t["unit"], t["concept"]) for t in case["triples"]]


def golden_accuracy():
    cases = _golden()
    hits = sum(_as_rows(extract_quantities(c["text"])) == _expected(c) for c in cases)
    return hits / len(cases), len(cases)


def test_golden_file_exact_match_rate():
    rate, n = golden_accuracy()
    assert n == 40
    assert rate >= 0.95


@pytest.mark.parametrize("text,expected", [
    ("more than 20 mg", (20.0, None, False, False, "mg")),
    ("at least one month", (1.0, None, True, False, "month")),
    ("within 12 weeks", (None, 12.0, False, True, "week")),
    ("ejection fraction ≤ 40", (None, 40.0, False, True, DIMENSIONLESS)),
])
def test_required_phrases(text, expected):
    (row,) = _as_rows(extract_quantities(text))
    assert row[:5] == expected


def test_no_number_no_triple():
    assert extract_quantities("diagnosis of glorbitis") == []


# -- compare_quantity against the oracle ------------------------------------------------

def _random_case(rng):
    units = sorted(EXACT)
    ec_unit, ehr_unit = rng.choice(units), rng.choice(units)
    if rng.random() < 0.6:
        # same dimension most of the time so both verdicts are exercised
        dim = EXACT[ec_unit][0]
        ehr_unit = rng.choice([u for u in units if EXACT[u][0] == dim])
    a, b = sorted(int(v) for v in rng.integers(0, 200, size=2))
    kind = rng.integers(4)
    lo, hi = (a, None) if kind == 0 else (None, b) if kind == 1 else (a, b) if kind == 2 else (a, a)
    lc, hc = bool(rng.integers(2)), bool(rng.integers(2))
    if kind == 3:
        lc = hc = True
    if rng.random() < 0.3 and EXACT[ehr_unit][0] == EXACT[ec_unit][0]:
        # land exactly on a bound when the unit ratio allows an integer
        bound = lo if lo is not None else hi
        x = Fraction(bound) * EXACT[ec_unit][1] / EXACT[ehr_unit][1]
        value = x if x.denominator == 1 else Fraction(int(rng.integers(0, 200)))
    else:
        value = Fraction(int(rng.integers(0, 2000)), int(rng.choice([1, 2, 10])))
    return lo, hi, lc, hc, ec_unit, value, ehr_unit


def compare_agreement(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    table = UnitTable.from_json(json.dumps(
        [{"surface": e.surface, "dimension": e.dimension, "scale": e.scale, "base": e.base}
         for e in (TABLE.entry(s) for s in TABLE.surfaces)]))
    agree = 0
    for _ in range(n):
        lo, hi, lc, hc, ec_unit, value, ehr_unit = _random_case(rng)
        got = compare_quantity(QuantityTriple(_interval(lo, hi, lc, hc), ec_unit),
                               (float(value), ehr_unit), table)
        agree += got == oracle(lo, hi, lc, hc, ec_unit, value, ehr_unit)
    return agree / n


def test_compare_quantity_matches_oracle():
    assert compare_agreement() == 1.0


def test_unit_conversion_examples():
    assert normalize(500, "mg") == (pytest.approx(0.5), "mass")
    assert denormalize(normalize(500, "mg")[0], "g") == pytest.approx(0.5)
    assert normalize(2, "weeks")[0] == 14.0
    more_than_20mg = QuantityTriple(Interval(20, INF, False, False), "mg")
    assert compare_quantity(more_than_20mg, (0.5, "g")) == ENTAILMENT
    assert compare_quantity(more_than_20mg, (0.02, "g")) == CONTRADICTION
    assert compare_quantity(more_than_20mg, (21, "zorgs")) == NOT_COMPARABLE
    assert compare_quantity(more_than_20mg, (21, "days")) == NOT_COMPARABLE


@settings(max_examples=100, deadline=None)
@given(st.floats(0.001, 1e4), st.sampled_from(["mg", "g", "kg", "mcg"]), st.sampled_from(["mg", "g", "kg", "mcg"]))
def test_normalize_roundtrip_and_consistency(x, u1, u2):
    base, dim = normalize(x, u1)
    assert dim == "mass"
    assert denormalize(base, u1) == pytest.approx(x, rel=1e-12)
    # the same physical amount expressed in another unit normalises identically
    assert normalize(denormalize(base, u2), u2)[0] == pytest.approx(base, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(-1000, 1000), st.integers(-1000, 1000))
def test_trichotomy(value, bound):
    below = compare_quantity(QuantityTriple(Interval(-INF, bound, False, False), "mg"), (value, "mg"))
    equal = compare_quantity(QuantityTriple(Interval(bound, bound, True, True), "mg"), (value, "mg"))
    above = compare_quantity(QuantityTriple(Interval(bound, INF, False, False), "mg"), (value, "mg"))
    assert [below, equal, above].count(ENTAILMENT) == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
def test_lower_bound_monotone(bound, x, y):
    q = QuantityTriple(Interval(bound, INF, True, False), "mg")
    small, big = sorted((x, y))
    if compare_quantity(q, (small, "mg")) == ENTAILMENT:
        assert compare_quantity(q, (big, "mg")) == ENTAILMENT


def test_interval_validation():
    with pytest.raises(ValueError):
        Interval(5, 1)
    with pytest.raises(ValueError):
        Interval()
    assert str(Interval(20, INF)) == "(20, +inf)"


# -- statement-level verdicts ----------------------------------------------------------

def _patient(*measurements):
    return PatientRecord("P", DEMO, (Visit("v", "2019-01-01", "D", (), tuple(measurements)),))


@pytest.mark.parametrize("kind,text,concept,value,unit,expected", [
    ("inclusion", "hemoglobin at least 10 g/dl", "hemoglobin", 12.0, "g/dl", ENTAILMENT),
    ("inclusion", "hemoglobin at least 10 g/dl", "hemoglobin", 9.0, "g/dl", CONTRADICTION),
    ("inclusion", "hemoglobin at least 10 g/dl", "hemoglobin", 120.0, "g/l", ENTAILMENT),
    ("exclusion", "hemoglobin below 9 g/dl", "hemoglobin", 8.0, "g/dl", CONTRADICTION),
    ("exclusion", "hemoglobin below 9 g/dl", "hemoglobin", 12.5, "g/dl", ENTAILMENT),
    ("inclusion", "ejection fraction ≤ 40", "ejection fraction", 35.0, "%", ENTAILMENT),
    ("inclusion", "ejection fraction ≤ 40", "ejection fraction", 55.0, "%", CONTRADICTION),
    ("inclusion", "creatinine below 1.5 mg/dl", "hemoglobin", 3.0, "g/dl", ENTAILMENT),
    ("inclusion", "hemoglobin at least 10 g/dl", "hemoglobin", 1.0, "mmol/l", ENTAILMENT),
    ("inclusion", "diagnosis of glorbitis", "hemoglobin", 1.0, "g/dl", ENTAILMENT),
])
def test_quantity_match_cases(kind, text, concept, value, unit, expected):
    patient = _patient(Measurement(concept, value, unit))
    assert quantity_match([ECStatement("s", kind, text)], patient) == expected


def test_unknown_unit_measurement_is_ignored():
    st_ = ECStatement("s", "inclusion", "hemoglobin at least 10 g/dl")
    p = _patient(Measurement("hemoglobin", 1.0, "zorgs", unknown_unit=True))
    assert quantity_match([st_], p) == ENTAILMENT


def test_any_violation_contradicts():
    ok = ECStatement("a", "inclusion", "hemoglobin at least 10 g/dl")
    bad = ECStatement("b", "inclusion", "potassium below 3 mmol/l")
    p = _patient(Measurement("hemoglobin", 12.0, "g/dl"), Measurement("potassium", 4.0, "mmol/l"))
    assert quantity_match([ok], p) == ENTAILMENT
    assert quantity_match([ok, bad], p) == CONTRADICTION
