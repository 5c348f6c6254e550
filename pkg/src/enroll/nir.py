"""Quantity triples from criterion text and their comparison with EHR measurements.

A criterion such as ``"more than 20 mg"`` becomes ``QuantityTriple(range=(20, inf),
unit="mg", concept="")``. Comparison against a recorded ``(value, unit)`` first
checks that both units share a dimension, then normalises to the base unit and
tests interval membership.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .datamodel import ECStatement, Measurement, PatientRecord
from .ec_encoder import tokenize

ENTAILMENT = "entailment"
CONTRADICTION = "contradiction"
NOT_COMPARABLE = "not_comparable"
DIMENSIONLESS = "dimensionless"

INF = math.inf
BOUND_RTOL = 1e-9


class UnknownUnitError(KeyError):
    pass


@dataclass(frozen=True)
class Interval:
    lo: float = -INF
    hi: float = INF
    lo_closed: bool = False
    hi_closed: bool = False

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"interval lower bound {self.lo} exceeds upper bound {self.hi}")
        if math.isinf(self.lo) and math.isinf(self.hi):
            raise ValueError("interval needs at least one finite bound")

    def __contains__(self, x: float) -> bool:
        if x < self.lo or (x == self.lo and not self.lo_closed):
            return False
        if x > self.hi or (x == self.hi and not self.hi_closed):
            return False
        return True

    def scaled(self, factor: float) -> "Interval":
        return Interval(self.lo * factor, self.hi * factor, self.lo_closed, self.hi_closed)

    def __str__(self):
        lo = "-inf" if math.isinf(self.lo) else f"{self.lo:g}"
        hi = "+inf" if math.isinf(self.hi) else f"{self.hi:g}"
        return f"{'[' if self.lo_closed else '('}{lo}, {hi}{']' if self.hi_closed else ')'}"


@dataclass(frozen=True)
class QuantityTriple:
    range: Interval
    unit: str
    concept: str = ""


@dataclass(frozen=True)
class UnitEntry:
    surface: str
    dimension: str
    scale: float
    base: str


class UnitTable:
    """Surface form -> (dimension, scale to base unit)."""

    def __init__(self, entries: Iterable[UnitEntry]):
        self._by_surface: Dict[str, UnitEntry] = {}
        self._canonical: Dict[str, str] = {}
        first: Dict[Tuple[str, float], str] = {}
        for e in entries:
            if not e.scale > 0:
                raise ValueError(f"unit {e.surface!r}: scale must be positive")
            key = e.surface.lower()
            if key in self._by_surface:
                raise ValueError(f"duplicate unit surface {e.surface!r}")
            self._by_surface[key] = e
            self._canonical[key] = first.setdefault((e.dimension, e.scale), key)

    @classmethod
    def from_json(cls, text: str) -> "UnitTable":
        return cls(UnitEntry(d["surface"], d["dimension"], float(d["scale"]), d["base"])
                   for d in json.loads(text))

    @classmethod
    def load(cls, path) -> "UnitTable":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    @property
    def surfaces(self) -> List[str]:
        return list(self._by_surface)

    def __contains__(self, surface: str) -> bool:
        return surface.lower() in self._by_surface

    def entry(self, surface: str) -> UnitEntry:
        try:
            return self._by_surface[surface.lower()]
        except KeyError:
            raise UnknownUnitError(surface) from None

    def canonical(self, surface: str) -> str:
        """First-listed surface with the same dimension and scale (``weeks`` -> ``week``)."""
        if surface == DIMENSIONLESS:
            return DIMENSIONLESS
        self.entry(surface)
        return self._canonical[surface.lower()]

    def dimension(self, surface: str) -> str:
        if surface == DIMENSIONLESS:
            return DIMENSIONLESS
        return self.entry(surface).dimension


@lru_cache(maxsize=None)
def default_unit_table() -> UnitTable:
    return UnitTable.from_json(resources.files("enroll.data").joinpath("units.json").read_text("utf-8"))


@dataclass(frozen=True)
class Lexicon:
    prefix: Tuple[Tuple[Tuple[str, ...], str, bool], ...]
    suffix: Tuple[Tuple[Tuple[str, ...], str, bool], ...]
    connectors: frozenset
    openers: frozenset
    written_numbers: Dict[str, int]
    stopwords: frozenset

    @classmethod
    def from_json(cls, text: str) -> "Lexicon":
        d = json.loads(text)
        prefix, suffix = [], []
        for c in d["comparators"]:
            entry = (tuple(tokenize(c["phrase"])), c["bound"], bool(c["closed"]))
            (prefix if c["position"] == "prefix" else suffix).append(entry)
        # longest phrase wins ("not exceeding" before "exceeding")
        prefix.sort(key=lambda e: -len(e[0]))
        suffix.sort(key=lambda e: -len(e[0]))
        return cls(tuple(prefix), tuple(suffix), frozenset(d["range_connectors"]),
                   frozenset(d["range_openers"]), dict(d["written_numbers"]),
                   frozenset(d["stopwords"]))

    @property
    def comparator_words(self) -> frozenset:
        return frozenset(w for phrase, _, _ in self.prefix + self.suffix for w in phrase)


@lru_cache(maxsize=None)
def default_lexicon() -> Lexicon:
    return Lexicon.from_json(resources.files("enroll.data").joinpath("comparators.json").read_text("utf-8"))


# ---------------------------------------------------------------------------
# normalisation and comparison


def normalize(value: float, unit: str, table: Optional[UnitTable] = None) -> Tuple[float, str]:
    """``(value in base unit, dimension)``; raises :class:`UnknownUnitError`."""
    if unit == DIMENSIONLESS:
        return float(value), DIMENSIONLESS
    table = table or default_unit_table()
    e = table.entry(unit)
    return float(value) * e.scale, e.dimension


def denormalize(value: float, unit: str, table: Optional[UnitTable] = None) -> float:
    if unit == DIMENSIONLESS:
        return float(value)
    table = table or default_unit_table()
    return float(value) / table.entry(unit).scale


def compare_quantity(ec: QuantityTriple, ehr: Tuple[float, str],
                     table: Optional[UnitTable] = None) -> str:
    table = table or default_unit_table()
    value, unit = ehr
    try:
        dim_ec = table.dimension(ec.unit)
        dim_ehr = table.dimension(unit)
    except UnknownUnitError:
        return NOT_COMPARABLE
    if dim_ec != dim_ehr:
        return NOT_COMPARABLE
    scale = 1.0 if ec.unit == DIMENSIONLESS else table.entry(ec.unit).scale
    x = normalize(value, unit, table)[0] / scale
    # decimal unit factors are inexact in binary (9000 ng/ml -> 9.000000000000002 mg/l);
    # a value within rounding distance of a bound is treated as equal to it
    for bound in (ec.range.lo, ec.range.hi):
        if math.isfinite(bound) and math.isclose(x, bound, rel_tol=BOUND_RTOL, abs_tol=0.0):
            x = bound
    return ENTAILMENT if x in ec.range else CONTRADICTION


# ---------------------------------------------------------------------------
# extraction


def _number(token: str, lex: Lexicon) -> Optional[float]:
    if token in lex.written_numbers:
        return float(lex.written_numbers[token])
    if token[:1].isdigit() and not token[-2:].isalpha():
        return float(token.replace(",", ""))
    return None


def _match_prefix(tokens, end, lex):
    """Comparator phrase ending right before index ``end``: (start, bound, closed)."""
    for phrase, bound, closed in lex.prefix:
        n = len(phrase)
        if end - n >= 0 and tuple(tokens[end - n:end]) == phrase:
            return end - n, bound, closed
    return None


def _match_suffix(tokens, start, lex):
    for phrase, bound, closed in lex.suffix:
        n = len(phrase)
        if tuple(tokens[start:start + n]) == phrase:
            return start + n, bound, closed
    return None


def _is_content(tok, lex, table, comparator_words):
    return (tok.isalpha() or any(ch.isalpha() for ch in tok)) and tok not in lex.stopwords \
        and tok not in table and tok not in comparator_words and tok not in lex.written_numbers \
        and not tok.startswith("[")


def _concept_before(tokens, start, lex, table, cw, limit=3):
    i = start - 1
    while i >= 0 and tokens[i] in lex.stopwords:
        i -= 1
    words = []
    while i >= 0 and len(words) < limit and _is_content(tokens[i], lex, table, cw):
        words.append(tokens[i])
        i -= 1
    return list(reversed(words))


def _concept_after(tokens, start, lex, table, cw, limit=3):
    i = start
    while i < len(tokens) and tokens[i] in lex.stopwords:
        i += 1
    words = []
    while i < len(tokens) and len(words) < limit and _is_content(tokens[i], lex, table, cw):
        words.append(tokens[i])
        i += 1
    return words


def extract_quantities(text: str, table: Optional[UnitTable] = None,
                       lexicon: Optional[Lexicon] = None) -> List[QuantityTriple]:
    """Best-effort scan of ``text`` for (range, unit, concept) triples."""
    table = table or default_unit_table()
    lex = lexicon or default_lexicon()
    cw = lex.comparator_words
    tokens = tokenize(text)
    out: List[QuantityTriple] = []
    i = 0
    while i < len(tokens):
        q = _number(tokens[i], lex)
        if q is None:
            i += 1
            continue
        start, last = i, i
        hi_q = None
        # ranges: "18-65", "18 to 65", "between 18 and 65"
        if i + 1 < len(tokens) and _number(tokens[i + 1], lex) is not None and tokens[i + 1][:1].isdigit():
            hi_q, last = _number(tokens[i + 1], lex), i + 1
        elif i + 2 < len(tokens) and tokens[i + 1] in lex.connectors and _number(tokens[i + 2], lex) is not None:
            if tokens[i + 1] != "and" or (i > 0 and tokens[i - 1] in lex.openers):
                hi_q, last = _number(tokens[i + 2], lex), i + 2
        # a unit may follow either bound of a range ("18 years to 65 years" is not handled)
        unit = DIMENSIONLESS
        nxt = last + 1
        if nxt < len(tokens) and tokens[nxt] in table:
            unit = table.canonical(tokens[nxt])
            nxt += 1
        bound, closed, phrase_start = "point", True, start
        if hi_q is not None:
            if i > 0 and tokens[i - 1] in lex.openers:
                phrase_start = i - 1
            lo_v, hi_v = sorted((q, hi_q))
            rng = Interval(lo_v, hi_v, True, True)
        else:
            pm = _match_prefix(tokens, start, lex)
            sm = _match_suffix(tokens, nxt, lex)
            if pm is not None:
                phrase_start, bound, closed = pm
            elif sm is not None:
                nxt, bound, closed = sm
            if bound == "lower":
                rng = Interval(q, INF, closed, False)
            elif bound == "upper":
                rng = Interval(-INF, q, False, closed)
            else:
                rng = Interval(q, q, True, True)
        words = _concept_before(tokens, phrase_start, lex, table, cw)
        if not words:
            words = _concept_after(tokens, nxt, lex, table, cw)
        out.append(QuantityTriple(rng, unit, " ".join(words)))
        i = nxt
    return out


# ---------------------------------------------------------------------------
# statement-level verdict


def concept_tokens(concept: str, lexicon: Optional[Lexicon] = None) -> set:
    lex = lexicon or default_lexicon()
    return {t for t in tokenize(concept) if t not in lex.stopwords}


def quantity_match(statements: Sequence[ECStatement], patient: PatientRecord,
                   table: Optional[UnitTable] = None,
                   lexicon: Optional[Lexicon] = None) -> str:
    """Conjunction of quantity checks over every triple in ``statements``.

    Each triple is paired with measurements whose concept shares a token with it
    and whose unit is dimension-compatible. A triple without a unit takes the
    unit of the measurement it is paired with. Inclusion triples are violated
    by out-of-range values; exclusion triples by in-range values. Any violation
    gives ``contradiction``; otherwise (including no triples) ``entailment``.
    """
    table = table or default_unit_table()
    lex = lexicon or default_lexicon()
    measurements: List[Measurement] = [m for m in patient.measurements() if not m.unknown_unit]
    m_tokens = [concept_tokens(m.concept, lex) for m in measurements]
    for st in statements:
        for triple in extract_quantities(st.text, table, lex):
            c_tokens = concept_tokens(triple.concept, lex)
            if not c_tokens:
                continue
            for m, mt in zip(measurements, m_tokens):
                if not c_tokens & mt or m.unit not in table:
                    continue
                t = triple
                if t.unit == DIMENSIONLESS:
                    t = QuantityTriple(t.range, table.canonical(m.unit), t.concept)
                verdict = compare_quantity(t, (m.value, m.unit), table)
                if verdict == NOT_COMPARABLE:
                    continue
                satisfied = verdict == ENTAILMENT
                if satisfied == (st.kind == "exclusion"):
                    return CONTRADICTION
    return ENTAILMENT
