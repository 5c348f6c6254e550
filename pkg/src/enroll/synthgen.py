"""Synthetic trials and patients labelled by an executable rule oracle.

Every criterion is rendered from an :class:`OracleRule` through a fixed
template, so the rule is ground truth for its text by construction. Patients
and trials are grouped into disease areas with disjoint code vocabularies;
a patient drawn from another area shares nothing with a trial's rules and the
pair is labelled neutral.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .datamodel import (DEMOGRAPHIC_KEYS, Dataset, ECStatement, LabeledExample, Measurement,
                        PatientRecord, TrialCriteria, Visit)
from .nir import Interval, default_lexicon, default_unit_table

REFERENCE_YEAR = 2020


@dataclass
class GenConfig:
    n_trials: int = 100
    n_patients: int = 2000
    n_areas: int = 10
    diagnoses_per_area: int = 6
    drugs_per_area: int = 3
    procedures_per_area: int = 2
    common_diagnoses: int = 8
    common_treatments: int = 6
    min_statements: int = 3
    max_statements: int = 10
    max_visits: int = 8
    examples_per_trial: int = 200
    max_subset: int = 3
    numeric_fraction: float = 0.3
    # relative mix of the non-numeric categories
    mix_condition: float = 0.4
    mix_drug: float = 0.25
    mix_procedure: float = 0.15
    mix_demographic: float = 0.1
    mix_observation: float = 0.1
    code_presence: float = 0.5
    numeric_pass_rate: float = 0.8
    seed: int = 42

    def __post_init__(self):
        if min(self.n_trials, self.n_patients, self.n_areas) <= 0:
            raise ValueError("counts must be positive")
        if not 0.0 <= self.numeric_fraction <= 1.0:
            raise ValueError("numeric_fraction must lie in [0, 1]")
        if not 0.0 < self.code_presence < 1.0 or not 0.0 < self.numeric_pass_rate < 1.0:
            raise ValueError("rates must lie in (0, 1)")
        if self.n_patients < 2 * self.n_areas:
            raise ValueError("need at least two patients per area")
        if not 1 <= self.min_statements <= self.max_statements:
            raise ValueError("statement bounds out of order")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "GenConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in types:
                raise ValueError(f"config line {lineno}: unknown key {k!r}")
            kwargs[k] = float(v) if types[k] in (float, "float") else int(v)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "GenConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


# (name, EHR unit, low, high, alternative criterion units as (unit, factor from EHR unit))
CONCEPTS = [
    ("hemoglobin", "g/dl", 8.0, 17.0, [("g/l", 10.0)]),
    ("creatinine", "mg/dl", 0.5, 3.0, [("mg/l", 10.0)]),
    ("bilirubin", "mg/dl", 0.2, 3.0, []),
    ("albumin", "g/dl", 2.5, 5.5, [("g/l", 10.0)]),
    ("glucose", "mg/dl", 60.0, 250.0, [("g/l", 0.01)]),
    ("hba1c", "%", 4.5, 12.0, []),
    ("cholesterol", "mg/dl", 120.0, 320.0, []),
    ("triglycerides", "mg/dl", 50.0, 400.0, []),
    ("platelets", "cells/ul", 50000.0, 450000.0, []),
    ("leukocytes", "cells/ul", 2000.0, 15000.0, []),
    ("ejection fraction", "%", 15.0, 70.0, [("dimensionless", 1.0)]),
    ("bmi", "kg/m2", 16.0, 45.0, []),
    ("systolic pressure", "mmhg", 90.0, 190.0, []),
    ("potassium", "mmol/l", 3.0, 6.0, []),
    ("sodium", "mmol/l", 125.0, 150.0, []),
    ("ferritin", "ng/ml", 10.0, 600.0, [("mcg/ml", 1e-3)]),
    ("alt", "u/l", 5.0, 200.0, []),
    ("lipase", "u/l", 10.0, 300.0, []),
    ("heart rate", "bpm", 45.0, 130.0, []),
    ("weight", "kg", 45.0, 140.0, [("g", 1000.0)]),
]
AGE_RANGE = (18, 85)

_ONSETS = ["b", "c", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "cl", "dr", "gr", "pl", "tr", "st"]
_VOWELS = ["a", "e", "i", "o", "u", "ae", "ia", "ou"]
_DX_SUFFIX = ["itis", "osis", "emia", "opathy", "algia", "oma"]
_DRUG_SUFFIX = ["mab", "pril", "statin", "olol", "sartan", "tinib", "azole", "cycline"]
_PROC_SUFFIX = ["ectomy", "plasty", "otomy", "oscopy", "ostomy"]
_GENDERS = ["female", "male"]
_COUNTRIES = ["us", "ca", "gb", "de", "fr"]
_GEOS = ["north", "south", "east", "west"]
_ETHNICITIES = ["eth1", "eth2", "eth3", "eth4", "eth5"]
_BLOOD = ["apos", "aneg", "bpos", "bneg", "abpos", "abneg", "opos", "oneg"]
_FILLERS = [
    "willing to comply with scheduled visits",
    "able to provide written informed consent",
    "willing to complete study questionnaires",
]
_CMP_LOWER = [("≥", True), ("at least", True), ("more than", False), ("greater than", False),
              ("over", False), ("no less than", True)]
_CMP_UPPER = [("≤", True), ("at most", True), ("less than", False), ("below", False),
              ("under", False), ("no more than", True)]


@dataclass(frozen=True)
class OracleRule:
    """A machine-checkable predicate. ``category`` picks the template.

    condition/drug/procedure: ``code`` present in any visit.
    demographic: ``key`` equals ``value`` (or, for ``key == "age"``, the age
    measurement lies in ``interval``).
    measurement: the patient's measurement of ``concept`` lies in ``interval``
    (expressed in ``unit`` as written in the text).
    observation: always true.
    """
    category: str
    kind: str
    code: str = ""
    name: str = ""
    key: str = ""
    value: str = ""
    concept: str = ""
    comparator: str = ""
    threshold: str = ""
    unit: str = ""

    @property
    def interval(self) -> Optional[Interval]:
        if not self.comparator:
            return None
        x = float(self.threshold)
        for phrase, closed in _CMP_LOWER:
            if phrase == self.comparator:
                return Interval(x, math.inf, closed, False)
        for phrase, closed in _CMP_UPPER:
            if phrase == self.comparator:
                return Interval(-math.inf, x, False, closed)
        raise ValueError(f"unknown comparator {self.comparator!r}")

    def render(self) -> str:
        c = self.category
        if c == "condition":
            return f"history of {self.name}"
        if c == "primary":
            return f"diagnosis of {self.name}"
        if c == "drug":
            return f"prior treatment with {self.name}"
        if c == "procedure":
            return f"previous {self.name}"
        if c == "demographic":
            if self.key == "age":
                return f"age {self.comparator} {self.threshold} years"
            return f"{self.value} patients"
        if c == "measurement":
            unit = "" if self.unit == "dimensionless" else f" {self.unit}"
            return f"{self.concept} {self.comparator} {self.threshold}{unit}"
        if c == "observation":
            return self.value
        raise ValueError(f"unknown rule category {c!r}")

    def holds(self, patient: PatientRecord) -> bool:
        c = self.category
        if c in ("condition", "primary"):
            return any(v.diagnosis == self.code for v in patient.visits)
        if c in ("drug", "procedure"):
            return any(self.code in v.treatments for v in patient.visits)
        if c == "observation":
            return True
        if c == "demographic" and self.key != "age":
            return patient.demographics.get(self.key) == self.value
        concept = "age" if c == "demographic" else self.concept
        value = _latest_measurement(patient, concept)
        if value is None:
            return False
        ehr_value, ehr_unit = value
        table = default_unit_table()
        rule_unit = "years" if c == "demographic" else self.unit
        if rule_unit == "dimensionless":
            rule_unit = ehr_unit
        x = ehr_value * table.entry(ehr_unit).scale / table.entry(rule_unit).scale
        return x in self.interval

    def overlaps(self, patient: PatientRecord) -> bool:
        """True when the patient carries the code or concept this rule is about.

        Demographic and observation rules apply to everyone and never count.
        """
        c = self.category
        if c in ("condition", "primary"):
            return any(v.diagnosis == self.code for v in patient.visits)
        if c in ("drug", "procedure"):
            return any(self.code in v.treatments for v in patient.visits)
        if c == "measurement":
            return _latest_measurement(patient, self.concept) is not None
        return False


def _latest_measurement(patient: PatientRecord, concept: str):
    found = None
    for v in patient.visits:
        for m in v.measurements:
            if m.concept == concept:
                found = (m.value, m.unit)
    return found


def label_oracle(rules: Sequence[OracleRule], patient: PatientRecord,
                 trial_rules: Optional[Sequence[OracleRule]] = None) -> str:
    """Ground-truth label of ``rules`` (a statement subset) for ``patient``.

    Neutral when the patient overlaps none of ``trial_rules`` (defaults to
    ``rules``); otherwise entailment iff every inclusion rule holds and no
    exclusion rule holds.
    """
    scope = rules if trial_rules is None else trial_rules
    if not any(r.overlaps(patient) for r in scope):
        return "neutral"
    for r in rules:
        if r.holds(patient) != (r.kind == "inclusion"):
            return "contradiction"
    return "entailment"


# ---------------------------------------------------------------------------
# vocabulary of the synthetic world


@dataclass
class Area:
    index: int
    diagnoses: List[Tuple[str, str]]   # (code, name); first one is the primary condition
    drugs: List[Tuple[str, str]]
    procedures: List[Tuple[str, str]]
    concepts: List[int]                # indices into CONCEPTS


@dataclass
class World:
    areas: List[Area]
    common_diagnoses: List[str]
    common_treatments: List[str]


def _pseudo_words(rng, n, suffixes, taken):
    reserved = set(default_lexicon().stopwords) | set(default_unit_table().surfaces)
    out = []
    while len(out) < n:
        parts = [rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(int(rng.integers(1, 3)))]
        word = "".join(parts) + rng.choice(suffixes)
        if word in taken or word in reserved:
            continue
        taken.add(word)
        out.append(word)
    return out


def build_world(config: GenConfig, rng: np.random.Generator) -> World:
    taken: set = set()
    concept_order = rng.permutation(len(CONCEPTS))
    areas = []
    dx_n = tx_n = 0
    for a in range(config.n_areas):
        dx = []
        for name in _pseudo_words(rng, config.diagnoses_per_area, _DX_SUFFIX, taken):
            dx.append((f"DX{dx_n:04d}", name))
            dx_n += 1
        drugs, procs = [], []
        for name in _pseudo_words(rng, config.drugs_per_area, _DRUG_SUFFIX, taken):
            drugs.append((f"RX{tx_n:04d}", name))
            tx_n += 1
        for name in _pseudo_words(rng, config.procedures_per_area, _PROC_SUFFIX, taken):
            procs.append((f"PX{tx_n:04d}", name))
            tx_n += 1
        k = len(CONCEPTS)
        concepts = [int(concept_order[(2 * a) % k]), int(concept_order[(2 * a + 1) % k])]
        areas.append(Area(a, dx, drugs, procs, concepts))
    common_dx = [f"DX{dx_n + i:04d}" for i in range(config.common_diagnoses)]
    common_tx = [f"RX{tx_n + i:04d}" for i in range(config.common_treatments)]
    return World(areas, common_dx, common_tx)


# ---------------------------------------------------------------------------
# generators


def _round_sig(x: float, digits: int = 3) -> float:
    if x == 0:
        return 0.0
    return float(f"{x:.{digits}g}")


def _fmt(x: float) -> str:
    s = f"{x:.6g}"
    return s if "e" not in s else f"{x:.0f}"


def gen_patient(rng: np.random.Generator, config: GenConfig, world: World, area: Area,
                patient_id: str) -> PatientRecord:
    birth_year = int(rng.integers(REFERENCE_YEAR - AGE_RANGE[1], REFERENCE_YEAR - AGE_RANGE[0] + 1))
    demographics = {
        "birth_year": str(birth_year),
        "gender": str(rng.choice(_GENDERS)),
        "country": str(rng.choice(_COUNTRIES)),
        "geo": str(rng.choice(_GEOS)),
        "ethnicity": str(rng.choice(_ETHNICITIES)),
        "blood_type": str(rng.choice(_BLOOD)),
    }
    primary = area.diagnoses[0][0]
    extra_dx = [c for c, _ in area.diagnoses[1:] if rng.random() < config.code_presence]
    treatments = [c for c, _ in area.drugs + area.procedures if rng.random() < config.code_presence]
    n_visits = max(1 + len(extra_dx), int(rng.integers(1, config.max_visits + 1)))
    n_visits = min(n_visits, max(config.max_visits, 1 + len(extra_dx)))
    dx_list = [primary] + extra_dx
    while len(dx_list) < n_visits:
        dx_list.append(str(rng.choice(world.common_diagnoses)))
    order = rng.permutation(len(dx_list))
    dx_list = [dx_list[i] for i in order]
    visit_tx: List[List[str]] = [[] for _ in dx_list]
    for code in treatments:
        visit_tx[int(rng.integers(len(dx_list)))].append(code)
    for row in range(len(dx_list)):
        if rng.random() < 0.3:
            visit_tx[row].append(str(rng.choice(world.common_treatments)))
    visit_ms: List[List[Measurement]] = [[] for _ in dx_list]
    for ci in area.concepts:
        name, unit, lo, hi, _ = CONCEPTS[ci]
        value = _round_sig(float(rng.uniform(lo, hi)))
        visit_ms[int(rng.integers(len(dx_list)))].append(Measurement(name, value, unit))
    # age is recorded at the most recent visit
    start = int(rng.integers(2010, REFERENCE_YEAR - 1))
    days = np.sort(rng.choice(365 * (REFERENCE_YEAR - start), size=len(dx_list), replace=False))
    visits = []
    for row, dx in enumerate(dx_list):
        date = np.datetime64(f"{start}-01-01") + np.timedelta64(int(days[row]), "D")
        ms = list(visit_ms[row])
        if row == len(dx_list) - 1:
            year = int(str(date)[:4])
            ms.append(Measurement("age", float(year - birth_year), "years"))
        visits.append(Visit(f"{patient_id}-v{row}", str(date), dx,
                            tuple(dict.fromkeys(visit_tx[row])), tuple(ms)))
    return PatientRecord(patient_id, demographics, tuple(visits))


def _threshold(rng, lo, hi, bound: str, kind: str, pass_rate: float) -> float:
    # place the bound so that about ``pass_rate`` of a uniform population passes
    # (inclusion) or escapes (exclusion) the rule, with jitter
    target = float(np.clip(pass_rate + rng.uniform(-0.1, 0.1), 0.05, 0.95))
    if kind == "exclusion":
        target = 1.0 - target
    u = 1.0 - target if bound == "lower" else target
    return lo + u * (hi - lo)


def _numeric_rule(rng, config: GenConfig, area: Area, kind: str) -> OracleRule:
    if rng.random() < 0.25:
        bound = "lower" if rng.random() < 0.5 else "upper"
        cmp_, _ = (_CMP_LOWER if bound == "lower" else _CMP_UPPER)[int(rng.integers(6))]
        x = _threshold(rng, *AGE_RANGE, bound, kind, config.numeric_pass_rate)
        return OracleRule("demographic", kind, key="age", comparator=cmp_, threshold=str(int(round(x))))
    ci = area.concepts[int(rng.integers(len(area.concepts)))]
    name, unit, lo, hi, alts = CONCEPTS[ci]
    bound = "lower" if rng.random() < 0.5 else "upper"
    cmp_, _ = (_CMP_LOWER if bound == "lower" else _CMP_UPPER)[int(rng.integers(6))]
    x = _threshold(rng, lo, hi, bound, kind, config.numeric_pass_rate)
    text_unit, factor = unit, 1.0
    if alts and rng.random() < 0.4:
        text_unit, factor = alts[int(rng.integers(len(alts)))]
    return OracleRule("measurement", kind, concept=name, comparator=cmp_,
                      threshold=_fmt(_round_sig(x * factor)), unit=text_unit)


def gen_trial(rng: np.random.Generator, config: GenConfig, world: World, area: Area,
              trial_id: str) -> Tuple[TrialCriteria, List[OracleRule]]:
    n = int(rng.integers(config.min_statements, config.max_statements + 1))
    primary_code, primary_name = area.diagnoses[0]
    rules = [OracleRule("primary", "inclusion", code=primary_code, name=primary_name)]
    seen = {rules[0].render()}
    mix = np.array([config.mix_condition, config.mix_drug, config.mix_procedure,
                    config.mix_demographic, config.mix_observation], dtype=float)
    mix = mix / mix.sum()
    cats = ["condition", "drug", "procedure", "demographic", "observation"]
    attempts = 0
    while len(rules) < n and attempts < 200:
        attempts += 1
        kind = "inclusion" if rng.random() < 0.5 else "exclusion"
        if rng.random() < config.numeric_fraction:
            rule = _numeric_rule(rng, config, area, kind)
        else:
            cat = cats[int(rng.choice(len(cats), p=mix))]
            if cat == "condition":
                code, name = area.diagnoses[1 + int(rng.integers(len(area.diagnoses) - 1))]
                rule = OracleRule("condition", kind, code=code, name=name)
            elif cat in ("drug", "procedure"):
                pool = area.drugs if cat == "drug" else area.procedures
                code, name = pool[int(rng.integers(len(pool)))]
                rule = OracleRule(cat, kind, code=code, name=name)
            elif cat == "demographic":
                rule = OracleRule("demographic", "inclusion", key="gender",
                                  value=str(rng.choice(_GENDERS)))
            else:
                rule = OracleRule("observation", "inclusion",
                                  value=_FILLERS[int(rng.integers(len(_FILLERS)))])
        text = rule.render()
        # one rule per code/concept keeps the oracle free of self-contradiction
        subject = rule.code or rule.concept or rule.key or text
        if text in seen or any((r.code or r.concept or r.key or r.render()) == subject for r in rules):
            continue
        seen.add(text)
        rules.append(rule)
    order = [0] + list(1 + rng.permutation(len(rules) - 1))
    rules = [rules[i] for i in order]
    statements = tuple(ECStatement(f"{trial_id}-s{i}", r.kind, r.render()) for i, r in enumerate(rules))
    condition = primary_name
    return TrialCriteria(trial_id, condition, statements), rules


@dataclass
class SyntheticData:
    dataset: Dataset
    rules: Dict[str, List[OracleRule]]
    areas: Dict[str, int] = field(default_factory=dict)  # trial/patient id -> area

    def rules_for(self, example: LabeledExample) -> List[OracleRule]:
        trial = self.dataset.trials[example.trial_id]
        by_id = {s.id: r for s, r in zip(trial.statements, self.rules[example.trial_id])}
        return [by_id[s] for s in example.statement_ids]


def gen_dataset(config: GenConfig = GenConfig()) -> SyntheticData:
    rng = np.random.default_rng(config.seed)
    world = build_world(config, rng)
    areas = world.areas
    patients: Dict[str, PatientRecord] = {}
    by_area: Dict[int, List[str]] = {a.index: [] for a in areas}
    area_of: Dict[str, int] = {}
    for i in range(config.n_patients):
        area = areas[i % len(areas)]
        pid = f"P{i:05d}"
        patients[pid] = gen_patient(rng, config, world, area, pid)
        by_area[area.index].append(pid)
        area_of[pid] = area.index
    trials: Dict[str, TrialCriteria] = {}
    rules: Dict[str, List[OracleRule]] = {}
    for t in range(config.n_trials):
        area = areas[t % len(areas)]
        tid = f"T{t:04d}"
        trials[tid], rules[tid] = gen_trial(rng, config, world, area, tid)
        area_of[tid] = area.index
    examples: List[LabeledExample] = []
    for tid, trial in trials.items():
        examples.extend(_trial_examples(rng, config, trial, rules[tid], patients,
                                        by_area, area_of[tid]))
    return SyntheticData(Dataset(trials, patients, examples), rules, area_of)


def _trial_examples(rng, config, trial, rules, patients, by_area, area_index):
    per_class = config.examples_per_trial // 3
    ids = [s.id for s in trial.statements]
    same = by_area[area_index]
    others = [pid for a, pids in by_area.items() if a != area_index for pid in pids]
    pools: Dict[str, List[LabeledExample]] = {"entailment": [], "contradiction": [], "neutral": []}
    seen = set()

    # statement 0 (the trial condition) is always shown, so every example
    # carries the evidence its neutral/non-neutral label rests on
    def draw_subset():
        k = int(rng.integers(0, min(config.max_subset, len(ids))))
        rest = rng.choice(np.arange(1, len(ids)), size=k, replace=False) if k else []
        return (0,) + tuple(sorted(int(i) for i in rest))

    # same-area candidates: the natural entailment/contradiction mix, then the
    # majority class is thinned so both hit ``per_class``
    attempts = 0
    while min(len(pools["entailment"]), len(pools["contradiction"])) < per_class and attempts < 50 * per_class:
        attempts += 1
        pid = same[int(rng.integers(len(same)))]
        sub = draw_subset()
        key = (pid, sub)
        if key in seen:
            continue
        seen.add(key)
        label = label_oracle([rules[i] for i in sub], patients[pid], rules)
        pools[label].append(LabeledExample(trial.trial_id, tuple(ids[i] for i in sub), pid, label))
    for label in ("entailment", "contradiction"):
        pool = pools[label]
        if len(pool) > per_class:
            keep = np.sort(rng.choice(len(pool), size=per_class, replace=False))
            pools[label] = [pool[i] for i in keep]
    attempts = 0
    while len(pools["neutral"]) < per_class and attempts < 50 * per_class:
        attempts += 1
        pid = others[int(rng.integers(len(others)))]
        sub = draw_subset()
        if (pid, sub) in seen:
            continue
        seen.add((pid, sub))
        label = label_oracle([rules[i] for i in sub], patients[pid], rules)
        if label != "neutral":
            continue
        pools["neutral"].append(LabeledExample(trial.trial_id, tuple(ids[i] for i in sub), pid, label))
    out = pools["entailment"] + pools["contradiction"] + pools["neutral"]
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def write_dataset(data: SyntheticData, directory, config: Optional[GenConfig] = None) -> None:
    data.dataset.save(directory)
    if config is not None:
        (Path(directory) / "gen_config.txt").write_text(config.to_text(), encoding="utf-8")
