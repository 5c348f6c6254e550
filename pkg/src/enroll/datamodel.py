"""Trial, patient and label records, vocabularies, JSONL I/O and patient splits."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

LABELS = ("entailment", "contradiction", "neutral")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}
KINDS = ("inclusion", "exclusion")
DEMOGRAPHIC_KEYS = ("birth_year", "gender", "country", "geo", "ethnicity", "blood_type")
UNK = "<unk>"


class ValidationError(ValueError):
    """Raised for malformed records; carries the source location when known."""


class UnknownCodeError(KeyError):
    pass


@dataclass(frozen=True)
class ECStatement:
    id: str
    kind: str
    text: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"statement {self.id!r}: kind must be one of {KINDS}, got {self.kind!r}")
        if not self.text or not self.text.strip():
            raise ValidationError(f"statement {self.id!r}: empty text")


@dataclass(frozen=True)
class TrialCriteria:
    trial_id: str
    condition: str
    statements: Tuple[ECStatement, ...]

    def __post_init__(self):
        if not self.statements:
            raise ValidationError(f"trial {self.trial_id!r}: no statements")
        ids = [s.id for s in self.statements]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"trial {self.trial_id!r}: duplicate statement ids")

    def statement(self, statement_id: str) -> ECStatement:
        for s in self.statements:
            if s.id == statement_id:
                return s
        raise ValidationError(f"trial {self.trial_id!r} has no statement {statement_id!r}")

    def subset(self, statement_ids: Sequence[str]) -> "TrialCriteria":
        return TrialCriteria(self.trial_id, self.condition,
                             tuple(self.statement(i) for i in statement_ids))


@dataclass(frozen=True)
class Measurement:
    concept: str
    value: float
    unit: str
    unknown_unit: bool = False


@dataclass(frozen=True)
class Visit:
    visit_id: str
    date: str
    diagnosis: str
    treatments: Tuple[str, ...] = ()
    measurements: Tuple[Measurement, ...] = ()


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    demographics: Dict[str, str]
    visits: Tuple[Visit, ...]

    def __post_init__(self):
        if not self.visits:
            raise ValidationError(f"patient {self.patient_id!r}: no visits")
        if set(self.demographics) != set(DEMOGRAPHIC_KEYS):
            raise ValidationError(
                f"patient {self.patient_id!r}: demographics keys must be {DEMOGRAPHIC_KEYS}"
            )

    def measurements(self) -> List[Measurement]:
        return [m for v in self.visits for m in v.measurements]


@dataclass(frozen=True)
class LabeledExample:
    trial_id: str
    statement_ids: Tuple[str, ...]
    patient_id: str
    label: str

    def __post_init__(self):
        if self.label not in LABEL_INDEX:
            raise ValidationError(f"label must be one of {LABELS}, got {self.label!r}")
        if not self.statement_ids:
            raise ValidationError("example has no statement ids")


class Vocabulary:
    """Closed code <-> index bijection, optionally with a trailing UNK slot."""

    def __init__(self, codes: Iterable[str], with_unk: bool = False):
        self._codes: List[str] = []
        self._index: Dict[str, int] = {}
        for c in codes:
            if c not in self._index:
                self._index[c] = len(self._codes)
                self._codes.append(c)
        self.with_unk = with_unk
        if with_unk:
            self._index[UNK] = len(self._codes)
            self._codes.append(UNK)

    def __len__(self):
        return len(self._codes)

    def __contains__(self, code):
        return code in self._index

    def index(self, code: str) -> int:
        i = self._index.get(code)
        if i is None:
            if self.with_unk:
                return self._index[UNK]
            raise UnknownCodeError(code)
        return i

    def code(self, index: int) -> str:
        return self._codes[index]

    @property
    def codes(self) -> List[str]:
        return list(self._codes)


def one_hot(code: str, vocab: Vocabulary) -> np.ndarray:
    out = np.zeros(len(vocab), dtype=np.float64)
    out[vocab.index(code)] = 1.0
    return out


@dataclass
class Vocabularies:
    diagnoses: Vocabulary
    treatments: Vocabulary
    demographics: Vocabulary
    tokens: Vocabulary

    @classmethod
    def build(cls, trials: Iterable[TrialCriteria], patients: Iterable[PatientRecord],
              tokenize=None) -> "Vocabularies":
        """Sorted, hence reload-stable, vocabularies over the given corpus."""
        if tokenize is None:
            from .ec_encoder import tokenize
        from .ec_encoder import statement_tokens

        diag, treat, demo, toks = set(), set(), set(), set()
        for p in patients:
            for k, v in p.demographics.items():
                demo.add(f"{k}={v}")
            for visit in p.visits:
                diag.add(visit.diagnosis)
                treat.update(visit.treatments)
        for t in trials:
            for s in t.statements:
                toks.update(statement_tokens(s, tokenize))
        return cls(Vocabulary(sorted(diag), with_unk=True),
                   Vocabulary(sorted(treat), with_unk=True),
                   Vocabulary(sorted(demo), with_unk=True),
                   Vocabulary(sorted(toks)))


# ---------------------------------------------------------------------------
# JSONL


def _read_jsonl(path) -> Iterable[Tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: JSON parse error: {exc.msg}") from None


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def trial_to_json(t: TrialCriteria) -> dict:
    return {"trial_id": t.trial_id, "condition": t.condition,
            "criteria": [{"id": s.id, "kind": s.kind, "text": s.text} for s in t.statements]}


def trial_from_json(d: dict) -> TrialCriteria:
    return TrialCriteria(
        trial_id=str(d["trial_id"]),
        condition=str(d.get("condition", "")),
        statements=tuple(ECStatement(str(c["id"]), c["kind"], c["text"]) for c in d["criteria"]),
    )


def load_trials(path) -> List[TrialCriteria]:
    trials, seen = [], set()
    for lineno, d in _read_jsonl(path):
        try:
            t = trial_from_json(d)
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{path}:{lineno}: missing field {exc}") from None
        except ValidationError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None
        if t.trial_id in seen:
            raise ValidationError(f"{path}:{lineno}: duplicate trial_id {t.trial_id!r}")
        seen.add(t.trial_id)
        trials.append(t)
    return trials


def save_trials(path, trials: Iterable[TrialCriteria]) -> None:
    Path(path).write_text("".join(_dumps(trial_to_json(t)) + "\n" for t in trials), encoding="utf-8")


def patient_to_json(p: PatientRecord) -> dict:
    return {
        "patient_id": p.patient_id,
        "demographics": {k: p.demographics[k] for k in DEMOGRAPHIC_KEYS},
        "visits": [
            {"visit_id": v.visit_id, "date": v.date, "diagnosis": v.diagnosis,
             "treatments": list(v.treatments),
             "measurements": [{"concept": m.concept, "value": m.value, "unit": m.unit}
                              for m in v.measurements]}
            for v in p.visits
        ],
    }


def patient_from_json(d: dict, known_units: Optional[set] = None) -> PatientRecord:
    if known_units is None:
        from .nir import default_unit_table
        known_units = set(default_unit_table().surfaces)
    visits = []
    for v in d["visits"]:
        ms = tuple(
            Measurement(str(m["concept"]), float(m["value"]), str(m["unit"]),
                        unknown_unit=m["unit"].lower() not in known_units)
            for m in v.get("measurements", [])
        )
        visits.append(Visit(str(v["visit_id"]), str(v["date"]), str(v["diagnosis"]),
                            tuple(dict.fromkeys(v.get("treatments", []))), ms))
    visits.sort(key=lambda v: (v.date, v.visit_id))
    demo = {k: str(val) for k, val in d["demographics"].items()}
    return PatientRecord(str(d["patient_id"]), demo, tuple(visits))


def load_patients(path, known_units: Optional[set] = None) -> List[PatientRecord]:
    patients, seen = [], set()
    for lineno, d in _read_jsonl(path):
        try:
            p = patient_from_json(d, known_units)
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{path}:{lineno}: missing field {exc}") from None
        except ValidationError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None
        if p.patient_id in seen:
            raise ValidationError(f"{path}:{lineno}: duplicate patient_id {p.patient_id!r}")
        seen.add(p.patient_id)
        patients.append(p)
    return patients


def save_patients(path, patients: Iterable[PatientRecord]) -> None:
    Path(path).write_text("".join(_dumps(patient_to_json(p)) + "\n" for p in patients),
                          encoding="utf-8")


def example_to_json(e: LabeledExample) -> dict:
    return {"trial_id": e.trial_id, "statement_ids": list(e.statement_ids),
            "patient_id": e.patient_id, "label": e.label}


def load_labels(path, trials: Optional[Dict[str, TrialCriteria]] = None,
                patients: Optional[Dict[str, PatientRecord]] = None) -> List[LabeledExample]:
    """Load examples; when lookup tables are given every id must resolve."""
    out = []
    for lineno, d in _read_jsonl(path):
        try:
            e = LabeledExample(str(d["trial_id"]), tuple(str(s) for s in d["statement_ids"]),
                               str(d["patient_id"]), d["label"])
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"{path}:{lineno}: missing field {exc}") from None
        except ValidationError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None
        if trials is not None:
            t = trials.get(e.trial_id)
            if t is None:
                raise ValidationError(f"{path}:{lineno}: unknown trial_id {e.trial_id!r}")
            try:
                for sid in e.statement_ids:
                    t.statement(sid)
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
        if patients is not None and e.patient_id not in patients:
            raise ValidationError(f"{path}:{lineno}: unknown patient_id {e.patient_id!r}")
        out.append(e)
    return out


def save_labels(path, examples: Iterable[LabeledExample]) -> None:
    Path(path).write_text("".join(_dumps(example_to_json(e)) + "\n" for e in examples),
                          encoding="utf-8")


@dataclass
class Dataset:
    trials: Dict[str, TrialCriteria]
    patients: Dict[str, PatientRecord]
    examples: List[LabeledExample] = field(default_factory=list)

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        trials = {t.trial_id: t for t in load_trials(d / "trials.jsonl")}
        patients = {p.patient_id: p for p in load_patients(d / "patients.jsonl")}
        examples = load_labels(d / "labels.jsonl", trials, patients)
        return cls(trials, patients, examples)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_trials(d / "trials.jsonl", self.trials.values())
        save_patients(d / "patients.jsonl", self.patients.values())
        save_labels(d / "labels.jsonl", self.examples)

    def criteria(self, example: LabeledExample) -> TrialCriteria:
        return self.trials[example.trial_id].subset(example.statement_ids)


def split_dataset(examples: Sequence[LabeledExample], seed: int,
                  fractions: Tuple[float, float, float] = (0.6, 0.2, 0.2)):
    """Partition examples by patient into (train, validation, test)."""
    patients = sorted({e.patient_id for e in examples})
    n = len(patients)
    if n < 5:
        raise ValidationError(f"need at least 5 distinct patients to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    bucket = {}
    for rank, i in enumerate(order):
        bucket[patients[i]] = 0 if rank < n_train else (1 if rank < n_train + n_val else 2)
    parts: Tuple[list, list, list] = ([], [], [])
    for e in examples:
        parts[bucket[e.patient_id]].append(e)
    return parts
