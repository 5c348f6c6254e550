"""Final per-example decision: neural entailment label gated by the quantity check."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .aligner import argmax_label
from .datamodel import PatientRecord, TrialCriteria
from .nir import ENTAILMENT, UnitTable, quantity_match


@dataclass
class MatchResult:
    trial_id: str
    patient_id: str
    neural_label: str
    neural_probs: np.ndarray
    quantity_verdict: Optional[str]
    final_label: str
    statement_ids: tuple
    hypothesis_ids: List[str]
    beta_weights: np.ndarray   # attention export handle, (M statements, N+1 hypothesis rows)

    def to_json(self) -> dict:
        return {
            "trial_id": self.trial_id,
            "patient_id": self.patient_id,
            "neural_label": self.neural_label,
            "neural_probs": [float(p) for p in self.neural_probs],
            "quantity_verdict": self.quantity_verdict,
            "final_label": self.final_label,
        }

    def to_jsonl(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":")) + "\n"


def combine(neural_label: str, quantity_verdict: Optional[str]) -> str:
    """Entailment survives only a passing quantity check; everything else passes through."""
    if neural_label == "entailment":
        if quantity_verdict is None or quantity_verdict == ENTAILMENT:
            return "entailment"
        return "contradiction"
    if neural_label == "contradiction":
        return "contradiction"
    return "neutral"


class Matcher:
    def __init__(self, model, params, use_nir: bool = True, units: Optional[UnitTable] = None):
        self.model = model
        self.params = params
        self.use_nir = use_nir
        self.units = units

    def match(self, criteria: TrialCriteria, patient: PatientRecord) -> MatchResult:
        out = self.model.forward(criteria, patient, self.params)
        neural = argmax_label(out.probs)
        verdict = None
        # the quantity check is only consulted on the entailment branch
        if self.use_nir and neural == "entailment":
            verdict = quantity_match(criteria.statements, patient, self.units)
        return MatchResult(criteria.trial_id, patient.patient_id, neural, out.probs, verdict,
                           combine(neural, verdict), tuple(s.id for s in criteria.statements),
                           self.model.hypothesis_ids(patient), out.beta_weights)
