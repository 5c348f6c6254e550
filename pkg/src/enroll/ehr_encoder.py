"""Hierarchical patient embedding: codes -> visits -> patient.

Per-item functions (``embed_code``, ``treatment_interaction``, ``visit_embed``,
``patient_embed``, ``aux_predict``) follow the math one vector at a time;
:meth:`EhrEncoder.encode` computes the same quantities for a whole record in a
handful of matrix ops and is what the model uses.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import numkernel as nk
from .datamodel import DEMOGRAPHIC_KEYS, PatientRecord, Vocabularies, Vocabulary

# vocabulary name -> (embedding table, bias)
CODE_PARAMS = {
    "diagnoses": ("R_dx", "b_dx"),
    "treatments": ("R_tx", "b_tx"),
    "demographics": ("R_demo", "b_demo"),
}


def embed_code(code: str, vocab: Vocabulary, params, kind: str = "diagnoses") -> np.ndarray:
    """r(code) = ReLU(one_hot(code) @ R + b); unknown codes use the UNK row."""
    table, bias = CODE_PARAMS[kind]
    return nk.relu(params[table][vocab.index(code)] + params[bias])


def treatment_interaction(r_d: np.ndarray, r_m: np.ndarray, params) -> np.ndarray:
    return nk.relu(params["W_m"] @ r_d) * r_m


def visit_embed(r_d: np.ndarray, r_treatments: Sequence[np.ndarray], params) -> np.ndarray:
    """``r_treatments`` holds one embedding per distinct treatment code."""
    acc = np.array(r_d, dtype=float, copy=True)
    for r_m in r_treatments:
        acc = acc + treatment_interaction(r_d, r_m, params)
    return nk.relu(params["W_o"] @ acc)


def patient_embed(r_demographics: Sequence[np.ndarray], visit_embeddings: Sequence[np.ndarray],
                  params) -> np.ndarray:
    o = params["W_p2"].shape[0]
    acc = np.zeros(o)
    for r_p in r_demographics:
        acc = acc + params["W_p1"] @ r_p
    for v in visit_embeddings:
        acc = acc + params["W_p2"] @ v
    return nk.relu(acc)


def aux_predict(v: np.ndarray, params) -> Tuple[np.ndarray, np.ndarray]:
    """(diagnosis distribution, per-treatment probabilities) for one visit."""
    return nk.softmax(params["U_d"] @ v), nk.sigmoid(params["U_m"] @ v)


@dataclass
class PatientIndex:
    diagnoses: np.ndarray       # (N,)
    treatments: np.ndarray      # (T,)
    treatment_visit: np.ndarray  # (T,) visit row of each treatment
    demographics: np.ndarray    # (K,)
    treatment_targets: np.ndarray  # (N, n_treatments) multi-hot


@dataclass
class PatientEncoding:
    visits: object   # (N, o) array or Node
    patient: object  # (o,) array or Node
    aux_loss: object = None


class EhrEncoder:
    def __init__(self, vocabs: Vocabularies, code_dim: int = 64, latent_dim: int = 64):
        self.vocabs = vocabs
        self.code_dim = code_dim
        self.latent_dim = latent_dim
        self._index_cache: Dict[str, PatientIndex] = {}

    def param_shapes(self) -> Dict[str, tuple]:
        z, o = self.code_dim, self.latent_dim
        v = self.vocabs
        return {
            "R_dx": (len(v.diagnoses), z), "b_dx": (z,),
            "R_tx": (len(v.treatments), z), "b_tx": (z,),
            "R_demo": (len(v.demographics), z), "b_demo": (z,),
            "W_m": (z, z), "W_o": (o, z), "W_p1": (o, z), "W_p2": (o, o),
            "U_d": (len(v.diagnoses), o), "U_m": (len(v.treatments), o),
        }

    def index(self, patient: PatientRecord) -> PatientIndex:
        cached = self._index_cache.get(patient.patient_id)
        if cached is not None:
            return cached
        v = self.vocabs
        dx, tx, tv = [], [], []
        targets = np.zeros((len(patient.visits), len(v.treatments)))
        for row, visit in enumerate(patient.visits):
            dx.append(v.diagnoses.index(visit.diagnosis))
            for code in dict.fromkeys(visit.treatments):
                j = v.treatments.index(code)
                if targets[row, j]:
                    continue  # two unknown codes collapse onto UNK once
                targets[row, j] = 1.0
                tx.append(j)
                tv.append(row)
        demo = [v.demographics.index(f"{k}={patient.demographics[k]}") for k in DEMOGRAPHIC_KEYS]
        idx = PatientIndex(np.array(dx), np.array(tx, dtype=np.int64), np.array(tv, dtype=np.int64),
                           np.array(demo), targets)
        self._index_cache[patient.patient_id] = idx
        return idx

    def encode(self, patient: PatientRecord, params, tape: Optional[nk.GradTape] = None,
               with_aux: bool = False) -> PatientEncoding:
        ix = self.index(patient)
        p = params if tape is None else {n: tape.param(params, n) for n in self.param_shapes()}
        n_visits = len(ix.diagnoses)
        r_d = nk.relu(nk.add(nk.take_rows(p["R_dx"], ix.diagnoses), p["b_dx"]))
        acc = r_d
        if len(ix.treatments):
            r_m = nk.relu(nk.add(nk.take_rows(p["R_tx"], ix.treatments), p["b_tx"]))
            gate = nk.relu(nk.matmul(r_d, nk.transpose(p["W_m"])))
            g = nk.mul(nk.take_rows(gate, ix.treatment_visit), r_m)
            acc = nk.add(acc, nk.segment_sum(g, ix.treatment_visit, n_visits))
        visits = nk.relu(nk.matmul(acc, nk.transpose(p["W_o"])))
        r_p = nk.relu(nk.add(nk.take_rows(p["R_demo"], ix.demographics), p["b_demo"]))
        pre = nk.add(nk.matmul(p["W_p1"], nk.total(r_p, axis=0)),
                     nk.matmul(p["W_p2"], nk.total(visits, axis=0)))
        patient_vec = nk.relu(pre)
        aux = None
        if with_aux:
            dx_logits = nk.matmul(visits, nk.transpose(p["U_d"]))
            tx_logits = nk.matmul(visits, nk.transpose(p["U_m"]))
            aux = (nk.softmax_cross_entropy(dx_logits, ix.diagnoses),
                   nk.sigmoid_binary_cross_entropy(tx_logits, ix.treatment_targets))
        return PatientEncoding(visits, patient_vec, aux)
