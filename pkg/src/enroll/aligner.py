"""Soft alignment of premise rows (criteria) with hypothesis rows (patient),
followed by comparison, aggregation and the three-way classifier."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np

from . import numkernel as nk
from .datamodel import LABELS


@dataclass
class AlignedPair:
    beta: object    # (M, o): hypotheses aligned to each premise
    alpha: object   # (N, o): premises aligned to each hypothesis
    beta_weights: np.ndarray   # (M, N), rows sum to 1
    alpha_weights: np.ndarray  # (M, N), columns sum to 1


@dataclass
class EntailmentOutput:
    r1: np.ndarray
    r2: np.ndarray
    m: np.ndarray
    probs: np.ndarray
    label: str


def _p(params, tape, name):
    return params[name] if tape is None else tape.param(params, name)


def attention_scores(U, V, params, tape: Optional[nk.GradTape] = None):
    """Unnormalised alignment scores ``ReLU(W_c u_i + b_c) . ReLU(W_c v_j + b_c)``."""
    du, dv = nk._val(U).shape[-1], nk._val(V).shape[-1]
    if du != dv:
        raise nk.DimensionError(f"premise dim {du} != hypothesis dim {dv}")
    W, b = _p(params, tape, "W_c"), _p(params, tape, "b_c")
    a = nk.relu(nk.affine(U, W, b))
    c = nk.relu(nk.affine(V, W, b))
    return nk.matmul(a, nk.transpose(c))


def soft_align(scores, U, V) -> AlignedPair:
    """beta normalises each score row over hypotheses, alpha each column over premises."""
    row_w = nk.softmax(scores, axis=1)
    col_w = nk.softmax(scores, axis=0)
    beta = nk.matmul(row_w, V)
    alpha = nk.matmul(nk.transpose(col_w), U)
    return AlignedPair(beta, alpha, nk._val(row_w), nk._val(col_w))


class SharedCompareLayer:
    """ReLU(W_a [x ; aligned] + b_a), counting how many vectors pass through."""

    def __init__(self, params, tape: Optional[nk.GradTape] = None,
                 rng: Optional[np.random.Generator] = None, dropout: float = 0.0):
        self.W = _p(params, tape, "W_a")
        self.b = _p(params, tape, "b_a")
        self.rng = rng
        self.dropout = dropout
        self.invocations = 0

    def __call__(self, x, aligned):
        pair = nk.concat([x, aligned], axis=-1)
        pair = nk.dropout(pair, self.dropout, self.rng)
        v = nk._val(pair)
        self.invocations += 1 if v.ndim == 1 else v.shape[0]
        return nk.relu(nk.affine(pair, self.W, self.b))


def compare(U, beta, V, alpha, params, tape: Optional[nk.GradTape] = None,
            layer: Optional[SharedCompareLayer] = None):
    """Return (r1 rows, r2 rows): one shared-layer pass per premise and per hypothesis."""
    layer = layer or SharedCompareLayer(params, tape)
    return layer(U, beta), layer(V, alpha)


def aggregate(r1_rows, r2_rows):
    """m = [r1 ; r2 ; r1 * r2 ; r1 - r2] with r1, r2 the row sums."""
    if isinstance(r1_rows, (list, tuple)):
        r1_rows = np.stack(r1_rows)
    if isinstance(r2_rows, (list, tuple)):
        r2_rows = np.stack(r2_rows)
    if nk._val(r1_rows).shape[0] == 0 or nk._val(r2_rows).shape[0] == 0:
        raise ValueError("aggregate needs non-empty comparison lists")
    r1 = nk.total(r1_rows, axis=0)
    r2 = nk.total(r2_rows, axis=0)
    return nk.concat([r1, r2, nk.mul(r1, r2), nk.sub(r1, r2)], axis=0)


def classifier_logits(m, params, tape: Optional[nk.GradTape] = None,
                      rng: Optional[np.random.Generator] = None, dropout: float = 0.0):
    """Affine head, with an optional ReLU hidden layer when ``W_h`` is present.

    ``dropout`` applies to the features entering the final affine.
    """
    x = m
    if "W_h" in params:
        x = nk.relu(nk.affine(x, _p(params, tape, "W_h"), _p(params, tape, "b_h")))
    # dropout sits on the input of the output layer only; see ModelConfig.dropout_sites
    x = nk.dropout(x, dropout, rng)
    return nk.affine(x, _p(params, tape, "W_f"), _p(params, tape, "b_f"))


def argmax_label(probs: np.ndarray) -> str:
    # np.argmax returns the first maximum, i.e. the fixed LABELS order breaks ties
    return LABELS[int(np.argmax(probs))]


def classify(m, params) -> EntailmentOutput:
    m = np.asarray(m)
    probs = nk.softmax(classifier_logits(m, params))
    half = m.shape[0] // 4
    return EntailmentOutput(m[:half], m[half:2 * half], m, probs, argmax_label(probs))


HEATMAP_COLUMNS = ("trial_id", "statement_id", "patient_id", "hypothesis_row_id", "normalized_weight")


def heatmap_rows(trial_id: str, statement_ids: Sequence[str], patient_id: str,
                 hypothesis_ids: Sequence[str], beta_weights: np.ndarray) -> List[tuple]:
    rows = []
    for i, sid in enumerate(statement_ids):
        for j, hid in enumerate(hypothesis_ids):
            rows.append((trial_id, sid, patient_id, hid, float(beta_weights[i, j])))
    return rows


def write_heatmap_csv(path_or_file, rows: Iterable[tuple]) -> None:
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="", encoding="utf-8") if own else path_or_file
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEATMAP_COLUMNS)
        for r in rows:
            w.writerow(r[:4] + (repr(r[4]),))
    finally:
        if own:
            fh.close()
