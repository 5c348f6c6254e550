"""Parameter layout and the forward pass from (criteria, patient) to class logits."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from . import aligner
from . import numkernel as nk
from .datamodel import PatientRecord, TrialCriteria, Vocabularies, Vocabulary
from .ec_encoder import BaselineEncoder, EncoderConfig
from .ehr_encoder import EhrEncoder

N_CLASSES = 3
LOOKUP_TABLES = ("tok_emb", "R_dx", "R_tx", "R_demo")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64     # shared latent size o
    code_dim: int = 64      # code embedding size z
    token_dim: int = 32
    hash_buckets: int = 100
    hidden: int = 0         # classifier hidden width, 0 for a bare affine head
    # None selects fan-in scaled init; a float gives plain Gaussian(0, std)
    init_std: Optional[float] = None
    table_std: float = 1.0  # lookup-table std under the scaled init
    # "head": dropout only on the classifier input; "all": also on the compare layer input
    dropout_sites: str = "head"

    def __post_init__(self):
        if min(self.embed_dim, self.code_dim, self.token_dim, self.hash_buckets) <= 0 or self.hidden < 0:
            raise ValueError("model dimensions must be positive (hidden may be 0)")
        if self.dropout_sites not in ("head", "all"):
            raise ValueError(f"dropout_sites must be 'head' or 'all', got {self.dropout_sites!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class ForwardResult:
    logits: object
    probs: np.ndarray
    beta_weights: np.ndarray
    aux_loss: object = None
    compare_invocations: int = 0
    n_visits: int = 0


class EnrollModel:
    """Owns the encoders and vocabularies; parameters live in a separate store."""

    def __init__(self, vocabs: Vocabularies, config: ModelConfig = ModelConfig(), ec_encoder=None):
        self.vocabs = vocabs
        self.config = config
        self.ec = ec_encoder or BaselineEncoder(
            vocabs.tokens, EncoderConfig(config.token_dim, config.embed_dim, config.hash_buckets))
        if self.ec.latent_dim != config.embed_dim:
            raise nk.DimensionError(
                f"criteria encoder emits {self.ec.latent_dim}-d vectors, model expects {config.embed_dim}")
        self.ehr = EhrEncoder(vocabs, config.code_dim, config.embed_dim)

    def param_shapes(self) -> Dict[str, tuple]:
        o, c = self.config.embed_dim, self.config
        shapes = dict(self.ec.param_shapes())
        shapes.update(self.ehr.param_shapes())
        shapes.update({"W_c": (o, o), "b_c": (o,), "W_a": (o, 2 * o), "b_a": (o,)})
        if c.hidden > 0:
            shapes.update({"W_h": (c.hidden, 4 * o), "b_h": (c.hidden,),
                           "W_f": (N_CLASSES, c.hidden), "b_f": (N_CLASSES,)})
        else:
            shapes.update({"W_f": (N_CLASSES, 4 * o), "b_f": (N_CLASSES,)})
        return shapes

    def init_params(self, seed: int) -> nk.ParameterStore:
        rng = np.random.default_rng(seed)
        shapes = self.param_shapes()
        shapes = dict(sorted(shapes.items()))
        if self.config.init_std is None:
            return nk.init_scaled(rng, shapes, tables=LOOKUP_TABLES, table_std=self.config.table_std)
        return nk.init_gaussian(rng, shapes, std=self.config.init_std)

    def hypothesis_ids(self, patient: PatientRecord):
        return [v.visit_id for v in patient.visits] + ["patient"]

    def forward(self, criteria: TrialCriteria, patient: PatientRecord, params,
                tape: Optional[nk.GradTape] = None, rng: Optional[np.random.Generator] = None,
                dropout: float = 0.0, with_aux: bool = False) -> ForwardResult:
        U = self.ec.encode_trial(criteria, params, tape)
        enc = self.ehr.encode(patient, params, tape, with_aux=with_aux)
        # hypothesis set = visit embeddings plus the patient-level embedding
        V = nk.concat([enc.visits, nk.as_row(enc.patient)], axis=0)
        scores = aligner.attention_scores(U, V, params, tape)
        aligned = aligner.soft_align(scores, U, V)
        layer = aligner.SharedCompareLayer(params, tape, rng,
                                           dropout if self.config.dropout_sites == "all" else 0.0)
        r1_rows, r2_rows = aligner.compare(U, aligned.beta, V, aligned.alpha, params, tape, layer)
        m = aligner.aggregate(r1_rows, r2_rows)
        logits = aligner.classifier_logits(m, params, tape, rng, dropout)
        probs = nk.softmax(nk._val(logits))
        return ForwardResult(logits, probs, aligned.beta_weights, enc.aux_loss,
                             layer.invocations, len(patient.visits))



# ---------------------------------------------------------------------------
# model directory: params.ckpt + model.json (config and vocabularies)

CKPT_NAME = "params.ckpt"
META_NAME = "model.json"


def _vocab_to_json(v: Vocabulary) -> dict:
    codes = v.codes[:-1] if v.with_unk else v.codes
    return {"codes": codes, "with_unk": v.with_unk}


def save_model(directory, model: EnrollModel, params, extra: Optional[dict] = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    nk.save_checkpoint(d / CKPT_NAME, params)
    meta = {
        "model_config": model.config.to_dict(),
        "vocabularies": {name: _vocab_to_json(getattr(model.vocabs, name))
                         for name in ("diagnoses", "treatments", "demographics", "tokens")},
    }
    meta.update(extra or {})
    (d / META_NAME).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_model(directory):
    """Return ``(model, params, meta)`` from a directory written by :func:`save_model`."""
    d = Path(directory)
    meta = json.loads((d / META_NAME).read_text(encoding="utf-8"))
    vocabs = Vocabularies(**{name: Vocabulary(v["codes"], with_unk=v["with_unk"])
                             for name, v in meta["vocabularies"].items()})
    model = EnrollModel(vocabs, ModelConfig(**meta["model_config"]))
    params = nk.load_checkpoint(d / CKPT_NAME, model.param_shapes())
    return model, params, meta
