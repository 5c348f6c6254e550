"""Sentence embeddings for eligibility-criterion statements.

Two encoders share one contract, ``encode_trial(trial, params) -> (M, o)``:

* :class:`BaselineEncoder` - trainable token embeddings, mean pooling and one
  affine+ReLU layer. Tokens missing from the vocabulary are hashed into a fixed
  number of extra buckets.
* :class:`PrecomputedEncoder` - looks up externally computed vectors from a
  JSONL file, e.g. transformer sentence embeddings.
"""
from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from . import numkernel as nk
from .datamodel import ECStatement, TrialCriteria, ValidationError, Vocabulary

_TOKEN_RE = re.compile(
    r"\d+(?:st|nd|rd|th)\b"  # ordinals stay whole so they are not read as quantities
    r"|\d{1,3}(?:,\d{3})+(?:\.\d+)?"
    r"|\d+(?:\.\d+)?"
    r"|[a-zµ][a-z0-9µ]*(?:/[a-z0-9µ]+)*"
    r"|[≤≥<>=%]"
)
_REWRITES = (("<=", "≤"), (">=", "≥"), ("=<", "≤"), ("=>", "≥"), ("⩽", "≤"), ("⩾", "≥"))


def tokenize(text: str) -> List[str]:
    """Lowercase and split; numbers, comparison symbols and ``%`` are separate tokens."""
    text = text.lower()
    for a, b in _REWRITES:
        text = text.replace(a, b)
    return _TOKEN_RE.findall(text)


def statement_tokens(statement: ECStatement, tokenizer=tokenize) -> List[str]:
    # the inclusion/exclusion flag is part of the premise; without it the
    # two kinds of a statement with the same text would embed identically
    return [f"[{statement.kind}]"] + tokenizer(statement.text)


def hash_bucket(token: str, n_buckets: int) -> int:
    return zlib.crc32(token.encode("utf-8")) % n_buckets


@dataclass(frozen=True)
class EncoderConfig:
    token_dim: int = 32
    latent_dim: int = 64
    hash_buckets: int = 100

    def __post_init__(self):
        if min(self.token_dim, self.latent_dim, self.hash_buckets) <= 0:
            raise ValueError("encoder dimensions must be positive")


class BaselineEncoder:
    """Embedding lookup -> mean pooling -> ReLU(W_enc x + b_enc)."""

    def __init__(self, vocab: Vocabulary, config: EncoderConfig = EncoderConfig()):
        self.vocab = vocab
        self.config = config
        self._cache: Dict[Tuple[str, ...], np.ndarray] = {}

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def param_shapes(self) -> Dict[str, tuple]:
        c = self.config
        return {
            "tok_emb": (len(self.vocab) + c.hash_buckets, c.token_dim),
            "W_enc": (c.latent_dim, c.token_dim),
            "b_enc": (c.latent_dim,),
        }

    def token_ids(self, tokens) -> np.ndarray:
        key = tuple(tokens)
        ids = self._cache.get(key)
        if ids is None:
            n = len(self.vocab)
            ids = np.array(
                [self.vocab.index(t) if t in self.vocab else n + hash_bucket(t, self.config.hash_buckets)
                 for t in tokens],
                dtype=np.int64,
            )
            self._cache[key] = ids
        return ids

    def encode_sentence(self, tokens, params, tape: Optional[nk.GradTape] = None):
        """Embedding of one token list; an empty list maps to the zero vector."""
        if len(tokens) == 0:
            return np.zeros(self.config.latent_dim)
        return nk.take_rows(self._encode_rows([list(tokens)], params, tape), 0)

    def encode_trial(self, trial: TrialCriteria, params, tape: Optional[nk.GradTape] = None):
        """Matrix U with one row per statement, in statement order."""
        return self._encode_rows([statement_tokens(s) for s in trial.statements], params, tape)

    def _encode_rows(self, token_lists, params, tape):
        ids, pool = [], np.zeros((len(token_lists), sum(len(t) for t in token_lists)))
        col = 0
        for row, toks in enumerate(token_lists):
            ids.append(self.token_ids(toks))
            if toks:
                pool[row, col:col + len(toks)] = 1.0 / len(toks)
            col += len(toks)
        ids = np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64)
        p = _params(params, tape, ("tok_emb", "W_enc", "b_enc"))
        pooled = nk.mean_rows(nk.take_rows(p["tok_emb"], ids), pool)
        out = nk.relu(nk.affine(pooled, p["W_enc"], p["b_enc"]))
        empty = np.array([len(t) == 0 for t in token_lists])
        if empty.any():
            # empty statements are defined as the zero vector, not ReLU(b_enc)
            out = nk.mul(out, (~empty)[:, None].astype(float))
        return out


class PrecomputedEncoder:
    """Serves fixed per-statement vectors loaded from JSONL; has no parameters."""

    def __init__(self, vectors: Mapping[Tuple[str, str], np.ndarray], latent_dim: int):
        self.vectors = dict(vectors)
        self._dim = latent_dim

    @property
    def latent_dim(self) -> int:
        return self._dim

    @classmethod
    def load(cls, path, latent_dim: int) -> "PrecomputedEncoder":
        vectors = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                d = json.loads(line)
                vec = np.asarray(d["vector"], dtype=np.float64)
                if vec.shape != (latent_dim,):
                    raise ValidationError(
                        f"{path}:{lineno}: vector length {vec.size}, expected {latent_dim}"
                    )
                if not np.all(np.isfinite(vec)):
                    raise ValidationError(f"{path}:{lineno}: non-finite vector entries")
                vectors[(str(d["trial_id"]), str(d["statement_id"]))] = vec
        return cls(vectors, latent_dim)

    def param_shapes(self) -> Dict[str, tuple]:
        return {}

    def encode_trial(self, trial: TrialCriteria, params=None, tape=None) -> np.ndarray:
        try:
            return np.stack([self.vectors[(trial.trial_id, s.id)] for s in trial.statements])
        except KeyError as exc:
            raise ValidationError(f"no precomputed embedding for {exc.args[0]}") from None


def _params(params, tape, names):
    if tape is None:
        return {n: params[n] for n in names}
    return {n: tape.param(params, n) for n in names}
