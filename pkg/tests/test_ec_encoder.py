import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enroll import numkernel as nk
from enroll.datamodel import ECStatement, TrialCriteria, ValidationError, Vocabulary
from enroll.ec_encoder import (BaselineEncoder, EncoderConfig, PrecomputedEncoder, hash_bucket,
                               statement_tokens, tokenize)

CONF = EncoderConfig(token_dim=4, latent_dim=5, hash_buckets=7)


@pytest.mark.parametrize("text,tokens", [
    ("HbA1c >= 7.5%", ["hba1c", "≥", "7.5", "%"]),
    ("eGFR<=60 ml/min", ["egfr", "≤", "60", "ml/min"]),
    ("platelets at least 100,000 /µl", ["platelets", "at", "least", "100,000", "µl"]),
    ("2nd line therapy", ["2nd", "line", "therapy"]),
    ("", []),
])
def test_tokenize_examples(text, tokens):
    assert tokenize(text) == tokens


def test_statement_tokens_carry_kind():
    s = ECStatement("a", "exclusion", "Age > 18")
    assert statement_tokens(s) == ["[exclusion]", "age", ">", "18"]


def test_hash_bucket_is_stable():
    # crc32 is process independent, unlike the built-in str hash
    assert hash_bucket("glorbitis", 100) == hash_bucket("glorbitis", 100)
    import zlib
    assert hash_bucket("abc", 7) == zlib.crc32(b"abc") % 7


def _encoder(words=("a", "b", "c", "d")):
    enc = BaselineEncoder(Vocabulary(words), CONF)
    params = nk.init_gaussian(np.random.default_rng(0), enc.param_shapes(), std=1.0)
    params["b_enc"] = np.random.default_rng(1).normal(size=CONF.latent_dim)
    return enc, params


def test_empty_sentence_is_zero():
    enc, params = _encoder()
    assert np.array_equal(enc.encode_sentence([], params), np.zeros(CONF.latent_dim))


def test_sentence_matches_direct_formula():
    enc, params = _encoder()
    ids = [0, 2, 2]
    pooled = params["tok_emb"][ids].mean(axis=0)
    ref = np.maximum(params["W_enc"] @ pooled + params["b_enc"], 0)
    assert np.allclose(enc.encode_sentence(["a", "c", "c"], params), ref, atol=1e-14)


def test_out_of_vocabulary_tokens_hash_into_extra_rows():
    enc, _ = _encoder()
    (i,) = enc.token_ids(["zzz"])
    assert i == 4 + hash_bucket("zzz", CONF.hash_buckets)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["a", "b", "c", "d", "qq", "rr"]), min_size=1, max_size=8),
       st.randoms(use_true_random=False))
def test_token_order_does_not_matter(tokens, rnd):
    enc, params = _encoder()
    shuffled = list(tokens)
    rnd.shuffle(shuffled)
    assert np.allclose(enc.encode_sentence(tokens, params), enc.encode_sentence(shuffled, params),
                       atol=1e-12)


def test_trial_rows_match_sentences():
    enc, params = _encoder()
    trial = TrialCriteria("T", "c", (ECStatement("x", "inclusion", "a b"),
                                     ECStatement("y", "exclusion", "c zzz d")))
    U = enc.encode_trial(trial, params)
    assert U.shape == (2, CONF.latent_dim)
    for row, s in zip(U, trial.statements):
        assert np.allclose(row, enc.encode_sentence(statement_tokens(s), params), atol=1e-14)


def test_encoder_gradient():
    enc, params = _encoder()
    trial = TrialCriteria("T", "c", (ECStatement("x", "inclusion", "a b zzz"),
                                     ECStatement("y", "exclusion", "c d")))
    c = np.random.default_rng(5).normal(size=(2, CONF.latent_dim))

    def fn(p):
        tape = nk.GradTape()
        loss = nk.total(nk.mul(enc.encode_trial(trial, p, tape), c))
        tape.backward(loss)
        return float(loss.value), tape.gradients(p)

    assert nk.finite_diff_check(fn, params, eps=1e-6) <= 1e-4


def test_precomputed_encoder(tmp_path):
    path = tmp_path / "vec.jsonl"
    rows = [{"trial_id": "T", "statement_id": "x", "vector": [1.0, 2.0]},
            {"trial_id": "T", "statement_id": "y", "vector": [0.0, -1.0]}]
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    enc = PrecomputedEncoder.load(path, 2)
    trial = TrialCriteria("T", "c", (ECStatement("y", "inclusion", "q"), ECStatement("x", "inclusion", "r")))
    assert np.array_equal(enc.encode_trial(trial), [[0.0, -1.0], [1.0, 2.0]])
    with pytest.raises(ValidationError):
        enc.encode_trial(TrialCriteria("T", "c", (ECStatement("z", "inclusion", "q"),)))
    with pytest.raises(ValidationError, match=":1:"):
        PrecomputedEncoder.load(path, 3)
