import re
from collections import Counter

import numpy as np
import pytest

from enroll.datamodel import Dataset
from enroll.nir import default_unit_table, extract_quantities
from enroll.synthgen import GenConfig, OracleRule, gen_dataset, label_oracle, write_dataset

from conftest import SMOKE


def test_labels_agree_with_oracle(smoke):
    d = smoke.dataset
    for e in d.examples:
        rules = smoke.rules_for(e)
        assert label_oracle(rules, d.patients[e.patient_id], smoke.rules[e.trial_id]) == e.label


def test_rendered_text_is_the_statement(smoke):
    for tid, trial in smoke.dataset.trials.items():
        assert [s.text for s in trial.statements] == [r.render() for r in smoke.rules[tid]]
        assert [s.kind for s in trial.statements] == [r.kind for r in smoke.rules[tid]]


def test_statement_zero_always_shown(smoke):
    assert all(e.statement_ids[0].endswith("-s0") for e in smoke.dataset.examples)


def test_class_balance(smoke):
    counts = Counter(e.label for e in smoke.dataset.examples)
    n = sum(counts.values())
    assert all(0.23 <= counts[l] / n <= 0.43 for l in ("entailment", "contradiction", "neutral"))


def test_no_numeric_criteria_without_numeric_fraction():
    data = gen_dataset(GenConfig(n_trials=10, n_patients=100, examples_per_trial=9, numeric_fraction=0.0, seed=3))
    for trial in data.dataset.trials.values():
        for s in trial.statements:
            assert not re.search(r"\d", s.text), s.text


def test_units_resolve(smoke):
    table = default_unit_table()
    for p in smoke.dataset.patients.values():
        for m in p.measurements():
            assert m.unit in table and not m.unknown_unit
    for rules in smoke.rules.values():
        for r in rules:
            if r.category == "measurement" and r.unit != "dimensionless":
                assert r.unit in table


def test_numeric_text_extracts_to_rule_interval(smoke):
    # every numeric rule's threshold is recoverable from its text
    table = default_unit_table()
    for rules in smoke.rules.values():
        for r in rules:
            if r.category != "measurement":
                continue
            (q,) = extract_quantities(r.render(), table)
            assert q.range == r.interval
            if r.unit != "dimensionless":
                assert q.unit == table.canonical(r.unit)


def test_numeric_rules_split_patients(smoke):
    """Thresholds sit inside the population range, so numeric rules discriminate."""
    d = smoke.dataset
    for tid, rules in smoke.rules.items():
        for r in rules:
            if r.category == "measurement":
                verdicts = {r.holds(p) for p in d.patients.values() if r.overlaps(p)}
                assert verdicts == {True, False}


def test_oracle_examples(smoke):
    p = next(iter(smoke.dataset.patients.values()))
    primary = OracleRule("primary", "inclusion", code=p.visits[0].diagnosis, name="x")
    other = OracleRule("condition", "inclusion", code="NOPE", name="y")
    assert label_oracle([primary], p) == "entailment"
    assert label_oracle([primary, other], p) == "contradiction"
    assert label_oracle([other], p) == "neutral"
    assert label_oracle([OracleRule("condition", "exclusion", code=p.visits[0].diagnosis, name="x")], p) \
        == "contradiction"


def test_regeneration_is_byte_identical(tmp_path):
    cfg = GenConfig(n_trials=4, n_patients=40, examples_per_trial=12, seed=9)
    write_dataset(gen_dataset(cfg), tmp_path / "a", cfg)
    write_dataset(gen_dataset(cfg), tmp_path / "b", cfg)
    for name in ("trials.jsonl", "patients.jsonl", "labels.jsonl", "gen_config.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert GenConfig.load(tmp_path / "a" / "gen_config.txt") == cfg
    Dataset.load(tmp_path / "a")


def test_seed_changes_data():
    a = gen_dataset(GenConfig(n_trials=2, n_patients=20, examples_per_trial=6, seed=1)).dataset
    b = gen_dataset(GenConfig(n_trials=2, n_patients=20, examples_per_trial=6, seed=2)).dataset
    assert a.examples != b.examples


def test_config_validation():
    with pytest.raises(ValueError):
        GenConfig(numeric_fraction=1.5)
    with pytest.raises(ValueError):
        GenConfig(n_patients=5, n_areas=10)
