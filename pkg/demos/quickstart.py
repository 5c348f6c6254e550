"""Small end-to-end run: synthesize a corpus, train briefly, score, look at attention.

    python3 demos/quickstart.py

Takes about a minute on one core. Numbers are far below the desk-scale run
because the corpus and the training budget are tiny.
"""
from enroll.matcher import Matcher
from enroll.model import ModelConfig
from enroll.synthgen import GenConfig, gen_dataset
from enroll.trainer import TrainConfig, run_experiment

data = gen_dataset(GenConfig(n_trials=20, n_patients=400, examples_per_trial=60, seed=7)).dataset
print(f"{len(data.trials)} trials, {len(data.patients)} patients, {len(data.examples)} labelled pairs")

exp = run_experiment(data, seed=0, model_config=ModelConfig(embed_dim=32, code_dim=32),
                     train_config=TrainConfig(max_epochs=6, seed=0),
                     progress=lambda r: print(f"  epoch {r.epoch}: loss {r.loss:.3f}, dev acc {r.dev_accuracy:.3f}"))
print(f"test micro-F1 {exp.with_nir.micro_f1:.3f} with the quantity check, "
      f"{exp.without_nir.micro_f1:.3f} without; majority baseline {exp.majority_f1:.3f}")

# where does each criterion look in the record?
ex = exp.test[0]
trial, patient = data.criteria(ex), data.patients[ex.patient_id]
r = Matcher(exp.model, exp.result.params).match(trial, patient)
print(f"\n{ex.trial_id} x {ex.patient_id}: gold {ex.label}, predicted {r.final_label}")
for s, row in zip(trial.statements, r.beta_weights):
    top = int(row.argmax())
    print(f"  [{s.kind}] {s.text!r} -> {r.hypothesis_ids[top]} ({row[top]:.2f})")
