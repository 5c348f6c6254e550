"""What the numeric reasoning step reads out of criterion text, and how it rules.

    python3 demos/quantities.py
"""
from enroll.datamodel import ECStatement, Measurement, PatientRecord, Visit
from enroll.nir import extract_quantities, quantity_match

for text in ("more than 20 mg of prednisone", "at least one month of stable therapy",
             "surgery within 12 weeks", "ejection fraction ≤ 40", "age 18 to 65 years"):
    for q in extract_quantities(text):
        print(f"{text!r:42} -> {q.range} {q.unit} concept={q.concept!r}")

demo = {"birth_year": "1950", "gender": "male", "country": "us", "geo": "west",
        "ethnicity": "eth2", "blood_type": "opos"}
patient = PatientRecord("P", demo, (Visit("v0", "2019-05-01", "DX1", (),
                                          (Measurement("hemoglobin", 120.0, "g/l"),)),))
print()
for kind, text in (("inclusion", "hemoglobin at least 10 g/dl"), ("inclusion", "hemoglobin at least 14 g/dl"),
                   ("exclusion", "hemoglobin below 9 g/dl")):
    verdict = quantity_match([ECStatement("s", kind, text)], patient)
    print(f"hemoglobin 120 g/l vs {kind} {text!r}: {verdict}")
