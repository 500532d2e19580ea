"""Score synthetic rows against the training split and against a real holdout.

Expects the files written by ``03_end_to_end.py``:

    python3 demos/04_evaluate.py [output_dir]

Shape and Trend measure fidelity; DCR and Authenticity measure how far the
synthetic rows stay from the training rows. The holdout row in the table is the
reference a well-generalising generator should resemble; metrics where the
synthetic data sits closer to train than the holdout does are flagged.
"""
import sys
from pathlib import Path

from tabforge.data import fit_preprocess, load_csv
from tabforge.evaluation import overfit_report, write_report

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output")
train = load_csv(out / "train.csv")
holdout = load_csv(out / "holdout.csv", schema=train.schema)
synthetic = load_csv(out / "synthetic.csv", schema=train.schema)

normalizer = fit_preprocess(train)
synth_report, holdout_report = overfit_report(train, holdout, synthetic, normalizer)

print(f"{'metric':14s} {'synthetic':>10s} {'holdout':>10s}  flag")
for metric in ("shape", "trend", "dcr_raw", "dcr_score", "authenticity"):
    flag = "closer to train" if synth_report.flags.get(metric) else ""
    print(f"{metric:14s} {getattr(synth_report, metric):10.3f} {getattr(holdout_report, metric):10.3f}  {flag}")

print("\nworst columns by shape:")
for name, score in sorted(synth_report.column_shape.items(), key=lambda kv: kv[1])[:3]:
    print(f"  {name:8s} {score:.3f}")

json_path, csv_path = write_report([synth_report, holdout_report], out)
print("\nwrote", json_path, "and", csv_path)
