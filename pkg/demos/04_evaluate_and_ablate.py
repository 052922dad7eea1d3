"""Score the uncertainty methods against each other.

For 100 fresh test samples we corrupt each ground-truth mask at a random
severity, produce uncertainty maps with both the retrieval method and
the edge-band baseline, and ask three questions.  Does mean uncertainty
track segmentation quality across samples (correlation with 1 - Dice)?
Is pixel confidence calibrated (expected calibration error)?  Does the
map actually point at the wrong pixels (error/uncertainty mutual
information, weighted toward bad predictions)?  A final sweep shows how
the neighborhood size M trades off.

Run demos/02_train_embedding.py first, then:

    python3 demos/04_evaluate_and_ablate.py

CLI equivalents:  python3 -m crisp evaluate ...  and
python3 -m crisp ablate-m ...
"""

import sys

import numpy as np

from crisp import (
    CorruptionConfig,
    build_bank,
    corrupt_mask,
    crisp_uncertainty,
    edge_uncertainty,
    evaluate,
    generate_dataset,
    load_model,
    save_report_json,
)

from _common import output_dir

CHECKPOINT = output_dir("02_training") / "model.crspmd"
OUT = output_dir("04_evaluation")


def main():
    if not CHECKPOINT.exists():
        sys.exit("no checkpoint found; run demos/02_train_embedding.py first")
    model = load_model(CHECKPOINT)

    bank_masks = [s.mask for s in
                  generate_dataset(200, 32, 32, 3, seed=7).samples]
    bank_masks += [s.mask for s in
                   generate_dataset(50, 32, 32, 3, seed=8).samples]
    bank = build_bank(bank_masks, model)
    test = generate_dataset(100, 32, 32, 3, seed=9)

    rng = np.random.default_rng(123)
    severities = (0, 1, 2, 3, 4)
    predictions = []
    for sample in test.samples:
        severity = severities[int(rng.integers(len(severities)))]
        sub_seed = int(rng.integers(2 ** 32))
        predictions.append(corrupt_mask(
            sample.mask, CorruptionConfig(severity=severity, seed=sub_seed)))

    print("scoring 100 corrupted predictions with both methods...")
    maps = {
        "retrieval": [crisp_uncertainty(s.image, p, model, bank)
                      for s, p in zip(test.samples, predictions)],
        "edge band": [edge_uncertainty(p) for p in predictions],
    }
    print(f"\n  {'method':<10} {'correlation':>11} {'ece':>7} "
          f"{'weighted MI':>12}")
    for name, method_maps in maps.items():
        report = evaluate(test.samples, predictions, method_maps)
        print(f"  {name:<10} {report.correlation:11.3f} "
              f"{report.ece:7.3f} {report.weighted_mi:12.3f}")
        tag = name.replace(" ", "_")
        save_report_json(report, OUT / f"report_{tag}.json")

    print("\nneighborhood-size sweep for the retrieval method:")
    print(f"  {'M':>4} {'correlation':>11} {'weighted MI':>12}")
    rows = []
    for m in (2, 5, 8, 25, 100, 250):
        swept = [crisp_uncertainty(s.image, p, model, bank, m)
                 for s, p in zip(test.samples, predictions)]
        report = evaluate(test.samples, predictions, swept)
        print(f"  {m:4d} {report.correlation:11.3f} "
              f"{report.weighted_mi:12.3f}")
        rows.append(f"{m},{report.correlation:.10g},"
                    f"{report.weighted_mi:.10g}")
    (OUT / "ablation.csv").write_text(
        "m,correlation,weighted_mi\n" + "\n".join(rows) + "\n")

    print(f"\nwrote reports to {OUT}")


if __name__ == "__main__":
    main()
