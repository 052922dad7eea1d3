"""Turn the trained embedding into per-pixel uncertainty maps.

The idea: embed the test image, retrieve the most similar ground-truth
masks from a bank of training latents, decode them, and measure where
they disagree with the prediction under evaluation.  Pixels where
plausible anatomies disagree with the prediction get high uncertainty;
pixels where everyone agrees get low.  Retrieved neighbors are weighted
by a von Mises-Fisher kernel so near-duplicates count more than distant
matches.  Two baselines come along for contrast: a fixed-width band
around the predicted boundary, and the entropy of a probabilistic
segmentation.

Run demos/02_train_embedding.py first, then:

    python3 demos/03_uncertainty_maps.py

CLI equivalent:  python3 -m crisp estimate --method crisp ...
"""

import sys

import numpy as np

from crisp import (
    CorruptionConfig,
    build_bank,
    corrupt_mask,
    crisp_uncertainty,
    edge_uncertainty,
    entropy_uncertainty,
    generate_dataset,
    load_model,
    save_pgm,
    save_uncertainty,
    segment,
)

from _common import ascii_map, output_dir

CHECKPOINT = output_dir("02_training") / "model.crspmd"
OUT = output_dir("03_maps")


def main():
    if not CHECKPOINT.exists():
        sys.exit("no checkpoint found; run demos/02_train_embedding.py first")
    model = load_model(CHECKPOINT)

    bank_masks = [s.mask for s in
                  generate_dataset(200, 32, 32, 3, seed=7).samples]
    bank_masks += [s.mask for s in
                   generate_dataset(50, 32, 32, 3, seed=8).samples]
    bank = build_bank(bank_masks, model)
    print(f"latent bank holds {bank.n} ground-truth masks")

    test = generate_dataset(100, 32, 32, 3, seed=9)
    for severity in (0, 2, 4):
        sample = test.samples[severity]
        pred = corrupt_mask(sample.mask,
                            CorruptionConfig(severity=severity, seed=21))
        error = pred.argmax(axis=0) != sample.mask.argmax(axis=0)
        u = crisp_uncertainty(sample.image, pred, model, bank)

        print(f"\nprediction corrupted at severity {severity}: "
              f"{int(error.sum())} wrong pixels, "
              f"mean uncertainty {u.mean():.4f}")
        print("actual errors:" + " " * 22 + "retrieval uncertainty:")
        left = ascii_map(error.astype(float), width=1).splitlines()
        right = ascii_map(u, width=1).splitlines()
        for a, b in zip(left, right):
            print(a + "    " + b)

        save_pgm(OUT / f"unc_sev{severity}.pgm", u)
        save_uncertainty(OUT / f"unc_sev{severity}.um", u)

    sample = test.samples[4]
    pred = corrupt_mask(sample.mask, CorruptionConfig(severity=3, seed=5))
    probs = segment(model, sample.image)
    methods = {
        "retrieval": crisp_uncertainty(sample.image, pred, model, bank),
        "edge band": edge_uncertainty(pred),
        "entropy  ": entropy_uncertainty(probs),
    }
    error = pred.argmax(axis=0) != sample.mask.argmax(axis=0)
    print("\nsame badly corrupted prediction, three methods "
          "(mean map value on wrong vs correct pixels):")
    for name, u in methods.items():
        on_err = float(u[error].mean()) if error.any() else float("nan")
        on_ok = float(u[~error].mean())
        print(f"  {name}  wrong {on_err:.3f}   correct {on_ok:.3f}")

    print(f"\nwrote maps to {OUT}")


if __name__ == "__main__":
    main()
