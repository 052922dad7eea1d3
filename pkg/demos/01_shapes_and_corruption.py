"""A tour of the synthetic data the whole project runs on.

Every dataset is a collection of grayscale images with known
segmentation masks: an ellipse "organ" and, in the three-class variant,
a smaller blob inside it, drawn at class-specific intensities and
covered in Gaussian noise.  Because the masks are generated rather than
annotated, we can also manufacture predictions of any desired quality by
corrupting them, which is how the evaluation pipeline gets a spread of
good and bad segmentations without training a strong segmentor.

Run from the repository root:

    python3 demos/01_shapes_and_corruption.py

Artifacts land in demo_output/01_shapes/.  The same splits can be
produced with the CLI:  python3 -m crisp gen-data --out <dir>
"""

import numpy as np

from crisp import (
    CorruptionConfig,
    corrupt_mask,
    dice_score,
    generate_dataset,
    write_pgm,
)

from _common import ascii_map, output_dir

OUT = output_dir("01_shapes")


def to_pixels(values):
    return np.rint(255.0 * np.clip(values, 0.0, 1.0)).astype(np.uint8)


def main():
    dataset = generate_dataset(count=12, height=32, width=32,
                               num_classes=3, seed=7)
    print(f"generated {len(dataset.samples)} samples, "
          f"{dataset.height}x{dataset.width}, {dataset.num_classes} classes")

    sample = dataset.samples[0]
    classes = sample.mask.argmax(axis=0)
    for k in range(dataset.num_classes):
        share = float(np.mean(classes == k))
        mean_val = float(sample.image[classes == k].mean())
        print(f"  class {k}: {share:5.1%} of pixels, "
              f"mean intensity {mean_val:.3f}")

    print("\nimage (ASCII ramp, darker = lower intensity):")
    print(ascii_map(sample.image))
    print("ground-truth classes:")
    print(ascii_map(classes / (dataset.num_classes - 1)))

    write_pgm(OUT / "image.pgm", to_pixels(sample.image))
    write_pgm(OUT / "mask.pgm",
              to_pixels(classes / (dataset.num_classes - 1)))

    print("\ncorrupting the mask at increasing severity "
          "(Dice against the original):")
    for severity in range(5):
        pred = corrupt_mask(sample.mask,
                            CorruptionConfig(severity=severity, seed=3))
        d = dice_score(pred.astype(np.float64), sample.mask)
        bar = "#" * int(round(20 * d))
        print(f"  severity {severity}: dice {d:.3f} |{bar:<20}|")
        write_pgm(OUT / f"pred_severity{severity}.pgm",
                  to_pixels(pred.argmax(axis=0) / (dataset.num_classes - 1)))

    print(f"\nwrote PGM previews to {OUT}")


if __name__ == "__main__":
    main()
