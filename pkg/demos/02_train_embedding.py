"""Train the joint image/mask embedding from scratch.

Both encoders map their input onto the same unit hypersphere, and a
contrastive objective pulls each image toward its own mask while pushing
it away from every other mask in the batch.  A decoder is trained at the
same time to reconstruct masks from their latents, which is what later
turns retrieved neighbors back into pixel space.  Everything here is
plain numpy with hand-derived gradients; expect roughly half a minute.

Run from the repository root:

    python3 demos/02_train_embedding.py

The checkpoint written to demo_output/02_training/ is consumed by the
later demos.  CLI equivalent:  python3 -m crisp train --data <file>
--out <dir> --patience 30 --max-epochs 400
"""

import numpy as np

from crisp import (
    ModelConfig,
    TrainConfig,
    diag_accuracy,
    generate_dataset,
    save_model,
    split_indices,
    train,
)

from _common import output_dir

OUT = output_dir("02_training")


def main():
    dataset = generate_dataset(count=200, height=32, width=32,
                               num_classes=3, seed=7)
    model_config = ModelConfig(32, 32, 3)
    train_config = TrainConfig(max_epochs=400, patience=30, seed=0)
    print("training on 200 synthetic samples "
          "(early stopping on a held-out fifth)...")
    model, history = train(dataset, model_config, train_config)

    epochs = history.num_epochs()
    print(f"ran {epochs} epochs, kept weights from epoch "
          f"{history.selected_epoch}")
    print("\n  epoch   train loss   val loss   diag acc")
    shown = sorted({0, 1, epochs // 2, history.selected_epoch, epochs - 1})
    for e in shown:
        marker = "  <- selected" if e == history.selected_epoch else ""
        print(f"  {e:5d}   {history.train_loss[e]:10.4f}   "
              f"{history.val_loss[e]:8.4f}   {history.diag_accuracy[e]:8.3f}"
              f"{marker}")

    train_idx, val_idx = split_indices(len(dataset.samples), train_config)
    train_samples = [dataset.samples[i] for i in train_idx]
    val_samples = [dataset.samples[i] for i in val_idx]
    print("\nhow often an image's most similar mask is its own:")
    print(f"  training split:   {diag_accuracy(model, train_samples):.3f}")
    print(f"  validation split: {diag_accuracy(model, val_samples):.3f}")
    print(f"  temperature settled at {model.temperature:.1f}")

    save_model(model, OUT / "model.crspmd")
    history.save_csv(OUT / "history.csv")
    print(f"\nwrote checkpoint and history to {OUT}")


if __name__ == "__main__":
    main()
