# coding: utf-8

# # Training on synthetic motif bags
#
# Each synthetic image is a grid of 28x28 cells over pink noise. Positive
# images carry a dark disc in at least one cell; negative images carry none.
# The model only ever sees the image-level label.

from amil.bags import split_train_val, synth_generate, tile
from amil.training import TrainConfig, evaluate, fit

samples = synth_generate(60, grid=(4, 4), seed=3)
print(len(samples), "images,", sum(s.image.label for s in samples), "positive")
print("motif cells of the first positive image:",
      next(s.motif_cells for s in samples if s.image.label))

# 80/20 split with a fixed seed, as the CLI does.

train, val = split_train_val(samples, 0.8, seed=3)
bag = tile(train[0].image)
print("one bag:", bag.patches.shape, "grid", bag.grid)

# A few epochs are enough on this easy task. Batch size is always one bag.

config = TrainConfig(epochs=3, seed=3)
model, metrics = fit([s.image for s in train], [s.image for s in val], config)
for m in metrics:
    print(f"epoch {m.epoch}: loss {m.train_loss:.4f}  train acc {m.train_acc:.3f}  val acc {m.val_acc:.3f}")

# The returned model is the epoch with the best validation score.

print("validation accuracy:", evaluate(model, [tile(s.image) for s in val]))

# Swapping the pooling operator is one argument.

_, mean_metrics = fit([s.image for s in train], [s.image for s in val], TrainConfig(epochs=3, seed=3, pooling_mode="mean"))
print("mean pooling val acc per epoch:", [m.val_acc for m in mean_metrics])
