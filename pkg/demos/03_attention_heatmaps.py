# coding: utf-8

# # Where does the model look?
#
# Attention weights are a probability vector over the patches of a bag. Laid
# back on the patch grid they become a heatmap we can blend over the image.

import numpy as np

from amil import tensor as T
from amil.bags import split_train_val, synth_generate, tile
from amil.imageio import write_image
from amil.localization import attention_to_heatmap, localization_score, render_overlay, top_k
from amil.model import forward_bag
from amil.training import TrainConfig, fit

samples = synth_generate(60, grid=(4, 4), seed=5)
train, val = split_train_val(samples, 0.8, seed=5)
model, _ = fit([s.image for s in train], [s.image for s in val], TrainConfig(epochs=4, seed=5))

# Take one positive validation image and look at its attention.

sample = next(s for s in val if s.image.label)
bag = tile(sample.image)
with T.no_grad():
    prob, att = forward_bag(bag, model)
heat = attention_to_heatmap(att, bag)
print("bag probability", round(prob.item(), 4))
print("attention grid:\n", np.round(heat.weights, 3))
print("motif cells", sample.motif_cells, "top cells", top_k(heat, len(sample.motif_cells)))
print("recall@k", localization_score(heat, sample.motif_cells, len(sample.motif_cells)))

# Blend and save. alpha=0 would return the image untouched.

overlay = render_overlay(sample.image, heat, alpha=0.4)
write_image("attention_overlay.png", overlay.pixels)
print("wrote attention_overlay.png", overlay.pixels.shape)

# Averaged over all positive validation images:

scores = []
for s in val:
    if s.image.label:
        b = tile(s.image)
        with T.no_grad():
            _, a = forward_bag(b, model)
        scores.append(localization_score(attention_to_heatmap(a, b), s.motif_cells, len(s.motif_cells)))
print("mean recall@|truth| over", len(scores), "images:", np.mean(scores))
