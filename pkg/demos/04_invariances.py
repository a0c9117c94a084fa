"""
Things that must not change the answer
======================================

Padding a question, zeroing the second hop and flattening the attention
are all exact operations; the model's outputs show it bit for bit.
"""
import numpy as np

from smemvqa.model import Batch
from smemvqa.scenarios import random_batch, tiny_model
from smemvqa.text import PAD

model = tiny_model(hops=1, seed=3)
rng = np.random.default_rng(0)

# padding: same words, more PAD slots
words = np.array([2, 5, 1])
feats = rng.normal(size=(1, 4, 6))
for width in (3, 4, 5):
    ids = np.full((1, width), PAD)
    ids[0, :3] = words
    print(width, model.probabilities(Batch(ids, ids >= 0, feats))[0].tolist())

# a second hop whose evidence weights are zero adds nothing
two = tiny_model(hops=2, seed=3)
for n in model.tensors:
    two[n].data[:] = model[n].data
two["W_E2"].data[:] = 0
two["b_E2"].data[:] = 0
b = random_batch(50, rng)
print("two hops vs one:", np.abs(two.probabilities(b) - model.probabilities(b)).max())

# uniform attention turns the evidence into a plain average over cells
_, trace = model.forward(b, uniform_attention=True)
mean = (b.feats @ model["W_E"].data + model["b_E"].data).mean(axis=1)
print("uniform attention vs cell mean:", np.abs(trace.evidence[0] - mean).max())
