"""
Where is the red square?
========================

A one-hop spatial memory network against a bag-of-words baseline on the
absolute-position task. Takes about a minute on one CPU core.
"""
import sys
from pathlib import Path

import numpy as np

from smemvqa.harness import TrainConfig, evaluate, image_features, train
from smemvqa.synth import SynthSpec, generate
from smemvqa.viz import export_attention_maps, sample_batch

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_abs")

# 2000 training and 500 test images, four questions each
tr, te = generate(SynthSpec("abs", seed=1))
print(len(tr.images), "train images,", len(tr.samples), "questions")
print(tr.samples[0].question, "->", tr.samples[0].answer)

# one 12-number description per cell of a 4x4 grid
ftr, fte = image_features(tr), image_features(te)
print("features per image:", ftr.shape[1:])

smem = train(TrainConfig(model="smem-1hop"), tr, train_feats=ftr)
bow = train(TrainConfig(model="ibowimg"), tr, train_feats=ftr)

# the baseline averages the cells away, so it can only learn the 75% "no" prior
for name, res in (("smem-1hop", smem), ("ibowimg", bow)):
    rep = evaluate(res.model, res.vocab, te, fte)
    print(f"{name:10s} test accuracy {rep.accuracy:.3f}", rep.per_category)

# heatmaps for the first image's four questions
export_attention_maps(smem.model, smem.vocab, te.images, list(enumerate(te.samples[:4])), fte, out)
print("attention maps in", out)

# the attention grid behind each of those answers
for s in te.samples[:4]:
    _, trace = smem.model.forward(sample_batch(smem.model, smem.vocab, s, fte))
    print(s.question, s.answer)
    print(np.round(trace.attention[0].reshape(4, 4), 2))
