"""Attention heatmaps, overlays and word/location correlation dumps."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import pnm
from .features import RasterImage, cell_rects, infer_grid
from .model import Batch, SMemVQA, _Model, load_checkpoint
from .synth import QASample
from .text import Vocabulary, encode_question


def _as_model(checkpoint) -> _Model:
    return checkpoint if isinstance(checkpoint, _Model) else load_checkpoint(checkpoint)


def _grid(model: _Model) -> tuple[int, int]:
    g = model.config.get("grid")
    return tuple(g) if g else infer_grid(model.config["L"])


def sample_batch(model: _Model, vocab: Vocabulary, sample: QASample, feats: np.ndarray) -> Batch:
    enc = encode_question(sample.question, vocab, model.config["T"])
    return Batch(enc.ids[None], enc.mask[None], np.asarray(feats)[sample.image][None])


def upsample(weights, grid, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour copy of per-cell values onto the pixel grid."""
    w = np.asarray(weights, dtype=np.float64)
    out = np.zeros((height, width))
    for v, (y0, y1, x0, x1) in zip(w, cell_rects(height, width, *grid)):
        out[y0:y1, x0:x1] = v
    return out


def to_gray(values: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255. A constant map comes out all zero."""
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.round((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def overlay(img: RasterImage, gray: np.ndarray) -> np.ndarray:
    """50% blend of the image with the heatmap (integer, so byte-stable)."""
    px = img.pixels.astype(np.uint16)
    return ((px + gray[..., None].astype(np.uint16)) // 2).astype(np.uint8)


def export_attention_maps(checkpoint, vocab: Vocabulary, images: list[RasterImage], samples, feats,
                          out_dir) -> list[Path]:
    """Write <stem>_hop<k>.pgm, <stem>_hop<k>_overlay.ppm and <stem>.json per sample.

    ``samples`` is a list of (index, QASample); the stem is sample_<index>.
    The sidecar keeps the raw attention weights next to the argmax cell and,
    for the first hop, the word whose correlation won at that cell.
    """
    model = _as_model(checkpoint)
    if not isinstance(model, SMemVQA):
        raise ValueError("attention maps need a spatial memory model")
    grid = _grid(model)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for idx, s in samples:
        batch = sample_batch(model, vocab, s, feats)
        _, trace = model.forward(batch)
        trace = trace.sample(0)
        img = images[s.image]
        stem = f"sample_{idx:05d}"
        hops = []
        for k, att in enumerate(trace.attention, start=1):
            gray = to_gray(upsample(att, grid, img.height, img.width))
            pgm = out / f"{stem}_hop{k}.pgm"
            ppm = out / f"{stem}_hop{k}_overlay.ppm"
            pnm.write(pgm, gray)
            pnm.write(ppm, overlay(img, gray))
            written += [pgm, ppm]
            cell = int(np.argmax(att))
            rec = {"hop": k, "argmax_cell": cell, "row": cell // grid[1], "col": cell % grid[1],
                   "weights": [float(v) for v in att]}
            if k == 1:
                rec["argword"] = vocab.tokens[int(batch.ids[0, trace.argword[cell]])]
            hops.append(rec)
        side = out / f"{stem}.json"
        doc = {"sample": idx, "question": s.question, "answer": s.answer,
               "prediction": vocab.answers[int(np.argmax(trace.P))], "grid": list(grid), "hops": hops}
        side.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
        written.append(side)
    return written


def correlation_at_focus(model: SMemVQA, vocab: Vocabulary, sample: QASample, feats) -> list[tuple[str, float]]:
    """(token, C[token, argmax-attention cell]) for every real token."""
    batch = sample_batch(model, vocab, sample, feats)
    _, trace = model.forward(batch)
    trace = trace.sample(0)
    cell = int(np.argmax(trace.attention[0]))
    return [(vocab.tokens[int(i)], float(trace.C[j, cell]))
            for j, (i, m) in enumerate(zip(batch.ids[0], batch.mask[0])) if m]


def export_correlation_csv(checkpoint, vocab: Vocabulary, sample: QASample, feats, path) -> Path:
    model = _as_model(checkpoint)
    rows = correlation_at_focus(model, vocab, sample, feats)
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["token", "correlation"])
        for tok, v in rows:
            w.writerow([tok, repr(v)])
    return path
