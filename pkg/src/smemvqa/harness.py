"""Training loop, evaluation and the non-learned baselines."""
from __future__ import annotations

import json
import logging
import math
import string
import subprocess
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .features import conv_patches, extract_grid_patch, infer_grid
from .model import Batch, IBowImg, SMemConfig, SMemVQA, _Model, init_ibowimg, init_params, save_checkpoint
from .synth import Dataset, zone_of_point
from .tensor import OptState, Tensor, sgd_momentum_step, softmax_cross_entropy
from .text import Vocabulary, build_vocab, encode_question, longest_question

log = logging.getLogger(__name__)

MODEL_KINDS = ("smem-1hop", "smem-2hop", "smem-Hhop", "ibowimg", "position-heuristic")


@dataclass
class TrainConfig:
    model: str = "smem-1hop"
    hops: int = 1  # used by smem-Hhop
    batch_size: int = 50
    momentum: float = 0.9
    lr: float = 0.01
    halve_every: int = 6
    epochs: int = 50
    weight_decay: float = 0.0
    dropout: float = 0.0
    seed: int = 0
    features: str = "grid"  # grid | conv | precomputed
    conv_channels: int = 16
    N: int = 64
    grid: tuple[int, int] = (4, 4)
    min_freq: int = 1

    def __post_init__(self):
        self.grid = tuple(self.grid)
        if self.model not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model!r}; expected one of {MODEL_KINDS}")
        if self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("batch size must be positive and epochs nonnegative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    @property
    def hop_count(self) -> int:
        return {"smem-1hop": 1, "smem-2hop": 2}.get(self.model, self.hops)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def learning_rate(base: float, epoch: int, period: int) -> float:
    """Base rate halved after every ``period`` completed epochs (epoch is 0-based)."""
    return base / 2 ** (epoch // period)


class DivergenceError(ArithmeticError):
    pass


# ---------------------------------------------------------------- data prep

@dataclass
class Prepared:
    ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    image_index: np.ndarray
    feats: np.ndarray  # per image
    categories: list[str]
    truncated: int = 0

    def __len__(self):
        return len(self.ids)

    def batch(self, rows) -> Batch:
        rows = np.asarray(rows)
        return Batch(self.ids[rows], self.mask[rows], self.feats[self.image_index[rows]], self.labels[rows])


def image_features(ds: Dataset, source: str = "grid", grid=(4, 4), precomputed=None) -> np.ndarray:
    g_r, g_c = grid
    if source == "grid":
        return np.stack([extract_grid_patch(img, g_r, g_c).S for img in ds.images])
    if source == "conv":
        return np.stack([conv_patches(img, g_r, g_c) for img in ds.images])
    if source == "precomputed":
        if precomputed is None:
            raise ValueError("precomputed feature source needs feature arrays")
        return np.stack([f.S for f in precomputed])
    raise ValueError(f"unknown feature source {source!r}")


def prepare(ds: Dataset, vocab: Vocabulary, T: int, feats: np.ndarray) -> Prepared:
    ids, masks, labels, idx, cats = [], [], [], [], []
    truncated = 0
    for s in ds.samples:
        if s.answer not in vocab.answer_to_class:
            continue
        enc = encode_question(s.question, vocab, T)
        truncated += enc.truncated
        ids.append(enc.ids)
        masks.append(enc.mask)
        labels.append(vocab.answer_to_class[s.answer])
        idx.append(s.image)
        cats.append(s.category)
    if truncated:
        log.warning("%d questions truncated to T=%d", truncated, T)
    return Prepared(np.array(ids), np.array(masks), np.array(labels, dtype=np.int64),
                    np.array(idx), feats, cats, truncated)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: _Model
    vocab: Vocabulary
    T: int
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_model_state: dict[str, np.ndarray] | None = None


def build_model(cfg: TrainConfig, vocab: Vocabulary, L: int, M: int, T: int, rng) -> _Model:
    conv = cfg.conv_channels if cfg.features == "conv" else 0
    if cfg.model == "ibowimg":
        return init_ibowimg(cfg.N, len(vocab), L, M, T, vocab.num_answers, rng, vocab.hash(), conv)
    if cfg.model == "position-heuristic":
        raise ValueError("the position heuristic is fitted with position_heuristic_baseline, not trained")
    scfg = SMemConfig(N=cfg.N, hops=cfg.hop_count, dropout=cfg.dropout,
                      weight_decay=cfg.weight_decay, conv_channels=conv)
    return init_params(scfg, len(vocab), L, M, T, vocab.num_answers, rng, vocab.hash())


def train(cfg: TrainConfig, train_ds: Dataset, val_ds: Dataset | None = None, out_dir=None,
          train_feats: np.ndarray | None = None, val_feats: np.ndarray | None = None) -> TrainResult:
    """Minibatch SGD with momentum and a step-halving learning rate.

    With ``out_dir`` set, writes final.ckpt, best.ckpt (best validation
    accuracy, or the final model without validation data), vocab.json and
    run.json.
    """
    vocab, _keep = build_vocab(train_ds.corpus(), min_freq=cfg.min_freq)
    T = longest_question([s.question for s in train_ds.samples], vocab)
    if train_feats is None:
        train_feats = image_features(train_ds, cfg.features, cfg.grid)
    data = prepare(train_ds, vocab, T, train_feats)
    val = None
    if val_ds is not None:
        if val_feats is None:
            val_feats = image_features(val_ds, cfg.features, cfg.grid)
        val = prepare(val_ds, vocab, T, val_feats)

    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    L, M = train_feats.shape[1:]
    if cfg.features == "conv":
        M = train_feats.shape[2]
    model = build_model(cfg, vocab, L, M, T, rng)
    model.config["grid"] = list(cfg.grid) if cfg.features != "precomputed" else list(infer_grid(L))
    if cfg.features != "conv":
        model.set_feature_scaling(train_feats)
    state = OptState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    result = TrainResult(model, vocab, T)
    best_acc = -1.0
    dropout_rng = rng if cfg.dropout > 0 else None

    for epoch in range(cfg.epochs):
        state.lr = learning_rate(cfg.lr, epoch, cfg.halve_every)
        order = rng.permutation(len(data))
        total_loss, correct = 0.0, 0
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = data.batch(order[start:start + cfg.batch_size])
            model.zero_grad()
            logits, _ = model.forward(batch, rng=dropout_rng)
            loss = softmax_cross_entropy(logits, batch.labels)
            if not math.isfinite(float(loss.data)):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {bi}")
            loss.backward()
            for name, t in model.tensors.items():
                sgd_momentum_step(t, state, model.frozen_rows(name))
            total_loss += float(loss.data) * len(batch)
            correct += int((logits.data.argmax(-1) == batch.labels).sum())
        row = {"epoch": epoch + 1, "lr": state.lr, "train_loss": total_loss / len(data),
               "train_acc": correct / len(data)}
        if val is not None:
            row["val_acc"] = accuracy(model, val)
        result.history.append(row)
        log.info("epoch %d %s", epoch + 1, row)
        score = row.get("val_acc", row["train_acc"])
        if score > best_acc:
            best_acc = score
            result.best_epoch = epoch + 1
            result.best_model_state = {n: t.data.copy() for n, t in model.tensors.items()}

    if out_dir is not None:
        write_run(result, cfg, out_dir)
    return result


def build_id() -> str:
    """``git describe`` of the source tree, or the package version outside a checkout."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def run_manifest(config: dict, seed: int, metrics: dict, **extra) -> dict:
    return {"config": config, "seed": seed, "build": build_id(), "metrics": metrics, **extra}


def write_manifest(path, manifest: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_run(result: TrainResult, cfg: TrainConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out / "final.ckpt")
    if result.best_model_state is not None:
        best = type(result.model)({n: _copy_tensor(v) for n, v in result.best_model_state.items()},
                                  dict(result.model.config))
        save_checkpoint(best, out / "best.ckpt")
    else:
        save_checkpoint(result.model, out / "best.ckpt")
    (out / "vocab.json").write_text(result.vocab.to_json() + "\n", encoding="utf-8")
    metrics = {"history": result.history, "best_epoch": result.best_epoch}
    write_manifest(out / "run.json", run_manifest(asdict(cfg), cfg.seed, metrics, T=result.T))
    return out


def _copy_tensor(data):
    return Tensor(data.copy(), requires_grad=True)


# ---------------------------------------------------------------- evaluation

def predict_all(model: _Model, data: Prepared, batch_size: int = 500) -> tuple[np.ndarray, np.ndarray]:
    """Argmax predictions and probability rows for every prepared sample."""
    probs = []
    for start in range(0, len(data), batch_size):
        b = data.batch(np.arange(start, min(start + batch_size, len(data))))
        probs.append(model.probabilities(b))
    P = np.concatenate(probs) if probs else np.zeros((0, model.config["K"]))
    return P.argmax(-1), P


def accuracy(model: _Model, data: Prepared) -> float:
    pred, _ = predict_all(model, data)
    return float((pred == data.labels).mean())


def normalize_answer(ans: str) -> str:
    return " ".join(ans.lower().strip().strip(string.punctuation).split())


def vqa_consensus(pred: str, human_answers) -> float:
    """min(#humans that gave ``pred`` / 3, 1)."""
    humans = list(human_answers)
    if not humans:
        raise ValueError("need at least one human answer")
    p = normalize_answer(pred)
    matches = sum(normalize_answer(h) == p for h in humans)
    return min(matches / 3.0, 1.0)


@dataclass
class EvalReport:
    accuracy: float
    per_category: dict[str, float]
    category_counts: dict[str, int]
    consensus: float | None = None
    records: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


def evaluate(model: _Model, vocab: Vocabulary, ds: Dataset, feats: np.ndarray, T: int | None = None) -> EvalReport:
    """0-1 accuracy overall and per category; no dropout."""
    if model.config.get("vocab_hash") and model.config["vocab_hash"] != vocab.hash():
        raise ValueError("checkpoint was trained with a different vocabulary")
    T = T or model.config["T"]
    data = prepare(ds, vocab, T, feats)
    pred, _ = predict_all(model, data)
    correct = pred == data.labels
    kept = [s for s in ds.samples if s.answer in vocab.answer_to_class]
    records = []
    consensus = []
    for i, s in enumerate(kept):
        ans = vocab.answers[int(pred[i])]
        rec = {"sample": i, "image": s.image, "category": s.category, "prediction": ans,
               "answer": s.answer, "correct": bool(correct[i])}
        if s.human_answers:
            rec["consensus"] = vqa_consensus(ans, s.human_answers)
            consensus.append(rec["consensus"])
        records.append(rec)
    return _report(correct, data.categories, records, consensus)


def _report(correct, categories, records, consensus=()) -> EvalReport:
    correct = np.asarray(correct, dtype=bool)
    by_cat: dict[str, list[bool]] = defaultdict(list)
    for c, ok in zip(categories, correct):
        by_cat[c].append(bool(ok))
    return EvalReport(
        float(correct.mean()) if len(correct) else 0.0,
        {c: float(np.mean(v)) for c, v in sorted(by_cat.items())},
        {c: len(v) for c, v in sorted(by_cat.items())},
        float(np.mean(consensus)) if len(consensus) else None,
        records,
    )


def constant_answer_report(ds: Dataset, answer: str) -> EvalReport:
    correct = [s.answer == answer for s in ds.samples]
    records = [{"sample": i, "prediction": answer, "answer": s.answer, "correct": ok}
               for i, (s, ok) in enumerate(zip(ds.samples, correct))]
    return _report(correct, [s.category for s in ds.samples], records)


def position_heuristic_baseline(train_ds: Dataset, test_ds: Dataset, size: int | None = None) -> EvalReport:
    """Majority answer per (3x3 zone of the square centre, question category).

    Fitted on ``train_ds``; unseen keys fall back to the overall majority.
    """
    if any(s.square_box is None for s in train_ds.samples + test_ds.samples):
        raise ValueError("position heuristic needs square geometry on every sample")
    size = size or train_ds.images[0].width

    def key(s):
        x0, y0, x1, y1 = s.square_box
        return zone_of_point((x0 + x1) / 2, (y0 + y1) / 2, size), s.category

    votes: dict[tuple, Counter] = defaultdict(Counter)
    overall: Counter = Counter()
    for s in train_ds.samples:
        votes[key(s)][s.answer] += 1
        overall[s.answer] += 1

    def majority(c: Counter) -> str:
        return sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]

    fallback = majority(overall)
    rule = {k: majority(c) for k, c in votes.items()}
    correct, records = [], []
    for i, s in enumerate(test_ds.samples):
        pred = rule.get(key(s), fallback)
        correct.append(pred == s.answer)
        records.append({"sample": i, "prediction": pred, "answer": s.answer, "correct": pred == s.answer})
    return _report(correct, [s.category for s in test_ds.samples], records)
