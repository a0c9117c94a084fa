import json

import numpy as np
import pytest

from smemvqa.harness import (
    DivergenceError,
    TrainConfig,
    _report,
    build_model,
    constant_answer_report,
    evaluate,
    image_features,
    learning_rate,
    position_heuristic_baseline,
    train,
    vqa_consensus,
)
from smemvqa.model import load_checkpoint
from smemvqa.synth import Dataset, SynthSpec, generate
from smemvqa.text import build_vocab


@pytest.fixture(scope="module")
def small_abs():
    tr, te = generate(SynthSpec("abs", n_train=60, n_test=20, seed=4))
    return tr, te, image_features(tr), image_features(te)


def test_learning_rate_schedule():
    assert learning_rate(0.01, 12, 6) == 0.0025  # 13th epoch, after two halvings
    assert learning_rate(0.01, 5, 6) == 0.01
    assert learning_rate(0.01, 6, 6) == 0.005
    assert [learning_rate(1.0, e, 2) for e in range(6)] == [1, 1, 0.5, 0.5, 0.25, 0.25]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(model="lstm")
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    assert TrainConfig(model="smem-2hop").hop_count == 2
    assert TrainConfig(model="smem-Hhop", hops=3).hop_count == 3
    assert TrainConfig.from_dict({"epochs": 3, "unknown": 1}).epochs == 3


def test_zero_epochs_returns_initialisation(small_abs, tmp_path):
    tr, _, ftr, _ = small_abs
    cfg = TrainConfig(epochs=0, N=16, seed=3)
    res = train(cfg, tr, out_dir=tmp_path, train_feats=ftr)
    vocab, _ = build_vocab(tr.corpus())
    fresh = build_model(cfg, vocab, 16, 12, res.T, np.random.Generator(np.random.PCG64(3)))
    for n, t in fresh.tensors.items():
        assert np.array_equal(res.model[n].data, t.data)
    saved = load_checkpoint(tmp_path / "final.ckpt")
    assert all(np.array_equal(saved[n].data, t.data) for n, t in fresh.tensors.items())
    assert res.history == []


def test_same_seed_same_run(small_abs, tmp_path):
    tr, te, ftr, fte = small_abs
    cfg = TrainConfig(epochs=3, N=16, seed=5)
    a = train(cfg, tr, te, out_dir=tmp_path / "a", train_feats=ftr, val_feats=fte)
    b = train(cfg, tr, te, out_dir=tmp_path / "b", train_feats=ftr, val_feats=fte)
    assert a.history == b.history
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
    c = train(TrainConfig(epochs=3, N=16, seed=6), tr, train_feats=ftr)
    assert c.history != a.history


def test_training_lowers_loss_and_freezes_padding(small_abs):
    tr, _, ftr, _ = small_abs
    res = train(TrainConfig(epochs=8, N=16, seed=0), tr, train_feats=ftr)
    assert res.history[-1]["train_loss"] < res.history[0]["train_loss"]
    assert np.array_equal(res.model["E"].data[-1], np.zeros(16))
    assert [h["lr"] for h in res.history] == [0.01] * 6 + [0.005] * 2


def test_run_manifest(small_abs, tmp_path):
    tr, _, ftr, _ = small_abs
    train(TrainConfig(epochs=1, N=8, seed=2), tr, out_dir=tmp_path, train_feats=ftr)
    doc = json.loads((tmp_path / "run.json").read_text())
    assert set(doc) >= {"config", "seed", "build", "metrics"}
    assert doc["seed"] == 2 and doc["config"]["N"] == 8
    assert len(doc["metrics"]["history"]) == 1
    assert {p.name for p in tmp_path.iterdir()} >= {"final.ckpt", "best.ckpt", "vocab.json", "run.json"}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_position(small_abs):
    tr, _, ftr, _ = small_abs
    with pytest.raises(DivergenceError, match=r"epoch \d+, batch \d+"):
        train(TrainConfig(epochs=5, N=16, lr=1e200), tr, train_feats=ftr)


def test_evaluation_is_repeatable_and_checks_vocab(small_abs):
    tr, te, ftr, fte = small_abs
    res = train(TrainConfig(epochs=2, N=8), tr, train_feats=ftr)
    a = evaluate(res.model, res.vocab, te, fte)
    b = evaluate(res.model, res.vocab, te, fte)
    assert a == b
    other, _ = build_vocab([("what color", "red")])
    with pytest.raises(ValueError, match="vocabulary"):
        evaluate(res.model, other, te, fte)


def test_per_category_accounting(small_abs):
    tr, te, ftr, fte = small_abs
    res = train(TrainConfig(epochs=2, N=8), tr, train_feats=ftr)
    rep = evaluate(res.model, res.vocab, te, fte)
    weighted = sum(rep.per_category[c] * n for c, n in rep.category_counts.items()) / sum(rep.category_counts.values())
    assert weighted == pytest.approx(rep.accuracy, abs=1e-12)
    assert rep.accuracy == np.mean([r["correct"] for r in rep.records])
    assert 0.0 <= rep.accuracy <= 1.0


def test_always_no_scores_answer_prior(small_abs):
    _, te, _, _ = small_abs
    rep = constant_answer_report(te, "no")
    assert rep.accuracy == 0.75


def test_perfect_predictor():
    rep = _report([True] * 4, ["top", "top", "left", "right"], [])
    assert rep.accuracy == 1.0 and rep.per_category == {"left": 1.0, "right": 1.0, "top": 1.0}


@pytest.mark.parametrize("matches, score", [(0, 0.0), (1, 1 / 3), (2, 2 / 3), (3, 1.0), (5, 1.0)])
def test_vqa_consensus(matches, score):
    humans = ["Two"] * matches + ["three"] * (10 - matches)
    assert vqa_consensus("two", humans) == score


def test_vqa_consensus_needs_humans():
    with pytest.raises(ValueError):
        vqa_consensus("yes", [])


def test_consensus_in_report(small_abs):
    tr, te, ftr, fte = small_abs
    res = train(TrainConfig(epochs=1, N=8), tr, train_feats=ftr)
    for s in te.samples:
        s.human_answers = [s.answer] * 3
    try:
        rep = evaluate(res.model, res.vocab, te, fte)
        assert rep.consensus == pytest.approx(rep.accuracy, abs=1e-12)
    finally:
        for s in te.samples:
            s.human_answers = None


def test_position_heuristic_absolute(small_abs):
    tr, te, _, _ = small_abs
    assert position_heuristic_baseline(tr, te).accuracy == 1.0


def test_position_heuristic_relative_is_weak():
    tr, te = generate(SynthSpec("rel", n_train=400, n_test=200, seed=2))
    assert position_heuristic_baseline(tr, te).accuracy < 0.85


def test_position_heuristic_one_image(small_abs):
    tr, te, _, _ = small_abs
    one = Dataset("absolute", tr.images[:1], tr.samples[:4])
    a = position_heuristic_baseline(one, te)
    b = position_heuristic_baseline(one, te)
    assert a == b
    # unseen (zone, category) keys fall back to the majority answer "no"
    assert {r["prediction"] for r in a.records} <= {"yes", "no"}


def test_position_heuristic_needs_geometry(small_abs):
    tr, te, _, _ = small_abs
    broken = Dataset("absolute", tr.images[:1], [tr.samples[0]])
    broken.samples[0] = type(tr.samples[0])(0, "q", "no", "top", None)
    with pytest.raises(ValueError, match="geometry"):
        position_heuristic_baseline(broken, te)


def test_ibowimg_trains(small_abs):
    tr, te, ftr, fte = small_abs
    res = train(TrainConfig(model="ibowimg", epochs=2, N=8), tr, train_feats=ftr)
    assert 0.0 <= evaluate(res.model, res.vocab, te, fte).accuracy <= 1.0


def test_heuristic_is_not_trainable(small_abs):
    tr, _, ftr, _ = small_abs
    with pytest.raises(ValueError):
        train(TrainConfig(model="position-heuristic", epochs=1), tr, train_feats=ftr)


def test_conv_features_train(small_abs):
    tr, _, _, _ = small_abs
    res = train(TrainConfig(epochs=1, N=8, features="conv", conv_channels=4), tr)
    assert "conv_k" in res.model.tensors and "feat_mean" not in res.model.config
