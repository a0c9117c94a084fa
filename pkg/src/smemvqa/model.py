"""Spatial memory network for VQA, its iBOWIMG baseline and checkpoints.

Shapes used throughout (batched; B samples):

    ids, mask   B x T        word ids (-1 = padding) and real-word mask
    S           B x L x M    spatial memory, one feature row per grid cell
    V           B x T x N    word vectors (padding rows exactly zero)
    C           B x T x L    word/location correlations
    attention   B x L        softmax over locations
    evidence    B x N        attention-weighted location embedding
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import TinyConvParams, tiny_conv_forward
from .tensor import (
    DimensionError,
    Tensor,
    add,
    concat,
    embedding,
    inner,
    matmul,
    masked_rowwise_max,
    mean_axis,
    mul,
    relu,
    reshape,
    row_softmax,
    softmax_cross_entropy,
    weighted_sum_seq,
)

CKPT_MAGIC = b"SMEMCKPT"
CKPT_VERSION = 1


@dataclass
class SMemConfig:
    N: int = 64
    hops: int = 1
    dropout: float = 0.0
    weight_decay: float = 0.0
    init_scale: str = "glorot-uniform"
    conv_channels: int = 0  # >0 puts the trainable 5x5 conv in front of the memory

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.hops < 1:
            raise ValueError("hop count must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")


@dataclass
class Batch:
    ids: np.ndarray
    mask: np.ndarray
    feats: np.ndarray  # B x L x M grid features, or B x L x 75 conv windows
    labels: np.ndarray | None = None

    def __len__(self):
        return len(self.ids)


@dataclass
class HopTrace:
    """Per-hop diagnostics; arrays keep the batch axis first."""

    C: np.ndarray
    argword: np.ndarray
    attention: list[np.ndarray] = field(default_factory=list)
    correlation: list[np.ndarray] = field(default_factory=list)  # hops >= 2
    evidence: list[np.ndarray] = field(default_factory=list)
    P: np.ndarray | None = None

    def sample(self, i: int) -> "HopTrace":
        return HopTrace(
            self.C[i], self.argword[i],
            [a[i] for a in self.attention], [c[i] for c in self.correlation],
            [e[i] for e in self.evidence], None if self.P is None else self.P[i],
        )


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def evidence_names(k: int) -> tuple[str, str]:
    return ("W_E", "b_E") if k == 1 else (f"W_E{k}", f"b_E{k}")


# --------------------------------------------------------------- building blocks

def attention_embed(S, W_A, b_A) -> Tensor:
    """S.W_A + b_A: project every location into the word space."""
    S = S if isinstance(S, Tensor) else Tensor(S)
    if S.shape[-1] != W_A.shape[0] or b_A.shape != (S.shape[-2], W_A.shape[1]):
        raise DimensionError(f"location embedding: S {S.shape}, W {W_A.shape}, b {b_A.shape}")
    return add(matmul(S, W_A), b_A)


def correlation(V, embedded) -> Tensor:
    """C[j, i] = v_j . embedded_i."""
    return inner(V, embedded)


def word_guided_attention(C, mask) -> tuple[Tensor, np.ndarray]:
    """Softmax over locations of the best real-word correlation.

    Also returns, per location, which word won the max.
    """
    best, argword = masked_rowwise_max(C, mask)
    return row_softmax(best), argword


def _weighted_rows(weights: Tensor, rows: Tensor) -> Tensor:
    lead = weights.shape[:-1]
    w = reshape(weights, lead + (1, weights.shape[-1]))
    out = matmul(w, rows)
    return reshape(out, lead + (rows.shape[-1],))


def gather_evidence(S, weights, W_emb, b_emb) -> Tensor:
    """weights . (S.W_emb + b_emb)."""
    weights = weights if isinstance(weights, Tensor) else Tensor(weights)
    return _weighted_rows(weights, attention_embed(S, W_emb, b_emb))


def bow_question(V, mask, W_Q, b_Q) -> Tensor:
    """Position-weighted sum of word vectors plus bias.

    Padding rows are zero vectors, so they add exact zeros; ``mask`` is only
    checked for shape.
    """
    V = V if isinstance(V, Tensor) else Tensor(V)
    if np.shape(mask) != V.shape[:-1] or V.shape[-1] != b_Q.shape[0]:
        raise DimensionError(f"bow_question: V {V.shape}, mask {np.shape(mask)}, b_Q {b_Q.shape}")
    return add(weighted_sum_seq(W_Q, V), b_Q)


def hop_k_forward(O_prev: Tensor, S, prev_embedded: Tensor, params: dict[str, Tensor], k: int):
    """One further hop, k >= 2.

    The attention embedding of hop k is hop k-1's evidence embedding
    (``prev_embedded``), so its weights receive gradient from both uses.
    Returns (evidence, this hop's evidence embedding, correlation, attention).
    """
    if k < 2:
        raise ValueError("hop_k_forward handles hops 2 and up")
    W, b = (params[n] for n in evidence_names(k))
    lead = O_prev.shape[:-1]
    q = reshape(O_prev, lead + (1, O_prev.shape[-1]))
    corr = reshape(inner(prev_embedded, q), lead + (prev_embedded.shape[-2],))
    att = row_softmax(corr)
    embedded = attention_embed(S, W, b)
    return _weighted_rows(att, embedded), embedded, corr, att


def predict_logits(hidden: Tensor, W_P: Tensor, b_P: Tensor, dropout: float = 0.0,
                   rng: np.random.Generator | None = None) -> Tensor:
    """W_P . dropout(ReLU(hidden)) + b_P. Dropout runs only when ``rng`` is given."""
    if hidden.shape[-1] != W_P.shape[1]:
        raise DimensionError(f"predict: hidden {hidden.shape} vs W_P {W_P.shape}")
    h = relu(hidden)
    if dropout > 0 and rng is not None:
        keep = rng.random(h.shape) >= dropout
        h = mul(h, keep / (1.0 - dropout))
    return add(inner(h, W_P), b_P)


def predict(hidden: Tensor, W_P: Tensor, b_P: Tensor, dropout: float = 0.0,
            rng: np.random.Generator | None = None) -> Tensor:
    return row_softmax(predict_logits(hidden, W_P, b_P, dropout, rng))


# ---------------------------------------------------------------- models

class _Model:
    kind = ""

    def __init__(self, tensors: dict[str, Tensor], config: dict):
        self.tensors = tensors
        self.config = config
        for name, t in tensors.items():
            t.name = name

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def frozen_rows(self, name: str) -> tuple[int, ...]:
        # last row of the word table is the padding vector
        return (self.tensors["E"].shape[0] - 1,) if name == "E" else ()

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    @property
    def conv(self) -> TinyConvParams | None:
        if "conv_k" in self.tensors:
            return TinyConvParams(self.tensors["conv_k"], self.tensors["conv_b"])
        return None

    def memory(self, feats) -> Tensor:
        """Grid features standardised with the stored training statistics,
        or the conv extractor applied to unfolded windows."""
        conv = self.conv
        if conv is not None:
            return tiny_conv_forward(feats, conv)
        feats = np.asarray(feats, dtype=np.float64)
        if "feat_mean" in self.config:
            feats = (feats - np.asarray(self.config["feat_mean"])) / np.asarray(self.config["feat_std"])
        return Tensor(feats)

    def set_feature_scaling(self, feats: np.ndarray, floor: float = 1e-6):
        """Fit per-dimension mean/std over every location of ``feats``."""
        flat = np.asarray(feats).reshape(-1, feats.shape[-1])
        self.config["feat_mean"] = flat.mean(axis=0).tolist()
        self.config["feat_std"] = np.maximum(flat.std(axis=0), floor).tolist()

    def words(self, ids) -> Tensor:
        T = self.config["T"]
        if np.shape(ids)[-1] > T:
            raise DimensionError(f"question length {np.shape(ids)[-1]} exceeds T={T}")
        return embedding(self.tensors["E"], ids)

    def probabilities(self, batch: Batch) -> np.ndarray:
        logits, _ = self.forward(batch)
        return row_softmax(logits).data

    def loss(self, batch: Batch, rng: np.random.Generator | None = None) -> Tensor:
        if batch.labels is None:
            raise ValueError("batch has no labels")
        logits, _ = self.forward(batch, rng=rng)
        return softmax_cross_entropy(logits, batch.labels)

    def loss_and_grad(self, batch: Batch, rng: np.random.Generator | None = None) -> tuple[float, dict[str, np.ndarray]]:
        """Mean cross-entropy over the batch and a copy of every gradient.

        Passing ``rng`` selects training mode (dropout active).
        """
        self.zero_grad()
        loss = self.loss(batch, rng)
        loss.backward()
        return float(loss.data), {n: t.grad.copy() for n, t in self.tensors.items()}


class SMemVQA(_Model):
    kind = "smem"

    @property
    def hops(self) -> int:
        return self.config["hops"]

    def forward(self, batch: Batch, rng: np.random.Generator | None = None,
                uniform_attention: bool = False) -> tuple[Tensor, HopTrace]:
        p = self.tensors
        S = self.memory(batch.feats)
        V = self.words(batch.ids)
        mask = np.asarray(batch.mask, dtype=bool)

        embedded_a = attention_embed(S, p["W_A"], p["b_A"])
        C = correlation(V, embedded_a)
        att, argword = word_guided_attention(C, mask)
        if uniform_attention:
            L = att.shape[-1]
            att = Tensor(np.full(att.shape, 1.0 / L))
        embedded_e = attention_embed(S, p["W_E"], p["b_E"])
        s_att = _weighted_rows(att, embedded_e)
        Q = bow_question(V, mask, p["W_Q"], p["b_Q"])
        O = add(s_att, Q)
        trace = HopTrace(C.data, argword, [att.data], [], [s_att.data])

        prev = embedded_e
        for k in range(2, self.hops + 1):
            ev, prev, corr, att_k = hop_k_forward(O, S, prev, p, k)
            O = add(O, ev)
            trace.correlation.append(corr.data)
            trace.attention.append(att_k.data)
            trace.evidence.append(ev.data)

        logits = predict_logits(O, p["W_P"], p["b_P"], self.config.get("dropout", 0.0), rng)
        trace.P = row_softmax(logits).data
        return logits, trace


class IBowImg(_Model):
    """softmax(W . [mean_i s_i ; BOW(question)] + b)."""

    kind = "ibowimg"

    def forward(self, batch: Batch, rng: np.random.Generator | None = None, **_) -> tuple[Tensor, None]:
        p = self.tensors
        S = self.memory(batch.feats)
        V = self.words(batch.ids)
        img = mean_axis(S, axis=-2)
        q = bow_question(V, batch.mask, p["W_Q"], p["b_Q"])
        return add(inner(concat(img, q), p["W"]), p["b"]), None


def init_params(cfg: SMemConfig, vocab_size: int, L: int, M: int, T: int, K: int,
                rng: np.random.Generator, vocab_hash: str = "") -> SMemVQA:
    """Glorot-uniform weights, zero biases, zero padding row in the word table."""
    if min(vocab_size, L, M, T, K) < 1:
        raise ValueError("all dimensions must be positive")
    N = cfg.N
    feat_dim = M
    t: dict[str, Tensor] = {}
    if cfg.conv_channels:
        conv = TinyConvParams.init(cfg.conv_channels, rng)
        t.update(conv.tensors())
        feat_dim = cfg.conv_channels
    E = np.zeros((vocab_size + 1, N))
    E[:vocab_size] = glorot(rng, vocab_size, N, (vocab_size, N))
    t["E"] = Tensor(E, requires_grad=True)
    t["W_A"] = Tensor(glorot(rng, feat_dim, N, (feat_dim, N)), requires_grad=True)
    t["b_A"] = Tensor(np.zeros((L, N)), requires_grad=True)
    for k in range(1, cfg.hops + 1):
        wn, bn = evidence_names(k)
        t[wn] = Tensor(glorot(rng, feat_dim, N, (feat_dim, N)), requires_grad=True)
        t[bn] = Tensor(np.zeros((L, N)), requires_grad=True)
    t["W_Q"] = Tensor(glorot(rng, T, 1, (T,)), requires_grad=True)
    t["b_Q"] = Tensor(np.zeros(N), requires_grad=True)
    t["W_P"] = Tensor(glorot(rng, N, K, (K, N)), requires_grad=True)
    t["b_P"] = Tensor(np.zeros(K), requires_grad=True)
    config = dict(kind="smem", N=N, hops=cfg.hops, L=L, M=M, T=T, K=K, V=vocab_size,
                  dropout=cfg.dropout, conv_channels=cfg.conv_channels, vocab_hash=vocab_hash)
    return SMemVQA(t, config)


def init_ibowimg(N: int, vocab_size: int, L: int, M: int, T: int, K: int, rng: np.random.Generator,
                 vocab_hash: str = "", conv_channels: int = 0) -> IBowImg:
    t: dict[str, Tensor] = {}
    feat_dim = M
    if conv_channels:
        t.update(TinyConvParams.init(conv_channels, rng).tensors())
        feat_dim = conv_channels
    E = np.zeros((vocab_size + 1, N))
    E[:vocab_size] = glorot(rng, vocab_size, N, (vocab_size, N))
    t["E"] = Tensor(E, requires_grad=True)
    t["W_Q"] = Tensor(glorot(rng, T, 1, (T,)), requires_grad=True)
    t["b_Q"] = Tensor(np.zeros(N), requires_grad=True)
    t["W"] = Tensor(glorot(rng, feat_dim + N, K, (K, feat_dim + N)), requires_grad=True)
    t["b"] = Tensor(np.zeros(K), requires_grad=True)
    config = dict(kind="ibowimg", N=N, hops=0, L=L, M=M, T=T, K=K, V=vocab_size,
                  dropout=0.0, conv_channels=conv_channels, vocab_hash=vocab_hash)
    return IBowImg(t, config)


def one_hop_forward(ids, mask, S, model: SMemVQA) -> tuple[np.ndarray, HopTrace]:
    """Single-sample hop-1 output O = S_att + Q, with its trace."""
    p = model.tensors
    S = Tensor(np.asarray(S)[None])
    V = model.words(np.asarray(ids)[None])
    mask = np.asarray(mask, dtype=bool)[None]
    C = correlation(V, attention_embed(S, p["W_A"], p["b_A"]))
    att, argword = word_guided_attention(C, mask)
    s_att = gather_evidence(S, att, p["W_E"], p["b_E"])
    O = add(s_att, bow_question(V, mask, p["W_Q"], p["b_Q"]))
    return O.data[0], HopTrace(C.data, argword, [att.data], [], [s_att.data]).sample(0)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: _Model, path) -> None:
    """SMEMCKPT layout: magic, u32 version, u32 config length, UTF-8 JSON
    config, u32 tensor count, then per tensor u32 name length, name,
    u32 rank, u32 extents, little-endian float64 data."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    cfg = json.dumps(model.config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<II", CKPT_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(model.tensors)))
    for name, t in model.tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> _Model:
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte offset 0")
    off = 8

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise CheckpointError(f"{path}: truncated at byte offset {off}")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    version, cfg_len = take("<II")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    config = json.loads(blob[off:off + cfg_len].decode("utf-8"))
    off += cfg_len
    (count,) = take("<I")
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        (n,) = take("<I")
        name = blob[off:off + n].decode("utf-8")
        off += n
        (rank,) = take("<I")
        shape = take(f"<{rank}I")
        size = int(np.prod(shape)) * 8
        if off + size > len(blob):
            raise CheckpointError(f"{path}: tensor {name} truncated at byte offset {off}")
        data = np.frombuffer(blob, dtype="<f8", count=size // 8, offset=off).reshape(shape)
        off += size
        tensors[name] = Tensor(data.astype(np.float64), requires_grad=True)
    cls = SMemVQA if config["kind"] == "smem" else IBowImg
    return cls(tensors, config)
