"""The MOFormer text encoder: token embedding, sinusoidal positions, post-norm
multihead self-attention layers.  The first-token (CLS) row of the output is
the sequence representation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import OddDimension, ShapeMismatch, TokenIdOutOfRange
from .mofid import MAX_LEN, MofId, TokenSequence, Vocabulary, encode


@dataclass(frozen=True)
class TransformerConfig:
    vocab_size: int
    d_emb: int = 512
    n_heads: int = 8
    n_layers: int = 6
    d_ff: int = 512
    max_len: int = MAX_LEN

    def __post_init__(self):
        if self.d_emb % self.n_heads:
            raise ShapeMismatch(f"d_emb={self.d_emb} is not divisible by n_heads={self.n_heads}")
        if self.d_emb % 2:
            raise OddDimension(f"d_emb must be even for positional encoding, got {self.d_emb}")

    @property
    def d_k(self) -> int:
        return self.d_emb // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderState:
    config: TransformerConfig
    params: dict[str, Tensor]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(config: TransformerConfig, rng: np.random.Generator) -> EncoderState:
    d, h, dk, dff = config.d_emb, config.n_heads, config.d_k, config.d_ff
    arrays: dict[str, np.ndarray] = {
        "embedding": rng.normal(0.0, 1.0 / math.sqrt(d), size=(config.vocab_size, d))
    }
    for layer in range(config.n_layers):
        p = f"layers.{layer}"
        for w in ("w_q", "w_k", "w_v"):
            arrays[f"{p}.attn.{w}"] = _uniform(rng, (h, d, dk), d)
        arrays[f"{p}.attn.w_o"] = _uniform(rng, (d, d), d)
        arrays[f"{p}.ff.w1"] = _uniform(rng, (d, dff), d)
        arrays[f"{p}.ff.b1"] = np.zeros(dff)
        arrays[f"{p}.ff.w2"] = _uniform(rng, (dff, d), dff)
        arrays[f"{p}.ff.b2"] = np.zeros(d)
        for norm in ("norm1", "norm2"):
            arrays[f"{p}.{norm}.gain"] = np.ones(d)
            arrays[f"{p}.{norm}.bias"] = np.zeros(d)
    params = {name: ad.parameter(a, name=name) for name, a in arrays.items()}
    return EncoderState(config, params)


def positional_encoding(max_len: int, d_emb: int) -> np.ndarray:
    if d_emb % 2:
        raise OddDimension(f"positional encoding needs an even width, got {d_emb}")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    div = 10000.0 ** (np.arange(0, d_emb, 2, dtype=np.float64) / d_emb)
    pe = np.empty((max_len, d_emb))
    pe[:, 0::2] = np.sin(pos / div)
    pe[:, 1::2] = np.cos(pos / div)
    return pe


def _key_mask(pad_mask, ndim: int) -> np.ndarray | None:
    if pad_mask is None:
        return None
    mask = np.asarray(pad_mask, dtype=bool)[..., None, :]
    while mask.ndim < ndim:
        mask = np.expand_dims(mask, 1)
    return mask


def attention(Q, K, V, pad_mask=None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; PAD keys receive exactly zero weight.

    ``pad_mask`` has shape ``(..., L)`` over keys (batch axes first).
    Returns ``(output, weights)``.
    """
    Q, K, V = ad._as_tensor(Q), ad._as_tensor(K), ad._as_tensor(V)
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ShapeMismatch(f"attention shapes disagree: Q{Q.shape} K{K.shape} V{V.shape}")
    scores = ad.matmul(Q, K.T) * (1.0 / math.sqrt(Q.shape[-1]))
    weights = ad.softmax(scores, _key_mask(pad_mask, scores.ndim))
    return ad.matmul(weights, V), weights


def _split_heads_input(X: Tensor) -> Tensor:
    return X.reshape(X.shape[:-2] + (1,) + X.shape[-2:])


def multihead(X, params: dict[str, Tensor], prefix: str, pad_mask=None) -> tuple[Tensor, Tensor]:
    """Per-head projections, attention, concatenation along features, then W_o.

    ``X`` is ``(L, d)`` or ``(B, L, d)``; weights come back as ``(..., h, L, L)``.
    """
    X = ad._as_tensor(X)
    w_q, w_o = params[f"{prefix}.w_q"], params[f"{prefix}.w_o"]
    if X.shape[-1] != w_q.shape[1]:
        raise ShapeMismatch(f"input width {X.shape[-1]} != model width {w_q.shape[1]}")
    Xh = _split_heads_input(X)
    Q = ad.matmul(Xh, w_q)
    K = ad.matmul(Xh, params[f"{prefix}.w_k"])
    V = ad.matmul(Xh, params[f"{prefix}.w_v"])
    heads, weights = attention(Q, K, V, pad_mask)
    h, L, dv = heads.shape[-3:]
    lead = heads.shape[:-3]
    concat = ad.swapaxes(heads, -3, -2).reshape(lead + (L, h * dv))
    return ad.matmul(concat, w_o), weights


def feed_forward(X, params: dict[str, Tensor], prefix: str) -> Tensor:
    hidden = ad.relu(ad.matmul(X, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return ad.matmul(hidden, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def encoder_layer(X, params: dict[str, Tensor], layer: int, pad_mask=None) -> tuple[Tensor, Tensor]:
    p = f"layers.{layer}"
    attn, weights = multihead(X, params, f"{p}.attn", pad_mask)
    X1 = ad.layer_norm(X + attn, params[f"{p}.norm1.gain"], params[f"{p}.norm1.bias"])
    X2 = ad.layer_norm(
        X1 + feed_forward(X1, params, f"{p}.ff"),
        params[f"{p}.norm2.gain"],
        params[f"{p}.norm2.bias"],
    )
    return X2, weights


@dataclass
class ForwardOutput:
    embeddings: Tensor
    attentions: list[np.ndarray]


def forward(state: EncoderState, ids, pad_mask) -> ForwardOutput:
    """Run the encoder over ``ids`` of shape ``(L,)`` or ``(B, L)``."""
    cfg = state.config
    ids = np.asarray(ids, dtype=np.int64)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if ids.shape != pad_mask.shape:
        raise ShapeMismatch(f"ids {ids.shape} and pad_mask {pad_mask.shape} differ")
    if ids.shape[-1] > cfg.max_len:
        raise ShapeMismatch(f"sequence length {ids.shape[-1]} exceeds max_len {cfg.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise TokenIdOutOfRange(f"token ids must lie in [0, {cfg.vocab_size})")
    L = ids.shape[-1]
    X = ad.getitem(state.params["embedding"], ids) + positional_encoding(L, cfg.d_emb)
    attentions = []
    for layer in range(cfg.n_layers):
        X, w = encoder_layer(X, state.params, layer, pad_mask)
        attentions.append(w.data)
    return ForwardOutput(X, attentions)


def forward_sequence(seq: TokenSequence, state: EncoderState) -> ForwardOutput:
    return forward(state, seq.ids, seq.pad_mask)


def cls_embedding(out: ForwardOutput) -> Tensor:
    return out.embeddings[..., 0, :]


def encode_batch(state: EncoderState, seqs: list[TokenSequence]) -> Tensor:
    """CLS embeddings ``(B, d_emb)`` for a batch of sequences."""
    ids = np.stack([s.ids for s in seqs])
    mask = np.stack([s.pad_mask for s in seqs])
    return cls_embedding(forward(state, ids, mask))


def attention_records(state: EncoderState, mofid: MofId, vocab: Vocabulary) -> dict:
    """Per-(layer, head) attention over the non-PAD tokens of one MOFid."""
    seq = encode(mofid, vocab, state.config.max_len)
    out = forward_sequence(seq, state)
    keep = ~seq.pad_mask
    labels = vocab.decode(seq.ids[keep])
    records = []
    for layer, w in enumerate(out.attentions):
        for head in range(w.shape[0]):
            m = w[head][np.ix_(keep, keep)]
            records.append({"layer": layer, "head": head, "weights": m.tolist()})
    return {"mofid": str(mofid), "tokens": labels, "records": records}


def write_attention_file(data: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")
