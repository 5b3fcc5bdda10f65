"""Toy encoder-decoder that composes the encoding factors end to end.

The encoder consumes an EncodedInput: additive embeddings (token + positional
+ segment, plus row/column under E1), pre-LayerNorm transformer blocks whose
self-attention is restricted by the factor's mask and optionally shifted by
per-relation-class bias scalars (B1, one scalar per class per head per
layer). The decoder is a standard causal transformer with dense
cross-attention; answers are digit tokens with SEP between values.

Everything runs on numpy in float32 with hand-written backward passes; every
attention call (forward and backward) goes through the attention module, so
masked pairs contribute exactly zero gradient. Training is plain Adam with
greedy-decoding evaluation and early stopping on denotation accuracy.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import dense_backward, dense_forward
from .core import FactorConfig, QAExample, TabencError, ValidationError, derive_rng
from .linearize import EncodedInput, Vocabulary, default_vocab, encode_input
from .mask import N_BIAS_CLASSES, build_bias_map, build_mask
from .sqlexec import denotation_match

_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8
_OTHER_CLASS = N_BIAS_CLASSES - 1  # catch-all relation, used for padding


class TrainingDivergedError(TabencError):
    """Loss became non-finite during training."""


@dataclass
class ModelConfig:
    factor: FactorConfig = field(default_factory=FactorConfig)
    d_model: int = 128
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    ffn_dim: int = 256
    context_len: int = 512
    max_positions: int = 512
    dec_positions: int = 64
    max_answer_len: int = 64
    max_table_rows: int = 64
    max_table_cols: int = 16
    steps: int = 20000
    batch_size: int = 8
    learning_rate: float = 3e-4
    patience: int = 15
    eval_every: int = 500
    eval_fraction: float = 0.05
    eval_max: int = 200

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ValidationError("d_model must be divisible by n_heads")
        if self.max_positions < self.context_len:
            raise ValidationError("max_positions must cover the context length")
        if self.max_answer_len > self.dec_positions:
            raise ValidationError("max_answer_len must fit in decoder positions")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_json(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "factor"}
        out["factor"] = self.factor.to_dict()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        factor = FactorConfig.from_dict(obj.pop("factor", {}))
        return cls(factor=factor, **obj)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_params(cfg: ModelConfig, vocab_size: int, rng: np.random.Generator) -> dict:
    p: dict[str, np.ndarray] = {}
    d = cfg.d_model

    def normal(*shape):
        return (rng.standard_normal(shape) * 0.02).astype(np.float32)

    def zeros(*shape):
        return np.zeros(shape, dtype=np.float32)

    def ones(*shape):
        return np.ones(shape, dtype=np.float32)

    p["tok_emb"] = normal(vocab_size, d)
    p["pos_emb"] = normal(cfg.max_positions, d)
    p["seg_emb"] = normal(2, d)
    if cfg.factor.emb == "E1":
        p["row_emb"] = normal(cfg.max_table_rows + 1, d)
        p["col_emb"] = normal(cfg.max_table_cols + 1, d)
    p["dec_pos_emb"] = normal(cfg.dec_positions, d)

    def attn_block(prefix: str):
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{prefix}.{name}"] = normal(d, d)
            p[f"{prefix}.{name}_b"] = zeros(d)

    def ffn_block(prefix: str):
        p[f"{prefix}.w1"] = normal(d, cfg.ffn_dim)
        p[f"{prefix}.b1"] = zeros(cfg.ffn_dim)
        p[f"{prefix}.w2"] = normal(cfg.ffn_dim, d)
        p[f"{prefix}.b2"] = zeros(d)

    def ln_block(prefix: str):
        p[f"{prefix}.g"] = ones(d)
        p[f"{prefix}.b"] = zeros(d)

    for i in range(cfg.n_enc_layers):
        ln_block(f"enc{i}.ln1")
        attn_block(f"enc{i}.attn")
        if cfg.factor.bias == "B1":
            p[f"enc{i}.bias_scales"] = zeros(cfg.n_heads, N_BIAS_CLASSES)
        ln_block(f"enc{i}.ln2")
        ffn_block(f"enc{i}.ffn")
    ln_block("enc_ln")

    for i in range(cfg.n_dec_layers):
        ln_block(f"dec{i}.ln1")
        attn_block(f"dec{i}.self")
        ln_block(f"dec{i}.ln2")
        attn_block(f"dec{i}.cross")
        ln_block(f"dec{i}.ln3")
        ffn_block(f"dec{i}.ffn")
    ln_block("dec_ln")

    p["out_w"] = normal(d, vocab_size)
    p["out_b"] = zeros(vocab_size)
    return p


# ---------------------------------------------------------------------------
# primitive layers (explicit caches for the backward pass)
# ---------------------------------------------------------------------------

def _linear_fwd(x, w, b):
    return x @ w + b


def _linear_bwd(x, w, dy, grads, wname, bname):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    grads[wname] += x2.T @ dy2
    grads[bname] += dy2.sum(axis=0)
    return dy @ w.T


def _ln_fwd(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_bwd(dy, cache, grads, gname, bname):
    xhat, inv, g = cache
    grads[gname] += (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    grads[bname] += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    mean1 = dxhat.mean(axis=-1, keepdims=True)
    mean2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return inv * (dxhat - mean1 - xhat * mean2)


def _split_heads(x, n_heads):
    b, l, d = x.shape
    return x.reshape(b, l, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * dh)


def _mha_fwd(params, prefix, cfg, x_q, x_kv, allowed, bias):
    q = _split_heads(_linear_fwd(x_q, params[f"{prefix}.wq"], params[f"{prefix}.wq_b"]), cfg.n_heads)
    k = _split_heads(_linear_fwd(x_kv, params[f"{prefix}.wk"], params[f"{prefix}.wk_b"]), cfg.n_heads)
    v = _split_heads(_linear_fwd(x_kv, params[f"{prefix}.wv"], params[f"{prefix}.wv_b"]), cfg.n_heads)
    scale = 1.0 / float(np.sqrt(cfg.head_dim))
    out_h, weights = dense_forward(q, k, v, allowed=allowed, bias=bias, scale=scale,
                                   return_weights=True)
    merged = _merge_heads(out_h)
    y = _linear_fwd(merged, params[f"{prefix}.wo"], params[f"{prefix}.wo_b"])
    cache = (x_q, x_kv, q, k, v, weights, merged, allowed, bias, scale)
    return y, cache


def _mha_bwd(dy, cache, params, prefix, cfg, grads):
    x_q, x_kv, q, k, v, weights, merged, allowed, bias, scale = cache
    dmerged = _linear_bwd(merged, params[f"{prefix}.wo"], dy, grads,
                          f"{prefix}.wo", f"{prefix}.wo_b")
    d_out_h = _split_heads(dmerged, cfg.n_heads)
    dq, dk, dv, ds = dense_backward(q, k, v, d_out_h, allowed=allowed, bias=bias,
                                    scale=scale, weights=weights)
    dx_q = _linear_bwd(x_q, params[f"{prefix}.wq"], _merge_heads(dq), grads,
                       f"{prefix}.wq", f"{prefix}.wq_b")
    dx_kv = _linear_bwd(x_kv, params[f"{prefix}.wk"], _merge_heads(dk), grads,
                        f"{prefix}.wk", f"{prefix}.wk_b")
    dx_kv += _linear_bwd(x_kv, params[f"{prefix}.wv"], _merge_heads(dv), grads,
                         f"{prefix}.wv", f"{prefix}.wv_b")
    return dx_q, dx_kv, ds


def _ffn_fwd(params, prefix, x):
    h = _linear_fwd(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"])
    a = np.maximum(h, 0.0)
    y = _linear_fwd(a, params[f"{prefix}.w2"], params[f"{prefix}.b2"])
    return y, (x, h, a)


def _ffn_bwd(dy, cache, params, prefix, grads):
    x, h, a = cache
    da = _linear_bwd(a, params[f"{prefix}.w2"], dy, grads, f"{prefix}.w2", f"{prefix}.b2")
    dh = da * (h > 0)
    return _linear_bwd(x, params[f"{prefix}.w1"], dh, grads, f"{prefix}.w1", f"{prefix}.b1")


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class Prepared:
    """One example, encoded and ready to batch."""

    ids: np.ndarray
    pos: np.ndarray
    seg: np.ndarray
    row: np.ndarray
    col: np.ndarray
    allowed: np.ndarray  # (L, L) encoder self-attention mask
    rel: np.ndarray | None  # (L, L) relation classes, only under B1
    dec_in: np.ndarray
    target: np.ndarray
    answer: tuple[str, ...]


def answer_token_ids(answer, vocab: Vocabulary) -> list[int]:
    ids: list[int] = []
    for i, value in enumerate(answer):
        if i:
            ids.append(vocab.sep)
        for piece in Vocabulary.split_text(str(value)):
            ids.extend(vocab.piece_ids(piece)[0])
    ids.append(vocab.eos)
    return ids


def tokens_to_values(token_ids, vocab: Vocabulary) -> list[str]:
    values: list[str] = []
    current: list[str] = []
    for tid in token_ids:
        tid = int(tid)
        if tid in (vocab.pad, vocab.bos):
            continue
        if tid == vocab.eos:
            break
        if tid == vocab.sep:
            if current:
                values.append("".join(current))
            current = []
        else:
            current.append(vocab.symbol(tid))
    if current:
        values.append("".join(current))
    return values


def prepare_example(ex: QAExample, cfg: ModelConfig, vocab: Vocabulary) -> Prepared:
    enc = encode_input(ex.query, ex.table, cfg.factor, vocab, max_len=cfg.context_len)
    if cfg.factor.emb == "E1":
        if enc.row_idx.max(initial=0) > cfg.max_table_rows:
            raise ValidationError(f"table exceeds {cfg.max_table_rows} rows")
        if enc.col_idx.max(initial=0) > cfg.max_table_cols:
            raise ValidationError(f"table exceeds {cfg.max_table_cols} columns")
    allowed = build_mask(enc, cfg.factor.mask).dense
    rel = build_bias_map(enc).rel if cfg.factor.bias == "B1" else None
    target = np.asarray(answer_token_ids(ex.answer, vocab), dtype=np.int32)
    if len(target) > cfg.dec_positions:
        raise ValidationError(
            f"answer needs {len(target)} decoder positions, limit {cfg.dec_positions}"
        )
    dec_in = np.concatenate(([vocab.bos], target[:-1])).astype(np.int32)
    return Prepared(
        ids=enc.token_ids, pos=enc.pos_idx, seg=enc.segment,
        row=enc.row_idx, col=enc.col_idx,
        allowed=allowed, rel=rel,
        dec_in=dec_in, target=target, answer=ex.answer,
    )


@dataclass
class Batch:
    ids: np.ndarray          # (B, L)
    pos: np.ndarray
    seg: np.ndarray
    row: np.ndarray
    col: np.ndarray
    allowed: np.ndarray      # (B, 1, L, L)
    rel: np.ndarray | None   # (B, L, L)
    enc_real: np.ndarray     # (B, L) True at non-pad encoder positions
    dec_in: np.ndarray       # (B, D)
    target: np.ndarray       # (B, D)
    causal: np.ndarray       # (D, D)


def collate(items: list[Prepared], pad_id: int, with_rel: bool) -> Batch:
    b = len(items)
    L = max(len(it.ids) for it in items)
    D = max(len(it.dec_in) for it in items)
    ids = np.full((b, L), pad_id, dtype=np.int32)
    pos = np.zeros((b, L), dtype=np.int32)
    seg = np.zeros((b, L), dtype=np.int32)
    row = np.zeros((b, L), dtype=np.int32)
    col = np.zeros((b, L), dtype=np.int32)
    allowed = np.zeros((b, 1, L, L), dtype=bool)
    allowed[:, 0, np.arange(L), np.arange(L)] = True  # pad rows stay softmax-safe
    rel = np.full((b, L, L), _OTHER_CLASS, dtype=np.int8) if with_rel else None
    enc_real = np.zeros((b, L), dtype=bool)
    dec_in = np.full((b, D), pad_id, dtype=np.int32)
    target = np.full((b, D), pad_id, dtype=np.int32)
    for i, it in enumerate(items):
        n = len(it.ids)
        m = len(it.dec_in)
        ids[i, :n] = it.ids
        pos[i, :n] = it.pos
        seg[i, :n] = it.seg
        row[i, :n] = it.row
        col[i, :n] = it.col
        allowed[i, 0, :n, :n] = it.allowed
        if with_rel and it.rel is not None:
            rel[i, :n, :n] = it.rel
        enc_real[i, :n] = True
        dec_in[i, :m] = it.dec_in
        target[i, :m] = it.target
    causal = np.tril(np.ones((D, D), dtype=bool))
    return Batch(ids, pos, seg, row, col, allowed, rel, enc_real, dec_in, target, causal)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _gather_bias(scales: np.ndarray, rel: np.ndarray) -> np.ndarray:
    # scales (H, C), rel (B, L, L) -> (B, H, L, L)
    return scales[:, rel].transpose(1, 0, 2, 3)


def encoder_forward(params, cfg: ModelConfig, batch: Batch, keep_cache: bool):
    x = params["tok_emb"][batch.ids] + params["pos_emb"][batch.pos] + params["seg_emb"][batch.seg]
    if cfg.factor.emb == "E1":
        x = x + params["row_emb"][batch.row] + params["col_emb"][batch.col]
    layers = []
    for i in range(cfg.n_enc_layers):
        h1, c_ln1 = _ln_fwd(x, params[f"enc{i}.ln1.g"], params[f"enc{i}.ln1.b"])
        bias = None
        if cfg.factor.bias == "B1":
            bias = _gather_bias(params[f"enc{i}.bias_scales"], batch.rel)
        a, c_attn = _mha_fwd(params, f"enc{i}.attn", cfg, h1, h1, batch.allowed, bias)
        x = x + a
        h2, c_ln2 = _ln_fwd(x, params[f"enc{i}.ln2.g"], params[f"enc{i}.ln2.b"])
        f, c_ffn = _ffn_fwd(params, f"enc{i}.ffn", h2)
        x = x + f
        if keep_cache:
            layers.append((c_ln1, c_attn, c_ln2, c_ffn))
    out, c_final = _ln_fwd(x, params["enc_ln.g"], params["enc_ln.b"])
    cache = (layers, c_final) if keep_cache else None
    return out, cache


def encoder_backward(d_out, cache, params, cfg: ModelConfig, batch: Batch, grads,
                     instrument: list | None = None):
    layers, c_final = cache
    dx = _ln_bwd(d_out, c_final, grads, "enc_ln.g", "enc_ln.b")
    for i in reversed(range(cfg.n_enc_layers)):
        c_ln1, c_attn, c_ln2, c_ffn = layers[i]
        dh2 = _ffn_bwd(dx, c_ffn, params, f"enc{i}.ffn", grads)
        dx = dx + _ln_bwd(dh2, c_ln2, grads, f"enc{i}.ln2.g", f"enc{i}.ln2.b")
        dq_in, dkv_in, ds = _mha_bwd(dx, c_attn, params, f"enc{i}.attn", cfg, grads)
        if cfg.factor.bias == "B1":
            scale_grad = np.zeros((cfg.n_heads, N_BIAS_CLASSES), dtype=np.float64)
            for b in range(ds.shape[0]):
                flat_rel = batch.rel[b].ravel()
                for h in range(cfg.n_heads):
                    scale_grad[h] += np.bincount(
                        flat_rel, weights=ds[b, h].ravel().astype(np.float64),
                        minlength=N_BIAS_CLASSES,
                    )
            grads[f"enc{i}.bias_scales"] += scale_grad.astype(grads[f"enc{i}.bias_scales"].dtype)
        if instrument is not None:
            instrument.append(ds)
        dx = dx + _ln_bwd(dq_in + dkv_in, c_ln1, grads, f"enc{i}.ln1.g", f"enc{i}.ln1.b")

    np.add.at(grads["tok_emb"], batch.ids, dx)
    np.add.at(grads["pos_emb"], batch.pos, dx)
    np.add.at(grads["seg_emb"], batch.seg, dx)
    if cfg.factor.emb == "E1":
        np.add.at(grads["row_emb"], batch.row, dx)
        np.add.at(grads["col_emb"], batch.col, dx)


def decoder_forward(params, cfg: ModelConfig, dec_in, enc_states, cross_allowed,
                    causal, keep_cache: bool):
    D = dec_in.shape[1]
    y = params["tok_emb"][dec_in] + params["dec_pos_emb"][np.arange(D)]
    self_allowed = causal[None, None, :, :]
    layers = []
    for i in range(cfg.n_dec_layers):
        h1, c_ln1 = _ln_fwd(y, params[f"dec{i}.ln1.g"], params[f"dec{i}.ln1.b"])
        a, c_self = _mha_fwd(params, f"dec{i}.self", cfg, h1, h1, self_allowed, None)
        y = y + a
        h2, c_ln2 = _ln_fwd(y, params[f"dec{i}.ln2.g"], params[f"dec{i}.ln2.b"])
        c, c_cross = _mha_fwd(params, f"dec{i}.cross", cfg, h2, enc_states,
                              cross_allowed, None)
        y = y + c
        h3, c_ln3 = _ln_fwd(y, params[f"dec{i}.ln3.g"], params[f"dec{i}.ln3.b"])
        f, c_ffn = _ffn_fwd(params, f"dec{i}.ffn", h3)
        y = y + f
        if keep_cache:
            layers.append((c_ln1, c_self, c_ln2, c_cross, c_ln3, c_ffn))
    out, c_final = _ln_fwd(y, params["dec_ln.g"], params["dec_ln.b"])
    logits = _linear_fwd(out, params["out_w"], params["out_b"])
    cache = (layers, c_final, out) if keep_cache else None
    return logits, cache


def decoder_backward(dlogits, cache, params, cfg: ModelConfig, dec_in, enc_states, grads):
    layers, c_final, ln_out = cache
    dy = _linear_bwd(ln_out, params["out_w"], dlogits, grads, "out_w", "out_b")
    dy = _ln_bwd(dy, c_final, grads, "dec_ln.g", "dec_ln.b")
    d_enc = np.zeros_like(enc_states)
    for i in reversed(range(cfg.n_dec_layers)):
        c_ln1, c_self, c_ln2, c_cross, c_ln3, c_ffn = layers[i]
        dh3 = _ffn_bwd(dy, c_ffn, params, f"dec{i}.ffn", grads)
        dy = dy + _ln_bwd(dh3, c_ln3, grads, f"dec{i}.ln3.g", f"dec{i}.ln3.b")
        dq_in, dkv, _ = _mha_bwd(dy, c_cross, params, f"dec{i}.cross", cfg, grads)
        d_enc += dkv
        dy = dy + _ln_bwd(dq_in, c_ln2, grads, f"dec{i}.ln2.g", f"dec{i}.ln2.b")
        dq_in, dkv_in, _ = _mha_bwd(dy, c_self, params, f"dec{i}.self", cfg, grads)
        dy = dy + _ln_bwd(dq_in + dkv_in, c_ln1, grads, f"dec{i}.ln1.g", f"dec{i}.ln1.b")
    np.add.at(grads["tok_emb"], dec_in, dy)
    np.add.at(grads["dec_pos_emb"], np.arange(dec_in.shape[1]), dy.sum(axis=0))
    return d_enc


def _softmax_ce(logits, target, pad_id):
    # mean token cross-entropy over non-pad targets
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    weights = (target != pad_id).astype(logits.dtype)
    denom = max(float(weights.sum()), 1.0)
    picked = np.take_along_axis(logp, target[..., None].astype(np.intp), axis=-1)[..., 0]
    loss = -(picked * weights).sum() / denom
    dlogits = np.exp(logp)
    rows = np.arange(target.shape[0])[:, None]
    cols = np.arange(target.shape[1])[None, :]
    dlogits[rows, cols, target] -= 1.0
    dlogits *= (weights / denom)[..., None]
    return float(loss), dlogits


def loss_and_grads(params, cfg: ModelConfig, batch: Batch, pad_id: int,
                   instrument: list | None = None):
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    enc_states, enc_cache = encoder_forward(params, cfg, batch, keep_cache=True)
    cross_allowed = batch.enc_real[:, None, None, :]
    logits, dec_cache = decoder_forward(params, cfg, batch.dec_in, enc_states,
                                        cross_allowed, batch.causal, keep_cache=True)
    loss, dlogits = _softmax_ce(logits, batch.target, pad_id)
    d_enc = decoder_backward(dlogits, dec_cache, params, cfg, batch.dec_in,
                             enc_states, grads)
    encoder_backward(d_enc, enc_cache, params, cfg, batch, grads, instrument)
    return loss, grads


def encode(params, cfg: ModelConfig, ex: QAExample, vocab: Vocabulary | None = None) -> np.ndarray:
    """Final encoder states for one example, shape (L, d_model)."""
    vocab = vocab or default_vocab()
    prepared = prepare_example(ex, cfg, vocab)
    batch = collate([prepared], vocab.pad, with_rel=cfg.factor.bias == "B1")
    states, _ = encoder_forward(params, cfg, batch, keep_cache=False)
    return states[0]


# ---------------------------------------------------------------------------
# optimizer and training loop
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict, lr: float):
        self.lr = lr
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1t = 1.0 - _ADAM_B1 ** self.t
        b2t = 1.0 - _ADAM_B2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= _ADAM_B1
            m += (1 - _ADAM_B1) * g
            v *= _ADAM_B2
            v += (1 - _ADAM_B2) * (g * g)
            params[k] -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + _ADAM_EPS)


@dataclass
class TrainResult:
    params: dict
    config: ModelConfig
    trace: list[dict]
    best_step: int
    best_eval_da: float
    steps_run: int
    final_loss: float


def _batched(prepared: list[Prepared], order, batch_size: int, pad_id: int, with_rel: bool):
    for i in range(0, len(order), batch_size):
        chunk = [prepared[j] for j in order[i:i + batch_size]]
        yield collate(chunk, pad_id, with_rel)


def predict_prepared(params, cfg: ModelConfig, prepared: list[Prepared],
                     vocab: Vocabulary, batch_size: int = 64) -> list[list[str]]:
    """Greedy decoding; returns the decoded value list per example."""
    out: list[list[str]] = []
    with_rel = cfg.factor.bias == "B1"
    for i in range(0, len(prepared), batch_size):
        chunk = prepared[i:i + batch_size]
        batch = collate(chunk, vocab.pad, with_rel)
        enc_states, _ = encoder_forward(params, cfg, batch, keep_cache=False)
        cross_allowed = batch.enc_real[:, None, None, :]
        b = len(chunk)
        ys = np.full((b, 1), vocab.bos, dtype=np.int32)
        done = np.zeros(b, dtype=bool)
        for _ in range(cfg.max_answer_len):
            causal = np.tril(np.ones((ys.shape[1], ys.shape[1]), dtype=bool))
            logits, _ = decoder_forward(params, cfg, ys, enc_states, cross_allowed,
                                        causal, keep_cache=False)
            nxt = logits[:, -1].argmax(axis=-1).astype(np.int32)
            nxt[done] = vocab.pad
            ys = np.concatenate([ys, nxt[:, None]], axis=1)
            done |= nxt == vocab.eos
            if done.all():
                break
        out.extend(tokens_to_values(row[1:], vocab) for row in ys)
    return out


def predict(params, cfg: ModelConfig, examples: list[QAExample],
            vocab: Vocabulary | None = None, batch_size: int = 64) -> list[list[str]]:
    vocab = vocab or default_vocab()
    prepared = [prepare_example(ex, cfg, vocab) for ex in examples]
    return predict_prepared(params, cfg, prepared, vocab, batch_size)


def _da(params, cfg, prepared, vocab) -> float:
    preds = predict_prepared(params, cfg, prepared, vocab)
    hits = sum(denotation_match(p, it.answer) for p, it in zip(preds, prepared))
    return hits / len(prepared) if prepared else 0.0


def train(examples: list[QAExample], cfg: ModelConfig, seed: int,
          stop_da: float | None = None, log=None) -> TrainResult:
    """Train on the examples; early-stops on held-out denotation accuracy.

    stop_da, when set, ends training as soon as an evaluation reaches the
    threshold (used by smoke tests). All randomness flows from the seed, so
    two runs produce identical parameters and traces.
    """
    if not examples:
        raise ValidationError("empty training set")
    vocab = default_vocab()
    prepared = [prepare_example(ex, cfg, vocab) for ex in examples]
    with_rel = cfg.factor.bias == "B1"

    split_rng = derive_rng(seed, "split", 0)
    order = split_rng.permutation(len(prepared))
    n_eval = int(round(cfg.eval_fraction * len(prepared)))
    n_eval = min(n_eval, cfg.eval_max)
    if n_eval > 0 and len(prepared) - n_eval >= 1:
        eval_set = [prepared[i] for i in order[:n_eval]]
        train_set = [prepared[i] for i in order[n_eval:]]
    else:
        # tiny datasets: evaluate on the training data itself
        eval_set = [prepared[i] for i in order[: cfg.eval_max]]
        train_set = list(prepared)

    params = init_params(cfg, vocab.size, derive_rng(seed, "init", 0))
    opt = Adam(params, cfg.learning_rate)
    shuffle_rng = derive_rng(seed, "shuffle", 0)

    trace: list[dict] = []
    best_da = -1.0
    best_step = 0
    best_params = {k: v.copy() for k, v in params.items()}
    evals_since_best = 0
    loss = float("nan")
    step = 0
    stop = False

    while step < cfg.steps and not stop:
        epoch_order = shuffle_rng.permutation(len(train_set))
        for batch in _batched(train_set, epoch_order, cfg.batch_size, vocab.pad, with_rel):
            loss, grads = loss_and_grads(params, cfg, batch, vocab.pad)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} at step {step}")
            opt.step(params, grads)
            step += 1

            if step % cfg.eval_every == 0 or step == cfg.steps:
                da = _da(params, cfg, eval_set, vocab)
                trace.append({"step": step, "loss": round(loss, 6), "eval_da": round(da, 6)})
                if log:
                    log(f"step {step} loss {loss:.4f} eval_da {da:.4f}")
                if da > best_da:
                    best_da = da
                    best_step = step
                    best_params = {k: v.copy() for k, v in params.items()}
                    evals_since_best = 0
                else:
                    evals_since_best += 1
                if stop_da is not None and da >= stop_da:
                    stop = True
                    break
                if evals_since_best >= cfg.patience:
                    stop = True
                    break
            if step >= cfg.steps:
                break

    return TrainResult(
        params=best_params, config=cfg, trace=trace,
        best_step=best_step, best_eval_da=best_da,
        steps_run=step, final_loss=loss,
    )


def evaluate_da(params, cfg: ModelConfig, examples: list[QAExample],
                vocab: Vocabulary | None = None, set_semantics: bool = False) -> float:
    vocab = vocab or default_vocab()
    preds = predict(params, cfg, examples, vocab)
    hits = sum(
        denotation_match(p, ex.answer, set_semantics) for p, ex in zip(preds, examples)
    )
    return hits / len(examples)


# ---------------------------------------------------------------------------
# checkpoints: magic, version, json header, then named float32 tensors
# ---------------------------------------------------------------------------

_MAGIC = b"TBNC"
_CKPT_VERSION = 1


def save_checkpoint(path, params: dict, cfg: ModelConfig, vocab_size: int) -> None:
    names = sorted(params.keys())
    header = {
        "format_version": _CKPT_VERSION,
        "config": cfg.to_json(),
        "vocab_size": vocab_size,
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[dict, ModelConfig, int]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValidationError(f"{path}: not a checkpoint (magic {magic!r})")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ValidationError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        params = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 4)
            if len(buf) != count * 4:
                raise ValidationError(f"{path}: truncated tensor {spec['name']}")
            params[spec["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    cfg = ModelConfig.from_json(header["config"])
    return params, cfg, int(header["vocab_size"])
