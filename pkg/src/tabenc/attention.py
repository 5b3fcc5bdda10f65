"""Masked, biased softmax attention: dense reference and a block-sparse kernel.

The dense path materializes the full logit matrix; masked positions are
excluded from the reduction (their weight is exactly 0.0, never a large
negative constant pushed through exp). The block-sparse path consumes the
rectangle tiling produced by mask.export_blocks and runs a two-pass streaming
softmax (max+sum pass, then weighted accumulation), so its working memory is
O(L*d + largest block) instead of O(L^2).

Both paths compute in the dtype of their inputs (float32 by default;
float64 is used by the finite-difference tests). Backward passes are
analytic; gradients at masked pairs are exactly zero by construction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .core import STRUCTURAL_MASKS, Table, ValidationError, derive_rng
from .linearize import EncodedInput, linearize
from .mask import AttentionMask, build_mask

# chunk query rows above this length so the dense path never holds more than
# a few hundred MB of logits at once (numerics are unchanged: rows are
# independent)
_DENSE_CHUNK = 2048
_CHUNK_THRESHOLD = 4096


def _as_float(x, name: str) -> np.ndarray:
    arr = np.asarray(x)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def _dense_of(mask) -> np.ndarray | None:
    if mask is None:
        return None
    if isinstance(mask, AttentionMask):
        return mask.dense
    return np.asarray(mask, dtype=bool)


@dataclass
class AttentionInput:
    """Single-head attention operands; multi-head is composition by the caller."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    mask: AttentionMask | np.ndarray | None = None
    bias_values: np.ndarray | None = None
    scale: float | None = None

    def __post_init__(self) -> None:
        self.q = _as_float(self.q, "q")
        self.k = _as_float(self.k, "k")
        self.v = _as_float(self.v, "v")
        if self.q.ndim != 2 or self.k.shape != self.q.shape or self.v.shape != self.q.shape:
            raise ValidationError("q, k, v must share one (L, d) shape")
        L = self.q.shape[0]
        allowed = _dense_of(self.mask)
        if allowed is not None:
            if allowed.shape != (L, L):
                raise ValidationError("mask shape must be (L, L)")
            if not allowed.any(axis=1).all():
                raise ValidationError("every query row needs at least one allowed key")
        if self.bias_values is not None:
            bias = np.asarray(self.bias_values)
            if bias.shape != (L, L):
                raise ValidationError("bias shape must be (L, L)")
            check = bias if allowed is None else bias[allowed]
            if not np.isfinite(check).all():
                raise ValidationError("bias must be finite wherever the mask allows")
        if self.scale is None:
            self.scale = 1.0 / float(np.sqrt(self.q.shape[1]))

    @property
    def allowed(self) -> np.ndarray | None:
        return _dense_of(self.mask)


@dataclass
class AttentionOutput:
    out: np.ndarray
    weights: np.ndarray | None = None


@dataclass
class AttentionGrads:
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray
    dbias: np.ndarray | None = None
    dbias_class: np.ndarray | None = None


# ---------------------------------------------------------------------------
# dense path (batched core shared with the model; leading dims broadcast)
# ---------------------------------------------------------------------------

def dense_forward(q, k, v, allowed=None, bias=None, scale=None, return_weights=False):
    """Masked softmax(q k^T * scale + bias) v with arbitrary leading batch dims.

    allowed and bias broadcast against the (..., Lq, Lk) logit shape. Rows of
    `allowed` must each keep at least one key.
    """
    if scale is None:
        scale = 1.0 / float(np.sqrt(q.shape[-1]))
    if q.ndim == 2 and q.shape[0] > _CHUNK_THRESHOLD and not return_weights:
        return _dense_forward_chunked(q, k, v, allowed, bias, scale)
    logits = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    if bias is not None:
        logits = logits + bias
    if allowed is not None:
        logits = np.where(allowed, logits, -np.inf)
    m = np.max(logits, axis=-1, keepdims=True)
    w = np.exp(logits - m)
    s = np.sum(w, axis=-1, keepdims=True)
    p = w / s
    out = np.matmul(p, v)
    return (out, p) if return_weights else (out, None)


def _dense_forward_chunked(q, k, v, allowed, bias, scale):
    L, d = q.shape
    out = np.empty((L, v.shape[-1]), dtype=q.dtype)
    for r0 in range(0, L, _DENSE_CHUNK):
        r1 = min(r0 + _DENSE_CHUNK, L)
        a = allowed[r0:r1] if allowed is not None else None
        b = bias[r0:r1] if bias is not None else None
        out[r0:r1], _ = dense_forward(q[r0:r1], k, v, a, b, scale)
    return out, None


def dense_backward(q, k, v, d_out, allowed=None, bias=None, scale=None, weights=None):
    """Analytic backward of dense_forward; returns (dq, dk, dv, dbias).

    dbias has the logit shape and is exactly zero at masked pairs (the
    softmax weight there is exactly zero). Pass `weights` to reuse a saved
    forward; otherwise the forward is recomputed.
    """
    if scale is None:
        scale = 1.0 / float(np.sqrt(q.shape[-1]))
    if weights is None:
        if q.ndim == 2 and q.shape[0] > _CHUNK_THRESHOLD:
            return _dense_backward_chunked(q, k, v, d_out, allowed, bias, scale)
        _, weights = dense_forward(q, k, v, allowed, bias, scale, return_weights=True)
    p = weights
    dv = np.matmul(np.swapaxes(p, -1, -2), d_out)
    dp = np.matmul(d_out, np.swapaxes(v, -1, -2))
    rowdot = np.sum(p * dp, axis=-1, keepdims=True)
    ds = p * (dp - rowdot)
    dq = np.matmul(ds, k) * scale
    dk = np.matmul(np.swapaxes(ds, -1, -2), q) * scale
    return dq, dk, dv, ds


def _dense_backward_chunked(q, k, v, d_out, allowed, bias, scale):
    L = q.shape[0]
    dq = np.empty_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for r0 in range(0, L, _DENSE_CHUNK):
        r1 = min(r0 + _DENSE_CHUNK, L)
        a = allowed[r0:r1] if allowed is not None else None
        b = bias[r0:r1] if bias is not None else None
        cdq, cdk, cdv, _ = dense_backward(q[r0:r1], k, v, d_out[r0:r1], a, b, scale)
        dq[r0:r1] = cdq
        dk += cdk
        dv += cdv
    return dq, dk, dv, None


# ---------------------------------------------------------------------------
# block-sparse path
# ---------------------------------------------------------------------------

def plan_blocks(blocks, length: int):
    """Merge rectangles that share a query range into one gather plan.

    Returns [(q0, q1, key_indices)] sorted by q0. Key indices within one plan
    entry are unique because the tiling is disjoint.
    """
    by_qrange: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for q0, q1, k0, k1 in blocks:
        if not (0 <= q0 < q1 <= length and 0 <= k0 < k1 <= length):
            raise ValidationError(f"block ({q0},{q1},{k0},{k1}) out of range for L={length}")
        by_qrange.setdefault((q0, q1), []).append((k0, k1))
    plan = []
    for (q0, q1), ranges in sorted(by_qrange.items()):
        ranges.sort()
        idx = np.concatenate([np.arange(k0, k1, dtype=np.intp) for k0, k1 in ranges])
        plan.append((q0, q1, idx))
    return plan


def _stream_stats(q, k, bias, scale, plan, length, dtype):
    """Pass 1: per-row running max and rescaled exp-sum over all blocks."""
    m = np.full(length, -np.inf, dtype=dtype)
    s = np.zeros(length, dtype=dtype)
    for q0, q1, idx in plan:
        logits = np.matmul(q[q0:q1], k[idx].T) * scale
        if bias is not None:
            logits += bias[q0:q1][:, idx]
        local_max = logits.max(axis=1)
        new_max = np.maximum(m[q0:q1], local_max)
        s[q0:q1] = s[q0:q1] * np.exp(m[q0:q1] - new_max) + np.exp(
            logits - new_max[:, None]
        ).sum(axis=1)
        m[q0:q1] = new_max
    if not (s > 0).all():
        raise ValidationError("blocks leave at least one query row uncovered")
    return m, s


def block_sparse_forward(q, k, v, blocks, bias=None, scale=None):
    """Two-pass streaming attention restricted to the given rectangles."""
    if scale is None:
        scale = 1.0 / float(np.sqrt(q.shape[-1]))
    L = q.shape[0]
    plan = plan_blocks(blocks, L)
    m, s = _stream_stats(q, k, bias, scale, plan, L, q.dtype)
    out = np.zeros((L, v.shape[-1]), dtype=q.dtype)
    for q0, q1, idx in plan:
        logits = np.matmul(q[q0:q1], k[idx].T) * scale
        if bias is not None:
            logits += bias[q0:q1][:, idx]
        p = np.exp(logits - m[q0:q1, None])
        out[q0:q1] += np.matmul(p, v[idx])
    out /= s[:, None]
    return out


def block_sparse_backward(q, k, v, blocks, d_out, bias=None, scale=None,
                          rel=None, n_classes=None):
    """Analytic backward with the same streaming structure (three block passes).

    When `rel` (a per-pair relation-class map) is given, the bias gradient is
    reduced to one scalar per class; pairs outside the blocks contribute
    exactly zero because they are never touched.
    """
    if scale is None:
        scale = 1.0 / float(np.sqrt(q.shape[-1]))
    L = q.shape[0]
    plan = plan_blocks(blocks, L)
    m, s = _stream_stats(q, k, bias, scale, plan, L, q.dtype)

    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    rowdot = np.zeros(L, dtype=q.dtype)
    dbias_class = None
    if rel is not None:
        if n_classes is None:
            n_classes = int(rel.max()) + 1
        dbias_class = np.zeros(n_classes, dtype=np.float64)

    def probs(q0, q1, idx):
        logits = np.matmul(q[q0:q1], k[idx].T) * scale
        if bias is not None:
            logits += bias[q0:q1][:, idx]
        return np.exp(logits - m[q0:q1, None]) / s[q0:q1, None]

    # pass 2: row-wise <p, dp> plus dv
    for q0, q1, idx in plan:
        p = probs(q0, q1, idx)
        dp = np.matmul(d_out[q0:q1], v[idx].T)
        rowdot[q0:q1] += np.sum(p * dp, axis=1)
        dv[idx] += np.matmul(p.T, d_out[q0:q1])

    # pass 3: ds-dependent grads
    for q0, q1, idx in plan:
        p = probs(q0, q1, idx)
        dp = np.matmul(d_out[q0:q1], v[idx].T)
        ds = p * (dp - rowdot[q0:q1, None])
        dq[q0:q1] += np.matmul(ds, k[idx]) * scale
        dk[idx] += np.matmul(ds.T, q[q0:q1]) * scale
        if dbias_class is not None:
            classes = rel[q0:q1][:, idx].ravel()
            dbias_class += np.bincount(
                classes, weights=ds.ravel().astype(np.float64), minlength=n_classes
            )
    return dq, dk, dv, dbias_class


# ---------------------------------------------------------------------------
# named single-head operations
# ---------------------------------------------------------------------------

def attn_dense(inp: AttentionInput, return_weights: bool = False) -> AttentionOutput:
    out, p = dense_forward(
        inp.q, inp.k, inp.v, inp.allowed, inp.bias_values, inp.scale,
        return_weights=return_weights,
    )
    return AttentionOutput(out=out, weights=p)


def attn_block_sparse(inp: AttentionInput, blocks=None) -> AttentionOutput:
    if blocks is None:
        if not isinstance(inp.mask, AttentionMask) or inp.mask.blocks is None:
            raise ValidationError("attn_block_sparse needs rectangle blocks")
        blocks = inp.mask.blocks
    out = block_sparse_forward(inp.q, inp.k, inp.v, blocks, inp.bias_values, inp.scale)
    return AttentionOutput(out=out)


def attn_backward(
    inp: AttentionInput,
    d_out: np.ndarray,
    blocks=None,
    rel_map=None,
) -> AttentionGrads:
    """Gradients of sum(out * d_out) w.r.t. q, k, v and the bias matrix.

    With `blocks` the streaming kernel is used; with `rel_map` (see
    mask.build_bias_map) per-class bias scalar gradients are returned as well.
    """
    d_out = np.asarray(d_out, dtype=inp.q.dtype)
    if d_out.shape != inp.q.shape:
        raise ValidationError("d_out must match the output shape")
    rel = rel_map.rel if hasattr(rel_map, "rel") else rel_map
    if blocks is not None:
        n_classes = rel_map.n_classes if hasattr(rel_map, "n_classes") else None
        dq, dk, dv, dclass = block_sparse_backward(
            inp.q, inp.k, inp.v, blocks, d_out, inp.bias_values, inp.scale,
            rel=rel, n_classes=n_classes,
        )
        return AttentionGrads(dq=dq, dk=dk, dv=dv, dbias=None, dbias_class=dclass)
    dq, dk, dv, dbias = dense_backward(
        inp.q, inp.k, inp.v, d_out, inp.allowed, inp.bias_values, inp.scale
    )
    dclass = None
    if rel is not None and dbias is not None:
        n = rel_map.n_classes if hasattr(rel_map, "n_classes") else int(rel.max()) + 1
        dclass = np.bincount(
            rel.ravel(), weights=dbias.ravel().astype(np.float64), minlength=n
        )
    return AttentionGrads(dq=dq, dk=dk, dv=dv, dbias=dbias, dbias_class=dclass)


# ---------------------------------------------------------------------------
# wall-time benchmark
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchRow:
    length: int
    scheme: str
    direction: str
    dense_ms: float
    sparse_ms: float

    @property
    def speedup(self) -> float:
        return self.dense_ms / self.sparse_ms if self.sparse_ms > 0 else float("inf")


def make_bench_encoding(
    target_len: int,
    tokens_scheme: str = "T0",
    n_cols: int = 8,
    cell_digits: int = 2,
    question: str = "select c1",
    seed: int = 0,
) -> EncodedInput:
    """Synthetic table whose encoding lands as close to target_len as possible."""
    if tokens_scheme not in ("T0", "T2"):
        raise ValidationError("bench tables use T0 or T2 (T1 caps the row count)")
    rng = derive_rng(seed, "bench-table", target_len)
    probe = linearize(
        question,
        Table(tuple(f"c{i+1}" for i in range(n_cols)), (tuple("1" * cell_digits for _ in range(n_cols)),)),
        tokens_scheme,
    )
    one_row = len(probe)
    probe0 = len(
        linearize(question, Table(tuple(f"c{i+1}" for i in range(n_cols)),
                                  (tuple("1" * cell_digits for _ in range(n_cols)),) * 2), tokens_scheme)
    )
    per_row = probe0 - one_row
    fixed = one_row - per_row
    n_rows = max(1, round((target_len - fixed) / per_row))
    lo = 10 ** (cell_digits - 1)
    hi = 10 ** cell_digits
    cells = rng.integers(lo, hi, size=(n_rows, n_cols))
    table = Table(
        tuple(f"c{i+1}" for i in range(n_cols)),
        tuple(tuple(str(int(x)) for x in row) for row in cells),
    )
    return linearize(question, table, tokens_scheme)


def _time_median(fn, trials: int) -> float:
    """Median wall seconds per call; short calls are batched so that timer
    quantization stays below 1% of each measurement."""
    fn()  # warmup
    start = time.perf_counter()
    fn()
    once = time.perf_counter() - start
    reps = max(1, int(1e-3 / max(once, 1e-9)))
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        for _ in range(reps):
            fn()
        times.append((time.perf_counter() - t0) / reps)
    return float(np.median(times))


def bench_attention(
    lengths,
    scheme: str = "M3",
    trials: int = 7,
    head_dim: int = 16,
    seed: int = 0,
    include_backward: bool = False,
) -> list[BenchRow]:
    """Wall-time dense vs block-sparse at each target length (medians over trials)."""
    rows: list[BenchRow] = []
    tokens_scheme = "T2" if scheme in STRUCTURAL_MASKS else "T0"
    for target in lengths:
        enc = make_bench_encoding(int(target), tokens_scheme, seed=seed)
        m = build_mask(enc, scheme)
        L = len(enc)
        rng = derive_rng(seed, "bench-qkv", L)
        q, k, v = (rng.standard_normal((L, head_dim)).astype(np.float32) for _ in range(3))
        scale = 1.0 / float(np.sqrt(head_dim))
        blocks = m.blocks

        dense_fwd = _time_median(lambda: dense_forward(q, k, v, m.dense, None, scale), trials)
        sparse_fwd = _time_median(lambda: block_sparse_forward(q, k, v, blocks, None, scale), trials)
        rows.append(BenchRow(L, scheme, "forward", dense_fwd * 1e3, sparse_fwd * 1e3))

        if include_backward:
            d_out = rng.standard_normal((L, head_dim)).astype(np.float32)
            dense_bwd = _time_median(
                lambda: dense_backward(q, k, v, d_out, m.dense, None, scale), trials
            )
            sparse_bwd = _time_median(
                lambda: block_sparse_backward(q, k, v, blocks, d_out, None, scale), trials
            )
            rows.append(BenchRow(L, scheme, "backward", dense_bwd * 1e3, sparse_bwd * 1e3))
    return rows
