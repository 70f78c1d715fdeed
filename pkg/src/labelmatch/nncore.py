"""Layer primitives with explicit forward and backward passes.

Each forward returns (output, cache); the matching backward consumes the
cache, accumulates parameter gradients into ParamTensor.grad, and returns
the gradient w.r.t. its input. Nothing here allocates optimizer state or
touches global state, so batch gradients are exact sums of per-example
contributions in whatever order the caller runs them.

Arrays keep the dtype of the parameters they are built from: float32 for
training, float64 when a model is built for gradient checking.

Padding discipline: masked positions never enter any arithmetic. Attention
gathers the valid rows before computing (equivalent to setting masked key
columns to -inf before the row softmax, since those keys would get exactly
zero weight), and pooling sums gathered rows only. Appending pad positions
therefore cannot perturb valid outputs even at the last bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corpus import TokenSeq
from .errors import DataError


class ParamTensor:
    """A trainable array with its gradient and Adam moment buffers."""

    __slots__ = ("name", "value", "grad", "adam_m", "adam_v")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.adam_m = np.zeros_like(value)
        self.adam_v = np.zeros_like(value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:
        return f"ParamTensor({self.name!r}, shape={self.value.shape})"


@dataclass(frozen=True)
class GradCheckReport:
    op_name: str
    max_rel_err: float
    worst_index: int  # flat index into the concatenated parameter vector


# --- embedding ----------------------------------------------------------------

@dataclass
class EmbedCache:
    ids: np.ndarray
    emb: ParamTensor
    pos: ParamTensor


def embed_forward(seq: TokenSeq, emb: ParamTensor, pos: ParamTensor):
    """Row i of the output is emb[ids[i]] + pos[i].

    Accepts sequences no longer than the position table; the encoder feeds
    it the valid prefix of each TokenSeq.
    """
    vocab_size = emb.value.shape[0]
    if int(seq.ids.max()) >= vocab_size:
        raise DataError(f"token id {int(seq.ids.max())} out of range for V={vocab_size}")
    n = len(seq.ids)
    if n > pos.value.shape[0]:
        raise DataError(f"sequence length {n} exceeds position table {pos.value.shape[0]}")
    out = emb.value[seq.ids] + pos.value[:n]
    return out, EmbedCache(ids=seq.ids, emb=emb, pos=pos)


def embed_backward(d_out: np.ndarray, cache: EmbedCache) -> None:
    # duplicate ids accumulate, in position order
    np.add.at(cache.emb.grad, cache.ids, d_out)
    cache.pos.grad[: d_out.shape[0]] += d_out


# --- attention ------------------------------------------------------------------

@dataclass
class AttnCache:
    mask: np.ndarray
    xv: np.ndarray       # valid rows of the input
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    weights: np.ndarray  # row softmax over valid keys
    scale: float
    wq: ParamTensor
    wk: ParamTensor
    wv: ParamTensor


def attention_forward(x: np.ndarray, mask: np.ndarray,
                      wq: ParamTensor, wk: ParamTensor, wv: ParamTensor):
    """Single-head scaled dot-product attention over the unmasked positions.

    Output rows at masked positions are zero; they carry no information and
    must be excluded from pooling downstream.
    """
    if not mask.any():
        raise DataError("attention over a fully masked sequence")
    d = x.shape[1]
    scale = 1.0 / math.sqrt(d)
    xv = x[mask]
    q = xv @ wq.value
    k = xv @ wk.value
    v = xv @ wv.value
    scores = (q @ k.T) * scale
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    weights = e / e.sum(axis=1, keepdims=True)
    out = np.zeros_like(x)
    out[mask] = weights @ v
    return out, AttnCache(mask=mask, xv=xv, q=q, k=k, v=v, weights=weights,
                          scale=scale, wq=wq, wk=wk, wv=wv)


def attention_backward(d_out: np.ndarray, cache: AttnCache) -> np.ndarray:
    d_ov = d_out[cache.mask]
    w = cache.weights
    d_v = w.T @ d_ov
    d_w = d_ov @ cache.v.T
    d_scores = w * (d_w - (d_w * w).sum(axis=1, keepdims=True))
    d_scores *= cache.scale
    d_q = d_scores @ cache.k
    d_k = d_scores.T @ cache.q
    cache.wq.grad += cache.xv.T @ d_q
    cache.wk.grad += cache.xv.T @ d_k
    cache.wv.grad += cache.xv.T @ d_v
    d_xv = d_q @ cache.wq.value.T + d_k @ cache.wk.value.T + d_v @ cache.wv.value.T
    d_x = np.zeros((cache.mask.shape[0], d_xv.shape[1]), dtype=d_xv.dtype)
    d_x[cache.mask] = d_xv
    return d_x


# --- position-wise feed-forward ----------------------------------------------

@dataclass
class FfnCache:
    x: np.ndarray
    pre: np.ndarray      # x @ w1 + b1
    hidden: np.ndarray   # relu(pre)
    w1: ParamTensor
    b1: ParamTensor
    w2: ParamTensor
    b2: ParamTensor


def ffn_forward(x: np.ndarray, w1: ParamTensor, b1: ParamTensor,
                w2: ParamTensor, b2: ParamTensor):
    """relu(x @ w1 + b1) @ w2 + b2, applied row-wise."""
    pre = x @ w1.value + b1.value
    hidden = np.maximum(pre, 0)
    out = hidden @ w2.value + b2.value
    return out, FfnCache(x=x, pre=pre, hidden=hidden, w1=w1, b1=b1, w2=w2, b2=b2)


def ffn_backward(d_out: np.ndarray, cache: FfnCache) -> np.ndarray:
    cache.w2.grad += cache.hidden.T @ d_out
    cache.b2.grad += d_out.sum(axis=0)
    d_hidden = d_out @ cache.w2.value.T
    d_pre = d_hidden * (cache.pre > 0)  # relu'(0) taken as 0
    cache.w1.grad += cache.x.T @ d_pre
    cache.b1.grad += d_pre.sum(axis=0)
    return d_pre @ cache.w1.value.T


# --- masked mean pooling --------------------------------------------------------

def mean_pool_masked(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if not mask.any():
        raise DataError("mean pool over a fully masked sequence")
    return x[mask].sum(axis=0) / mask.sum()


def mean_pool_backward(d_vec: np.ndarray, mask: np.ndarray) -> np.ndarray:
    d_x = np.zeros((mask.shape[0], d_vec.shape[0]), dtype=d_vec.dtype)
    d_x[mask] = d_vec / mask.sum()
    return d_x


# --- classifier-side scalar ops --------------------------------------------------

def softmax(z: np.ndarray) -> np.ndarray:
    """Shift-by-max softmax; -inf entries map to exactly 0."""
    if z.shape[0] < 2:
        raise DataError("softmax needs at least two entries")
    m = z.max()
    if m == -np.inf:
        raise DataError("softmax over all -inf entries")
    e = np.exp(z - m)
    return e / e.sum()


def cross_entropy(logits: np.ndarray, target: int):
    """Returns (loss, d_loss/d_logits) for loss = -log softmax(logits)[target]."""
    k = logits.shape[0]
    if not 0 <= target < k:
        raise DataError(f"target {target} out of range for {k} classes")
    shifted = logits - logits.max()
    log_z = math.log(np.exp(shifted).sum())
    loss = log_z - float(shifted[target])
    grad = np.exp(shifted - log_z)
    grad[target] -= 1
    return loss, grad


# --- finite differences ------------------------------------------------------------

def finite_diff_check(op_name: str, f, params: list[ParamTensor],
                      eps: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central differences of f.

    f() must be a deterministic float64 scalar function of the current
    parameter values; the analytic gradient must already sit in each
    param.grad. Every coordinate is perturbed by +-eps in place and
    restored. Relative error per coordinate uses the denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-6, 1e-3]")
    base = float(f())
    if not math.isfinite(base):
        raise ValueError(f"{op_name}: non-finite objective")
    max_rel = 0.0
    worst = -1
    offset = 0
    for p in params:
        flat = p.value.reshape(-1)
        grad = p.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f())
            flat[i] = orig - eps
            f_minus = float(f())
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise ValueError(f"{op_name}: non-finite objective under perturbation")
            numeric = (f_plus - f_minus) / (2 * eps)
            rel = abs(float(grad[i]) - numeric) / max(abs(float(grad[i])), abs(numeric), 1e-8)
            if rel > max_rel:
                max_rel = rel
                worst = offset + i
        offset += flat.size
    return GradCheckReport(op_name=op_name, max_rel_err=max_rel, worst_index=worst)
