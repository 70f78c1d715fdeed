"""Scoring heads turning a sentence vector into K class logits.

Three modes:

* "none": plain linear classifier, logits = W t + b; label embeddings are
  never consulted.
* "add": label embedding added to the sentence vector, passed through a
  relu, and scored by a shared vector: logits[k] = w . relu(t + L[k]) + b[k].
  The relu is what lets class differences depend on the text; without it
  every logit would shift by the same w . t and the softmax would collapse
  to a text-independent distribution.
* "dot": temperature-scaled matching score, logits[k] = exp(s) * (t . L[k]),
  with a learnable log inverse-temperature s; exp(s) is clamped to at
  most 100.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nncore import ParamTensor

FUSION_MODES = ("none", "add", "dot")
MAX_DOT_SCALE = 100.0


@dataclass
class FusionHead:
    """Parameters of one scoring head; only its own mode's fields exist."""

    mode: str
    w_out: ParamTensor | None = None   # none: K x d
    b_out: ParamTensor | None = None   # none/add: K
    w_mix: ParamTensor | None = None   # add: d
    log_scale: ParamTensor | None = None  # dot: shape (1,)

    def all(self) -> list[ParamTensor]:
        if self.mode == "none":
            return [self.w_out, self.b_out]
        if self.mode == "add":
            return [self.w_mix, self.b_out]
        return [self.log_scale]


@dataclass
class FusionCache:
    mode: str
    head: FusionHead
    t: np.ndarray
    labels: np.ndarray | None = None
    fused: np.ndarray | None = None    # add: t + L, pre-relu
    scale: float = 0.0                 # dot: clamped exp(s)
    scale_clamped: bool = False


def _require(head: FusionHead, mode: str, t: np.ndarray,
             labels: np.ndarray | None) -> None:
    if head.mode != mode:
        raise ValueError(f"head is {head.mode!r}, not {mode!r}")
    if labels is not None:
        if labels.shape[1] != t.shape[0]:
            raise ValueError(f"label matrix dim {labels.shape[1]} vs sentence dim {t.shape[0]}")
        if head.mode == "add" and labels.shape[0] != head.b_out.value.shape[0]:
            raise ValueError(f"label matrix has {labels.shape[0]} rows, head expects "
                             f"{head.b_out.value.shape[0]}")


def score_baseline(t: np.ndarray, head: FusionHead) -> np.ndarray:
    _require(head, "none", t, None)
    return head.w_out.value @ t + head.b_out.value


def score_add(t: np.ndarray, labels: np.ndarray, head: FusionHead) -> np.ndarray:
    _require(head, "add", t, labels)
    return np.maximum(t + labels, 0) @ head.w_mix.value + head.b_out.value


def score_dot(t: np.ndarray, labels: np.ndarray, head: FusionHead) -> np.ndarray:
    _require(head, "dot", t, labels)
    scale = min(float(np.exp(head.log_scale.value[0])), MAX_DOT_SCALE)
    return scale * (labels @ t)


def score_forward(t: np.ndarray, labels: np.ndarray | None, head: FusionHead):
    """Dispatch on head.mode; returns (logits, cache) for the backward pass."""
    if head.mode == "none":
        return score_baseline(t, head), FusionCache(mode="none", head=head, t=t)
    if labels is None:
        raise ValueError(f"{head.mode!r} fusion needs a label matrix")
    if head.mode == "add":
        _require(head, "add", t, labels)
        fused = t + labels
        logits = np.maximum(fused, 0) @ head.w_mix.value + head.b_out.value
        return logits, FusionCache(mode="add", head=head, t=t, labels=labels, fused=fused)
    if head.mode == "dot":
        _require(head, "dot", t, labels)
        raw = float(np.exp(head.log_scale.value[0]))
        clamped = raw > MAX_DOT_SCALE
        scale = MAX_DOT_SCALE if clamped else raw
        logits = scale * (labels @ t)
        return logits, FusionCache(mode="dot", head=head, t=t, labels=labels,
                                   scale=scale, scale_clamped=clamped)
    raise ValueError(f"unknown fusion mode {head.mode!r}")


def score_backward(d_logits: np.ndarray, cache: FusionCache):
    """Accumulate head gradients; returns (d_t, d_labels or None)."""
    head = cache.head
    if cache.mode == "none":
        head.w_out.grad += np.outer(d_logits, cache.t)
        head.b_out.grad += d_logits
        return head.w_out.value.T @ d_logits, None
    if cache.mode == "add":
        relu = np.maximum(cache.fused, 0)
        head.w_mix.grad += relu.T @ d_logits
        head.b_out.grad += d_logits
        d_fused = np.outer(d_logits, head.w_mix.value) * (cache.fused > 0)
        return d_fused.sum(axis=0), d_fused
    # dot
    dots = cache.labels @ cache.t
    if not cache.scale_clamped:  # clamp active -> zero gradient into s
        head.log_scale.grad += cache.scale * float(d_logits @ dots)
    d_t = cache.scale * (cache.labels.T @ d_logits)
    d_labels = cache.scale * np.outer(d_logits, cache.t)
    return d_t, d_labels
