"""The shared sentence encoder: TokenSeq -> d-vector.

One EncoderParams instance serves both utterances and verbalized label
phrases; there is no second parameter set, so label representations move
whenever training updates the encoder.

The forward pass works on the valid prefix of the sequence (TokenSeq masks
are prefixes by construction), which makes the output structurally
independent of trailing padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nncore
from .corpus import TokenSeq
from .nncore import ParamTensor


@dataclass
class EncoderParams:
    """All trainable arrays of the encoder, in fixed declaration order."""

    emb: ParamTensor   # V x d token embeddings
    pos: ParamTensor   # M x d position embeddings
    wq: ParamTensor    # d x d
    wk: ParamTensor    # d x d
    wv: ParamTensor    # d x d
    w1: ParamTensor    # d x 4d
    b1: ParamTensor    # 4d
    w2: ParamTensor    # 4d x d
    b2: ParamTensor    # d

    def all(self) -> list[ParamTensor]:
        return [self.emb, self.pos, self.wq, self.wk, self.wv,
                self.w1, self.b1, self.w2, self.b2]

    @property
    def dim(self) -> int:
        return self.emb.value.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.emb.value.shape[0]

    @property
    def max_len(self) -> int:
        return self.pos.value.shape[0]


@dataclass
class EncodeCache:
    mask: np.ndarray
    embed_cache: nncore.EmbedCache
    attn_cache: nncore.AttnCache
    ffn_cache: nncore.FfnCache


@dataclass
class LabelSet:
    """Verbalized, tokenized class labels plus an inference-time cache.

    During training the label matrix is recomputed every step so gradients
    flow through the label path; `matrix` is only filled for inference.
    """

    label_names: tuple[str, ...]
    token_seqs: tuple[TokenSeq, ...]
    matrix: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        assert len(self.label_names) == len(self.token_seqs)

    @property
    def num_classes(self) -> int:
        return len(self.label_names)


def _valid_prefix(seq: TokenSeq) -> TokenSeq:
    n = seq.true_len
    return TokenSeq(ids=seq.ids[:n], mask=seq.mask[:n], true_len=n)


def encode_forward(seq: TokenSeq, params: EncoderParams):
    """Embed + one residual attention/FFN block + masked mean pooling."""
    prefix = _valid_prefix(seq)
    x0, embed_cache = nncore.embed_forward(prefix, params.emb, params.pos)
    attn, attn_cache = nncore.attention_forward(x0, prefix.mask, params.wq,
                                                params.wk, params.wv)
    x1 = x0 + attn
    ffn, ffn_cache = nncore.ffn_forward(x1, params.w1, params.b1, params.w2, params.b2)
    x2 = x1 + ffn
    vec = nncore.mean_pool_masked(x2, prefix.mask)
    return vec, EncodeCache(mask=prefix.mask, embed_cache=embed_cache,
                            attn_cache=attn_cache, ffn_cache=ffn_cache)


def encode_backward(d_vec: np.ndarray, cache: EncodeCache) -> None:
    d_x2 = nncore.mean_pool_backward(d_vec, cache.mask)
    d_x1 = d_x2 + nncore.ffn_backward(d_x2, cache.ffn_cache)
    d_x0 = d_x1 + nncore.attention_backward(d_x1, cache.attn_cache)
    nncore.embed_backward(d_x0, cache.embed_cache)


def encode(seq: TokenSeq, params: EncoderParams) -> np.ndarray:
    vec, _ = encode_forward(seq, params)
    return vec


def encode_labels_forward(labels: LabelSet, params: EncoderParams):
    """Stack encode(seq) for every class; returns (K x d matrix, caches)."""
    vecs = []
    caches = []
    for seq in labels.token_seqs:
        vec, cache = encode_forward(seq, params)
        vecs.append(vec)
        caches.append(cache)
    return np.stack(vecs), caches


def encode_labels(labels: LabelSet, params: EncoderParams) -> np.ndarray:
    matrix, _ = encode_labels_forward(labels, params)
    return matrix


def encode_labels_backward(d_matrix: np.ndarray, caches: list[EncodeCache]) -> None:
    for k, cache in enumerate(caches):
        encode_backward(d_matrix[k], cache)
