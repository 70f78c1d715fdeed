"""Finite-difference verification of every backward pass, in float64.

Per-layer checks isolate one primitive with a fixed random projection to a
scalar; full-model checks run the complete text+label pipeline for each
fusion mode on a synthetic corpus. Central differences are meaningless at a
relu kink, so full-model instances get their biases nudged until every
preactivation (FFN hidden units, and the fused vectors of the additive head)
clears a safety margin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nncore
from .corpus import Example, TokenSeq, make_dataset, tokenize
from .encoder import encode_forward, encode_labels_forward
from .errors import VerificationError
from .fusion import FusionHead, score_backward, score_forward
from .nncore import GradCheckReport, ParamTensor, finite_diff_check
from .trainer import Model, TrainConfig, batch_step, build_model

LAYER_THRESHOLD = 1e-6
MODEL_THRESHOLD = 1e-3
RELU_MARGIN = 2e-3


@dataclass(frozen=True)
class CheckOutcome:
    report: GradCheckReport
    threshold: float

    @property
    def passed(self) -> bool:
        return self.report.max_rel_err < self.threshold


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def _param(rng: np.random.Generator, name: str, shape) -> ParamTensor:
    return ParamTensor(name, rng.uniform(-0.5, 0.5, size=shape))


def _seq(ids, true_len: int) -> TokenSeq:
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.zeros(len(ids), dtype=bool)
    mask[:true_len] = True
    return TokenSeq(ids=ids, mask=mask, true_len=true_len)


def check_embedding() -> GradCheckReport:
    rng = _rng(11)
    v, d = 7, 5
    emb = _param(rng, "emb", (v, d))
    pos = _param(rng, "pos", (6, d))
    seq = _seq([3, 3, 1, 6, 0, 0], true_len=4)  # duplicate ids accumulate
    proj = rng.uniform(-1, 1, size=(6, d))

    def loss() -> float:
        out, _ = nncore.embed_forward(seq, emb, pos)
        return float((proj * out).sum())

    out, cache = nncore.embed_forward(seq, emb, pos)
    nncore.embed_backward(proj, cache)
    return finite_diff_check("embedding", loss, [emb, pos])


def check_attention() -> GradCheckReport:
    rng = _rng(12)
    m, d = 6, 5
    x = _param(rng, "x", (m, d))
    wq = _param(rng, "wq", (d, d))
    wk = _param(rng, "wk", (d, d))
    wv = _param(rng, "wv", (d, d))
    mask = np.array([True, True, True, True, False, False])
    proj = rng.uniform(-1, 1, size=(m, d)) * mask[:, None]

    def loss() -> float:
        out, _ = nncore.attention_forward(x.value, mask, wq, wk, wv)
        return float((proj * out).sum())

    out, cache = nncore.attention_forward(x.value, mask, wq, wk, wv)
    x.grad += nncore.attention_backward(proj, cache)
    return finite_diff_check("attention", loss, [x, wq, wk, wv])


def check_ffn() -> GradCheckReport:
    m, d, h = 4, 5, 8
    for seed in range(13, 13 + 50):
        rng = _rng(seed)
        x = _param(rng, "x", (m, d))
        w1 = _param(rng, "w1", (d, h))
        b1 = _param(rng, "b1", (h,))
        w2 = _param(rng, "w2", (h, d))
        b2 = _param(rng, "b2", (d,))
        pre = x.value @ w1.value + b1.value
        if np.abs(pre).min() > RELU_MARGIN:
            break
    else:
        raise VerificationError("no relu-safe FFN instance found")
    proj = rng.uniform(-1, 1, size=(m, d))

    def loss() -> float:
        out, _ = nncore.ffn_forward(x.value, w1, b1, w2, b2)
        return float((proj * out).sum())

    out, cache = nncore.ffn_forward(x.value, w1, b1, w2, b2)
    x.grad += nncore.ffn_backward(proj, cache)
    return finite_diff_check("ffn", loss, [x, w1, b1, w2, b2])


def check_mean_pool() -> GradCheckReport:
    rng = _rng(14)
    m, d = 6, 5
    x = _param(rng, "x", (m, d))
    mask = np.array([True, True, True, False, False, False])
    proj = rng.uniform(-1, 1, size=d)

    def loss() -> float:
        return float(proj @ nncore.mean_pool_masked(x.value, mask))

    x.grad += nncore.mean_pool_backward(proj, mask)
    return finite_diff_check("mean_pool", loss, [x])


def check_cross_entropy() -> GradCheckReport:
    rng = _rng(15)
    logits = _param(rng, "logits", (6,))
    target = 2

    def loss() -> float:
        return nncore.cross_entropy(logits.value, target)[0]

    _, grad = nncore.cross_entropy(logits.value, target)
    logits.grad += grad
    return finite_diff_check("cross_entropy", loss, [logits])


def _make_head(mode: str, rng: np.random.Generator, k: int, d: int) -> FusionHead:
    if mode == "none":
        return FusionHead(mode="none", w_out=_param(rng, "head.w_out", (k, d)),
                          b_out=_param(rng, "head.b_out", (k,)))
    if mode == "add":
        return FusionHead(mode="add", w_mix=_param(rng, "head.w_mix", (d,)),
                          b_out=_param(rng, "head.b_out", (k,)))
    return FusionHead(mode="dot",
                      log_scale=ParamTensor("head.log_scale", np.array([np.log(10.0)])))


def check_head(mode: str) -> GradCheckReport:
    k, d = 4, 5
    for seed in range(16, 16 + 50):
        rng = _rng(seed)
        t = _param(rng, "t", (d,))
        labels = _param(rng, "labels", (k, d))
        head = _make_head(mode, rng, k, d)
        if mode != "add" or np.abs(t.value + labels.value).min() > RELU_MARGIN:
            break
    else:
        raise VerificationError("no relu-safe head instance found")
    proj = rng.uniform(-1, 1, size=k)
    consulted = None if mode == "none" else labels

    def loss() -> float:
        logits, _ = score_forward(t.value, None if consulted is None else consulted.value, head)
        return float(proj @ logits)

    logits, cache = score_forward(t.value, None if consulted is None else consulted.value, head)
    d_t, d_labels = score_backward(proj, cache)
    t.grad += d_t
    params = [t] + head.all()
    if d_labels is not None:
        labels.grad += d_labels
        params.append(labels)
    return finite_diff_check(f"head_{mode}", loss, params)


# --- full model -------------------------------------------------------------------

def _min_shift(values: np.ndarray, margin: float) -> float:
    """Smallest upward shift putting every value outside [-margin, margin]."""
    delta = 0.0
    while True:
        shifted = values + delta
        offending = values[(shifted >= -margin) & (shifted <= margin)]
        if offending.size == 0:
            return delta
        delta = 2 * margin - float(offending.min())


def _nudge_relu_safe(model: Model, seqs, margin: float) -> None:
    """Shift biases so no relu preactivation sits within `margin` of its kink.

    b1[j] enters every FFN preactivation of unit j additively, and (for the
    additive head) b2[j] shifts both the sentence vector and every label
    vector coordinate j, moving the fused values by twice the shift. Both
    adjustments are exact up to rounding, so a couple of passes converge.
    """
    all_seqs = list(seqs) + list(model.labels.token_seqs)
    for _ in range(10):
        pres = []
        for seq in all_seqs:
            _, cache = encode_forward(seq, model.enc)
            pres.append(cache.ffn_cache.pre)
        pre = np.concatenate(pres, axis=0)
        for j in range(pre.shape[1]):
            model.enc.b1.value[j] += _min_shift(pre[:, j], margin)

        if model.head.mode == "add":
            matrix, _ = encode_labels_forward(model.labels, model.enc)
            vecs = np.stack([encode_forward(seq, model.enc)[0] for seq in seqs])
            fused = (vecs[:, None, :] + matrix[None, :, :]).reshape(-1, matrix.shape[1])
            for j in range(fused.shape[1]):
                model.enc.b2.value[j] += _min_shift(fused[:, j], margin) / 2.0

        if _min_relu_margin(model, seqs) > 0.9 * margin:
            return
    raise VerificationError("could not move relu preactivations away from their kinks")


def _synthetic_instance(mode: str, dim: int, max_len: int, vocab_size: int):
    """Tiny corpus whose vocabulary has exactly `vocab_size` entries.

    Label names are drawn from the corpus words so verbalization adds no new
    tokens. Biases are nudged so every relu preactivation clears RELU_MARGIN.
    """
    n_words = vocab_size - 2  # minus PAD/UNK
    words = [f"w{i}" for i in range(n_words)]
    texts = []
    for lo in range(0, n_words, max_len):
        texts.append(" ".join(words[lo:lo + max_len]))
    # a few examples with repeats so duplicate-id scatter paths are exercised
    texts.append(" ".join([words[0], words[1], words[0], words[2]][:max_len]))
    texts.append(" ".join([words[3], words[3], words[4]][:max_len]))
    label_names = ("w0", "w1", "w2")
    examples = [Example(label_name=label_names[i % 3], text=t) for i, t in enumerate(texts)]
    dataset = make_dataset(examples, split="train")

    config = TrainConfig(fusion_mode=mode, dim=dim, max_len=max_len, min_freq=1, seed=0)
    model = build_model(config, dataset, dtype=np.float64)
    if len(model.vocab) != vocab_size:
        raise VerificationError(f"synthetic vocab has {len(model.vocab)} entries, "
                                f"wanted {vocab_size}")
    seqs, targets = _gradcheck_batch(model, dataset)
    _nudge_relu_safe(model, seqs, RELU_MARGIN)
    return model, seqs, targets


def _gradcheck_batch(model: Model, dataset):
    index = {name: i for i, name in enumerate(model.labels.label_names)}
    picked = [dataset.examples[i] for i in (0, len(dataset.examples) - 2, len(dataset.examples) - 1)]
    seqs = [tokenize(ex.text, model.vocab, model.config.max_len) for ex in picked]
    targets = [index[ex.label_name] for ex in picked]
    return seqs, targets


def _min_relu_margin(model: Model, seqs) -> float:
    margin = np.inf
    all_seqs = list(seqs) + list(model.labels.token_seqs)
    vecs = []
    for seq in all_seqs:
        vec, cache = encode_forward(seq, model.enc)
        margin = min(margin, float(np.abs(cache.ffn_cache.pre).min()))
        vecs.append(vec)
    if model.head.mode == "add":
        matrix, _ = encode_labels_forward(model.labels, model.enc)
        for vec in vecs[: len(seqs)]:
            margin = min(margin, float(np.abs(vec + matrix).min()))
    return margin


def batch_loss(model: Model, seqs, targets) -> float:
    """Mean cross-entropy of the batch, forward passes only."""
    matrix = None
    if model.head.mode != "none":
        matrix, _ = encode_labels_forward(model.labels, model.enc)
    total = 0.0
    for seq, target in zip(seqs, targets):
        vec, _ = encode_forward(seq, model.enc)
        logits, _ = score_forward(vec, matrix, model.head)
        total += nncore.cross_entropy(logits, target)[0]
    return total / len(seqs)


def check_full_model(mode: str, dim: int = 8, max_len: int = 6,
                     vocab_size: int = 50) -> GradCheckReport:
    model, seqs, targets = _synthetic_instance(mode, dim, max_len, vocab_size)
    batch_step(model, seqs, targets)  # fills grads with the mean batch gradient
    # eps an order larger than for single layers: cancellation can leave true
    # zeros among these gradients, and the difference-quotient noise floor
    # ulp(f)/(2 eps) must stay well under threshold * 1e-8.
    return finite_diff_check(f"full_model_{mode}",
                             lambda: batch_loss(model, seqs, targets),
                             model.parameters(), eps=1e-4)


def run_all(dim: int = 8, max_len: int = 6, vocab_size: int = 50) -> list[CheckOutcome]:
    """Every per-layer and full-model check with its threshold."""
    outcomes = [
        CheckOutcome(check_embedding(), LAYER_THRESHOLD),
        CheckOutcome(check_attention(), LAYER_THRESHOLD),
        CheckOutcome(check_ffn(), LAYER_THRESHOLD),
        CheckOutcome(check_mean_pool(), LAYER_THRESHOLD),
        CheckOutcome(check_cross_entropy(), LAYER_THRESHOLD),
    ]
    for mode in ("none", "add", "dot"):
        outcomes.append(CheckOutcome(check_head(mode), LAYER_THRESHOLD))
    for mode in ("none", "add", "dot"):
        outcomes.append(CheckOutcome(check_full_model(mode, dim, max_len, vocab_size),
                                     MODEL_THRESHOLD))
    return outcomes
