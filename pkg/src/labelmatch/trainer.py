"""Mini-batch cross-entropy training with Adam, seeding, and checkpointing.

Everything that consumes randomness draws from one documented generator so
runs are reproducible across implementations, not just across processes:

* splitmix64: out(c) = mix64(seed + (c+1) * 0x9E3779B97F4A7C15) where mix64
  is the standard splitmix64 finalizer (xor-shift 30, * 0xBF58476D1CE4E5B9,
  xor-shift 27, * 0x94D049BB133111EB, xor-shift 31), all mod 2**64.
* Unit floats take the top 53 bits: (out >> 11) * 2**-53.
* Parameter init consumes one stream seeded with mix64(seed), walking the
  parameters in declaration order (emb, pos, wq, wk, wv, w1, b1, w2, b2,
  then the head's arrays).
* The epoch-e shuffle is a descending Fisher-Yates pass using the stream
  seeded with mix64(seed + (e+1) * 0x9E3779B97F4A7C15): position i runs
  from n-1 down to 1 and swaps with j = out(n-1-i) mod (i+1).

Training is single-threaded and bit-deterministic: batches are consecutive
slices of the epoch permutation, per-example gradients accumulate in example
order, the label path (when fusion consults labels) accumulates after the
text path of the whole batch, and Adam updates parameters in declaration
order with gradients averaged over the batch.

Checkpoint file layout (little-endian throughout):

    bytes  0-4   magic "LBLM1"
    u64 batch_size, u64 epochs, u64 seed, u64 dim, u64 max_len, u64 min_freq
    f64 learning_rate
    str fusion_mode            (str = u64 byte length + UTF-8 bytes)
    u64 vocab_fingerprint      (FNV-1a over the NUL-joined token list)
    u64 parameter count
    per parameter, declaration order:
        str name, u64 ndim, u64 per dimension, raw float32 data (C order)
"""

from __future__ import annotations

import math
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .corpus import (Dataset, TokenSeq, Vocabulary, build_vocab, tokenize,
                     verbalize_label, vocab_fingerprint)
from .encoder import (EncoderParams, LabelSet, encode_backward, encode_forward,
                      encode_labels_backward, encode_labels_forward)
from .errors import CheckpointError, DataError, TrainingError
from .fusion import FUSION_MODES, FusionHead, score_backward, score_forward
from .nncore import ParamTensor, cross_entropy

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
CHECKPOINT_MAGIC = b"LBLM1"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# --- seeded randomness ----------------------------------------------------------

def _mix64(x: int) -> int:
    x &= MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def _raw_stream(seed: int, start: int, count: int) -> np.ndarray:
    """splitmix64 outputs at counter positions [start, start+count)."""
    idx = np.arange(start, start + count, dtype=np.uint64) + np.uint64(1)
    z = np.uint64(seed & MASK64) + idx * np.uint64(GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return z


def _unit_floats(seed: int, start: int, count: int) -> np.ndarray:
    return (_raw_stream(seed, start, count) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def shuffled_indices(n: int, seed: int) -> list[int]:
    """Descending Fisher-Yates permutation of range(n) driven by splitmix64."""
    draws = _raw_stream(seed, 0, max(n - 1, 0))
    idx = list(range(n))
    for step, i in enumerate(range(n - 1, 0, -1)):
        j = int(draws[step] % np.uint64(i + 1))
        idx[i], idx[j] = idx[j], idx[i]
    return idx


def epoch_shuffle_seed(seed: int, epoch: int) -> int:
    return _mix64((seed + (epoch + 1) * GOLDEN) & MASK64)


# --- configuration ----------------------------------------------------------------

CLI_BATCH_SIZES = (32, 64)  # the CLI restricts batch size to these two


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    learning_rate: float = 1e-3
    seed: int = 0
    fusion_mode: str = "dot"
    dim: int = 64
    max_len: int = 32
    min_freq: int = 1

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise DataError(f"epochs must be >= 0, got {self.epochs}")
        if not self.learning_rate > 0:
            raise DataError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.fusion_mode not in FUSION_MODES:
            raise DataError(f"fusion_mode must be one of {FUSION_MODES}")
        if min(self.dim, self.max_len, self.min_freq) < 1:
            raise DataError("dim, max_len and min_freq must all be >= 1")
        return self


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float   # percentage, full precision
    test_acc: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)


@dataclass
class Model:
    config: TrainConfig
    vocab: Vocabulary
    labels: LabelSet
    enc: EncoderParams
    head: FusionHead

    def parameters(self) -> list[ParamTensor]:
        return self.enc.all() + self.head.all()

    def label_matrix(self) -> np.ndarray | None:
        """Cached label encodings for inference; training never uses this."""
        if self.head.mode == "none":
            return None
        if self.labels.matrix is None:
            matrix, _ = encode_labels_forward(self.labels, self.enc)
            self.labels.matrix = matrix
        return self.labels.matrix

    def invalidate_label_cache(self) -> None:
        self.labels.matrix = None

    def predict_logits(self, seq: TokenSeq) -> np.ndarray:
        vec, _ = encode_forward(seq, self.enc)
        logits, _ = score_forward(vec, self.label_matrix(), self.head)
        return logits


# --- initialization ----------------------------------------------------------------

def _param_template(config: TrainConfig, vocab_size: int, num_classes: int):
    """(name, shape, init rule) for every parameter, in declaration order."""
    d, m = config.dim, config.max_len
    h = 4 * d
    entries = [
        ("emb", (vocab_size, d), "xavier"),
        ("pos", (m, d), "pos"),
        ("wq", (d, d), "xavier"),
        ("wk", (d, d), "xavier"),
        ("wv", (d, d), "xavier"),
        ("w1", (d, h), "xavier"),
        ("b1", (h,), "zero"),
        ("w2", (h, d), "xavier"),
        ("b2", (d,), "zero"),
    ]
    if config.fusion_mode == "none":
        entries += [("head.w_out", (num_classes, d), "xavier"),
                 ("head.b_out", (num_classes,), "zero")]
    elif config.fusion_mode == "add":
        entries += [("head.w_mix", (d,), "xavier"),
                 ("head.b_out", (num_classes,), "zero")]
    else:
        entries += [("head.log_scale", (1,), "log10")]
    return entries


def _xavier_bound(shape: tuple[int, ...]) -> float:
    if len(shape) == 1:  # treated as fan_in x 1
        return math.sqrt(6.0 / (shape[0] + 1))
    return math.sqrt(6.0 / (shape[0] + shape[1]))


def init_params(config: TrainConfig, vocab_size: int, num_classes: int,
                dtype=np.float32) -> tuple[EncoderParams, FusionHead]:
    """Deterministic initialization from config.seed (see module docstring)."""
    stream_seed = _mix64(config.seed & MASK64)
    offset = 0
    params: dict[str, ParamTensor] = {}
    for name, shape, kind in _param_template(config, vocab_size, num_classes):
        size = int(np.prod(shape))
        if kind == "zero":
            value = np.zeros(shape, dtype=dtype)
        elif kind == "log10":
            value = np.full(shape, math.log(10.0), dtype=dtype)
        else:
            u = _unit_floats(stream_seed, offset, size)
            offset += size
            bound = 0.01 if kind == "pos" else _xavier_bound(shape)
            value = ((2.0 * u - 1.0) * bound).reshape(shape).astype(dtype)
        params[name] = ParamTensor(name, value)

    enc = EncoderParams(emb=params["emb"], pos=params["pos"], wq=params["wq"],
                        wk=params["wk"], wv=params["wv"], w1=params["w1"],
                        b1=params["b1"], w2=params["w2"], b2=params["b2"])
    if config.fusion_mode == "none":
        head = FusionHead(mode="none", w_out=params["head.w_out"], b_out=params["head.b_out"])
    elif config.fusion_mode == "add":
        head = FusionHead(mode="add", w_mix=params["head.w_mix"], b_out=params["head.b_out"])
    else:
        head = FusionHead(mode="dot", log_scale=params["head.log_scale"])
    return enc, head


def build_model(config: TrainConfig, train_set: Dataset,
                verbalizer: dict[str, str] | None = None,
                dtype=np.float32) -> Model:
    """Vocabulary, verbalized label set, and freshly initialized parameters."""
    config.validate()
    phrases = [verbalize_label(name, verbalizer) for name in train_set.label_names]
    vocab = build_vocab(train_set, config.min_freq, extra_texts=phrases)
    seqs = tuple(tokenize(p, vocab, config.max_len) for p in phrases)
    labels = LabelSet(label_names=train_set.label_names, token_seqs=seqs)
    enc, head = init_params(config, len(vocab), labels.num_classes, dtype=dtype)
    return Model(config=config, vocab=vocab, labels=labels, enc=enc, head=head)


# --- optimizer -------------------------------------------------------------------

def adam_step(params: list[ParamTensor], lr: float, t: int,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> None:
    """Bias-corrected Adam update in declaration order; zeroes grads after."""
    if t < 1:
        raise TrainingError(f"step counter must be >= 1, got {t}")
    for p in params:
        g = p.grad
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in parameter {p.name!r}")
        p.adam_m *= beta1
        p.adam_m += (1 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1 - beta2) * (g * g)
        m_hat = p.adam_m / (1 - beta1**t)
        v_hat = p.adam_v / (1 - beta2**t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()


# --- training --------------------------------------------------------------------

def _uses_labels(mode: str) -> bool:
    return mode != "none"


def batch_step(model: Model, seqs: list[TokenSeq], targets: list[int]) -> list[float]:
    """Forward/backward over one mini-batch; grads = mean over its examples.

    Returns the per-example losses. Does not run the optimizer.
    """
    batch = len(seqs)
    scale = 1.0 / batch
    label_matrix = None
    label_caches = None
    d_label_total = None
    if _uses_labels(model.head.mode):
        label_matrix, label_caches = encode_labels_forward(model.labels, model.enc)
        d_label_total = np.zeros_like(label_matrix)

    losses = []
    for seq, target in zip(seqs, targets):
        vec, enc_cache = encode_forward(seq, model.enc)
        logits, fusion_cache = score_forward(vec, label_matrix, model.head)
        loss, d_logits = cross_entropy(logits, target)
        losses.append(loss)
        d_logits *= scale
        d_vec, d_labels = score_backward(d_logits, fusion_cache)
        encode_backward(d_vec, enc_cache)
        if d_labels is not None:
            d_label_total += d_labels
    if label_caches is not None:
        encode_labels_backward(d_label_total, label_caches)
    return losses


@dataclass
class EvalResult:
    correct: int
    total: int
    per_class: dict[str, tuple[int, int]]  # label -> (gold count, correct count)

    @property
    def accuracy_pct(self) -> float:
        return 100.0 * self.correct / self.total


def _threads_from_env() -> int:
    try:
        return max(1, int(os.environ.get("LABELMATCH_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_seqs(model: Model, seqs: list[TokenSeq], targets: list[int],
                  label_names: tuple[str, ...]) -> EvalResult:
    """Argmax accuracy over pre-tokenized examples (read-only on the model)."""
    matrix = None
    if _uses_labels(model.head.mode):
        matrix, _ = encode_labels_forward(model.labels, model.enc)

    def predict(seq: TokenSeq) -> int:
        vec, _ = encode_forward(seq, model.enc)
        logits, _ = score_forward(vec, matrix, model.head)
        return int(np.argmax(logits))

    threads = _threads_from_env()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            preds = list(pool.map(predict, seqs, chunksize=64))
    else:
        preds = [predict(seq) for seq in seqs]

    per_class = {name: [0, 0] for name in label_names}
    correct = 0
    for pred, target in zip(preds, targets):
        gold = label_names[target]
        per_class[gold][0] += 1
        if pred == target:
            per_class[gold][1] += 1
            correct += 1
    return EvalResult(correct=correct, total=len(seqs),
                      per_class={k: (g, c) for k, (g, c) in per_class.items()})


def evaluate(model: Model, dataset: Dataset) -> EvalResult:
    seqs, targets = _tokenize_dataset(model, dataset)
    return evaluate_seqs(model, seqs, targets, model.labels.label_names)


def _tokenize_dataset(model: Model, dataset: Dataset):
    index = {name: i for i, name in enumerate(model.labels.label_names)}
    seqs = []
    targets = []
    for ex in dataset.examples:
        if ex.label_name not in index:
            raise DataError(f"label {ex.label_name!r} not in the model's label set")
        seqs.append(tokenize(ex.text, model.vocab, model.config.max_len))
        targets.append(index[ex.label_name])
    return seqs, targets


def train(config: TrainConfig, train_set: Dataset, eval_set: Dataset,
          verbalizer: dict[str, str] | None = None,
          progress=None) -> tuple[Model, TrainHistory]:
    """Train for exactly config.epochs passes; returns the model and history.

    Deterministic: (config, seed, data) fix every parameter bit. The eval
    set's labels must all occur in the train set.
    """
    config.validate()
    missing = set(eval_set.label_names) - set(train_set.label_names)
    if missing:
        raise DataError(f"eval labels absent from train label set: {sorted(missing)}")

    model = build_model(config, train_set, verbalizer)
    train_seqs, train_targets = _tokenize_dataset(model, train_set)
    eval_seqs, eval_targets = _tokenize_dataset(model, eval_set)

    history = TrainHistory()
    step = 0
    n = len(train_seqs)
    for epoch in range(config.epochs):
        started = time.monotonic()
        perm = shuffled_indices(n, epoch_shuffle_seed(config.seed, epoch))
        epoch_losses: list[float] = []
        for lo in range(0, n, config.batch_size):
            batch_idx = perm[lo:lo + config.batch_size]
            losses = batch_step(model,
                                [train_seqs[i] for i in batch_idx],
                                [train_targets[i] for i in batch_idx])
            epoch_losses.extend(losses)
            step += 1
            adam_step(model.parameters(), config.learning_rate, step)
        model.invalidate_label_cache()
        train_eval = evaluate_seqs(model, train_seqs, train_targets, model.labels.label_names)
        test_eval = evaluate_seqs(model, eval_seqs, eval_targets, model.labels.label_names)
        stats = EpochStats(epoch=epoch + 1,
                           train_loss=sum(epoch_losses) / len(epoch_losses),
                           train_acc=train_eval.accuracy_pct,
                           test_acc=test_eval.accuracy_pct,
                           seconds=time.monotonic() - started)
        history.epochs.append(stats)
        if progress is not None:
            progress(stats)
    return model, history


# --- checkpoints ------------------------------------------------------------------

def _write_u64(f, x: int) -> None:
    f.write(struct.pack("<Q", x & MASK64))


def _write_str(f, s: str) -> None:
    raw = s.encode("utf-8")
    _write_u64(f, len(raw))
    f.write(raw)


def _read_exact(f, n: int) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise CheckpointError("truncated checkpoint")
    return raw


def _read_u64(f) -> int:
    return struct.unpack("<Q", _read_exact(f, 8))[0]


def _read_str(f) -> str:
    n = _read_u64(f)
    return _read_exact(f, n).decode("utf-8")


def save_checkpoint(model: Model, path) -> None:
    cfg = model.config
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for x in (cfg.batch_size, cfg.epochs, cfg.seed, cfg.dim, cfg.max_len, cfg.min_freq):
            _write_u64(f, x)
        f.write(struct.pack("<d", cfg.learning_rate))
        _write_str(f, cfg.fusion_mode)
        _write_u64(f, vocab_fingerprint(model.vocab))
        params = model.parameters()
        _write_u64(f, len(params))
        for p in params:
            _write_str(f, p.name)
            _write_u64(f, p.value.ndim)
            for dim in p.value.shape:
                _write_u64(f, dim)
            f.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())


def read_checkpoint_header(path) -> tuple[TrainConfig, int]:
    """Returns (config, vocab fingerprint) without loading parameters."""
    with open(path, "rb") as f:
        if _read_exact(f, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        batch_size, epochs, seed, dim, max_len, min_freq = (_read_u64(f) for _ in range(6))
        lr = struct.unpack("<d", _read_exact(f, 8))[0]
        fusion_mode = _read_str(f)
        fingerprint = _read_u64(f)
    config = TrainConfig(batch_size=batch_size, epochs=epochs, learning_rate=lr,
                         seed=seed, fusion_mode=fusion_mode, dim=dim,
                         max_len=max_len, min_freq=min_freq)
    return config, fingerprint


def load_checkpoint(path, vocab: Vocabulary, label_names: tuple[str, ...],
                    verbalizer: dict[str, str] | None = None) -> Model:
    """Rebuild a Model from `path`; bit-exact inverse of save_checkpoint.

    The caller supplies the vocabulary (rebuilt from the training data the
    run manifest points at); its fingerprint must match the stored one.
    """
    config, fingerprint = read_checkpoint_header(path)
    config.validate()
    if fingerprint != vocab_fingerprint(vocab):
        raise CheckpointError(f"{path}: vocab fingerprint mismatch")

    template = _param_template(config, len(vocab), len(label_names))
    with open(path, "rb") as f:
        _read_exact(f, len(CHECKPOINT_MAGIC))
        for _ in range(6):
            _read_u64(f)
        _read_exact(f, 8)
        _read_str(f)
        _read_u64(f)
        count = _read_u64(f)
        if count != len(template):
            raise CheckpointError(f"{path}: shape mismatch: {count} parameters stored, "
                                  f"{len(template)} expected")
        params: dict[str, ParamTensor] = {}
        for name, shape, _ in template:
            stored_name = _read_str(f)
            ndim = _read_u64(f)
            stored_shape = tuple(_read_u64(f) for _ in range(ndim))
            if stored_name != name or stored_shape != shape:
                raise CheckpointError(
                    f"{path}: shape mismatch: stored {stored_name}{list(stored_shape)}, "
                    f"expected {name}{list(shape)}")
            size = int(np.prod(shape))
            raw = _read_exact(f, 4 * size)
            value = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            params[name] = ParamTensor(name, value)

    phrases = [verbalize_label(name, verbalizer) for name in label_names]
    seqs = tuple(tokenize(p, vocab, config.max_len) for p in phrases)
    labels = LabelSet(label_names=tuple(label_names), token_seqs=seqs)
    enc = EncoderParams(emb=params["emb"], pos=params["pos"], wq=params["wq"],
                        wk=params["wk"], wv=params["wv"], w1=params["w1"],
                        b1=params["b1"], w2=params["w2"], b2=params["b2"])
    if config.fusion_mode == "none":
        head = FusionHead(mode="none", w_out=params["head.w_out"], b_out=params["head.b_out"])
    elif config.fusion_mode == "add":
        head = FusionHead(mode="add", w_mix=params["head.w_mix"], b_out=params["head.b_out"])
    else:
        head = FusionHead(mode="dot", log_scale=params["head.log_scale"])
    return Model(config=config, vocab=vocab, labels=labels, enc=enc, head=head)
