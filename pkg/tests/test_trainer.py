import math

import numpy as np
import pytest

from labelmatch.corpus import (Example, build_vocab, load_dataset, make_dataset,
                               tokenize, verbalize_label)
from labelmatch.errors import CheckpointError, DataError, TrainingError
from labelmatch.nncore import ParamTensor
from labelmatch.trainer import (Model, TrainConfig, adam_step, batch_step,
                                build_model, evaluate, init_params,
                                load_checkpoint, save_checkpoint,
                                shuffled_indices, train)


@pytest.fixture(scope="module")
def toy_sets():
    examples = [
        Example("color", "the sky is blue today"),
        Example("color", "grass looks very green"),
        Example("animal", "a dog barked loudly"),
        Example("animal", "the cat sleeps on the mat"),
        Example("color", "bright red paint everywhere"),
        Example("animal", "a small bird sings"),
    ]
    train_set = make_dataset(examples)
    eval_set = make_dataset(examples[:4], split="test")
    return train_set, eval_set


def params_equal(a: Model, b: Model) -> bool:
    return all(np.array_equal(x.value, y.value)
               for x, y in zip(a.parameters(), b.parameters()))


class TestAdamStep:
    def test_zero_gradient_leaves_parameters(self):
        p = ParamTensor("p", np.array([1.0, -2.0], dtype=np.float32))
        adam_step([p], lr=1e-3, t=1)
        np.testing.assert_array_equal(p.value, [1.0, -2.0])

    def test_first_step_magnitude(self):
        # m-hat = v-hat = 1 at t=1 for a unit gradient, so the update is
        # -lr / (1 + eps), within a hair of -1e-3
        p = ParamTensor("p", np.array([0.0]))
        p.grad += 1.0
        adam_step([p], lr=1e-3, t=1)
        assert abs(p.value[0] + 1e-3) < 1e-9
        assert (p.grad == 0).all()

    def test_negated_gradient_negates_first_update(self):
        a = ParamTensor("a", np.zeros(4))
        b = ParamTensor("b", np.zeros(4))
        g = np.random.default_rng(0).normal(size=4)
        a.grad += g
        b.grad += -g
        adam_step([a], lr=1e-3, t=1)
        adam_step([b], lr=1e-3, t=1)
        np.testing.assert_array_equal(a.value, -b.value)

    def test_non_finite_gradient_names_parameter(self):
        p = ParamTensor("oddball", np.zeros(2))
        p.grad += np.array([1.0, np.nan])
        with pytest.raises(TrainingError, match="oddball"):
            adam_step([p], lr=1e-3, t=1)


class TestInitParams:
    def test_same_seed_bitwise_identical(self):
        config = TrainConfig(fusion_mode="none", dim=8, seed=42)
        enc_a, head_a = init_params(config, vocab_size=30, num_classes=4)
        enc_b, head_b = init_params(config, vocab_size=30, num_classes=4)
        for x, y in zip(enc_a.all() + head_a.all(), enc_b.all() + head_b.all()):
            np.testing.assert_array_equal(x.value, y.value)

    def test_different_seed_differs(self):
        a, _ = init_params(TrainConfig(dim=8, seed=1), 30, 4)
        b, _ = init_params(TrainConfig(dim=8, seed=2), 30, 4)
        assert not np.array_equal(a.emb.value, b.emb.value)

    def test_biases_start_at_zero(self):
        for mode in ("none", "add"):
            enc, head = init_params(TrainConfig(fusion_mode=mode, dim=8, seed=0), 30, 4)
            assert (enc.b1.value == 0).all() and (enc.b2.value == 0).all()
            assert (head.b_out.value == 0).all()

    def test_dot_scale_starts_at_ten(self):
        _, head = init_params(TrainConfig(fusion_mode="dot", dim=8, seed=0), 30, 4)
        assert abs(float(np.exp(head.log_scale.value[0])) - 10.0) < 1e-5

    def test_position_embeddings_are_small(self):
        enc, _ = init_params(TrainConfig(dim=8, seed=0), 30, 4)
        assert np.abs(enc.pos.value).max() <= 0.01


class TestShuffle:
    def test_is_a_permutation(self):
        idx = shuffled_indices(100, seed=5)
        assert sorted(idx) == list(range(100))

    def test_deterministic(self):
        assert shuffled_indices(50, seed=9) == shuffled_indices(50, seed=9)

    def test_seed_changes_order(self):
        assert shuffled_indices(50, seed=1) != shuffled_indices(50, seed=2)


class TestTrain:
    def test_zero_epochs_returns_initialization(self, toy_sets):
        train_set, eval_set = toy_sets
        config = TrainConfig(fusion_mode="dot", dim=8, epochs=0, seed=11)
        model, history = train(config, train_set, eval_set)
        assert history.epochs == []
        assert params_equal(model, build_model(config, train_set))

    def test_bit_identical_across_runs(self, toy_sets):
        train_set, eval_set = toy_sets
        config = TrainConfig(fusion_mode="add", dim=8, epochs=3, batch_size=2, seed=4)
        m1, h1 = train(config, train_set, eval_set)
        m2, h2 = train(config, train_set, eval_set)
        assert params_equal(m1, m2)
        assert [(e.train_loss, e.train_acc, e.test_acc) for e in h1.epochs] == \
            [(e.train_loss, e.train_acc, e.test_acc) for e in h2.epochs]

    def test_memorizes_toy_set(self, toy_sets):
        train_set, _ = toy_sets
        config = TrainConfig(fusion_mode="dot", dim=16, epochs=40, batch_size=3, seed=0)
        model, history = train(config, train_set, train_set)
        assert history.epochs[-1].train_acc == 100.0

    def test_unknown_eval_label_rejected(self, toy_sets):
        train_set, _ = toy_sets
        stranger = make_dataset([Example("weather", "it rains")], split="test")
        with pytest.raises(DataError, match="weather"):
            train(TrainConfig(epochs=1), train_set, stranger)

    def test_initial_loss_near_log_k(self, trec6_train_path):
        # at full vocabulary scale the untrained logits are near zero, so the
        # first batch loss starts within 0.1 of ln 6 for baseline and dot heads
        train_set = load_dataset(trec6_train_path)
        k = len(train_set.label_names)
        for mode in ("none", "dot"):
            config = TrainConfig(fusion_mode=mode, seed=2)
            model = build_model(config, train_set)
            index = {n: i for i, n in enumerate(train_set.label_names)}
            batch = train_set.examples[:32]
            seqs = [tokenize(ex.text, model.vocab, config.max_len) for ex in batch]
            targets = [index[ex.label_name] for ex in batch]
            losses = batch_step(model, seqs, targets)
            for p in model.parameters():
                p.zero_grad()
            assert abs(sum(losses) / len(losses) - math.log(k)) < 0.1

    def test_history_entries_per_epoch(self, toy_sets):
        train_set, eval_set = toy_sets
        config = TrainConfig(fusion_mode="none", dim=8, epochs=5, batch_size=2, seed=1)
        _, history = train(config, train_set, eval_set)
        assert [e.epoch for e in history.epochs] == [1, 2, 3, 4, 5]

    def test_invalid_config_rejected(self, toy_sets):
        train_set, eval_set = toy_sets
        with pytest.raises(DataError):
            train(TrainConfig(batch_size=0), train_set, eval_set)
        with pytest.raises(DataError):
            train(TrainConfig(learning_rate=0.0), train_set, eval_set)
        with pytest.raises(DataError):
            train(TrainConfig(fusion_mode="concat"), train_set, eval_set)


class TestEvaluate:
    def test_counts_and_breakdown(self, toy_sets):
        train_set, _ = toy_sets
        config = TrainConfig(fusion_mode="dot", dim=16, epochs=40, batch_size=3, seed=0)
        model, _ = train(config, train_set, train_set)
        result = evaluate(model, train_set)
        assert result.correct == result.total == len(train_set.examples)
        assert result.per_class["color"] == (3, 3)
        assert result.per_class["animal"] == (3, 3)

    def test_parallel_evaluation_matches_serial(self, toy_sets, monkeypatch):
        train_set, _ = toy_sets
        model, _ = train(TrainConfig(fusion_mode="dot", dim=8, epochs=1, batch_size=3,
                                     seed=0), train_set, train_set)
        serial = evaluate(model, train_set)
        monkeypatch.setenv("LABELMATCH_THREADS", "4")
        parallel = evaluate(model, train_set)
        assert (serial.correct, serial.total, serial.per_class) == \
            (parallel.correct, parallel.total, parallel.per_class)


class TestCheckpoint:
    def test_roundtrip_is_bitwise_identity(self, toy_sets, tmp_path):
        train_set, eval_set = toy_sets
        config = TrainConfig(fusion_mode="add", dim=8, epochs=2, batch_size=2, seed=6)
        model, _ = train(config, train_set, eval_set)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path, model.vocab, model.labels.label_names)
        assert params_equal(model, loaded)
        assert loaded.config == config
        seq = tokenize("the green cat barked", model.vocab, config.max_len)
        np.testing.assert_array_equal(model.predict_logits(seq),
                                      loaded.predict_logits(seq))

    def test_bad_magic(self, toy_sets, tmp_path):
        train_set, _ = toy_sets
        model = build_model(TrainConfig(dim=8), train_set)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        raw = bytearray(path.read_bytes())
        raw[:5] = b"XXXXX"
        path.write_bytes(raw)
        with pytest.raises(CheckpointError, match="bad magic"):
            load_checkpoint(path, model.vocab, model.labels.label_names)

    def test_vocab_fingerprint_mismatch(self, toy_sets, tmp_path):
        train_set, _ = toy_sets
        model = build_model(TrainConfig(dim=8), train_set)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        bigger = make_dataset(list(train_set.examples) +
                              [Example("color", "one extra novel word zzz")])
        other_vocab = build_vocab(bigger)
        with pytest.raises(CheckpointError, match="fingerprint"):
            load_checkpoint(path, other_vocab, model.labels.label_names)

    def test_label_count_shape_mismatch(self, toy_sets, tmp_path):
        train_set, _ = toy_sets
        model = build_model(TrainConfig(fusion_mode="none", dim=8), train_set)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        with pytest.raises(CheckpointError, match="shape mismatch"):
            load_checkpoint(path, model.vocab, ("a", "b", "c"))

    def test_truncated_file(self, toy_sets, tmp_path):
        train_set, _ = toy_sets
        model = build_model(TrainConfig(dim=8), train_set)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        path.write_bytes(path.read_bytes()[:40])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path, model.vocab, model.labels.label_names)
