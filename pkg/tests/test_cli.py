import json
import re

import numpy as np
import pytest

import labelmatch.nncore
from labelmatch.cli import main
from labelmatch.corpus import load_dataset
from labelmatch.trainer import TrainConfig, build_model, load_checkpoint, save_checkpoint


@pytest.fixture
def toy_files(tmp_path):
    colors = ["blue sky above", "green grass below", "red paint bucket",
              "yellow sun shines", "blue and green mix", "deep red color"]
    animals = ["the dog barks", "a cat sleeps", "small bird sings",
               "the horse runs fast", "a fish swims", "the owl hoots"]
    rows = []
    for i in range(2):
        rows += [("color", t + f" v{i}") for t in colors]
        rows += [("animal", t + f" v{i}") for t in animals]
    train = tmp_path / "toy.train.tsv"
    train.write_text("".join(f"{lab}\t{txt}\n" for lab, txt in rows), encoding="utf-8")
    test = tmp_path / "toy.test.tsv"
    test.write_text("".join(f"{lab}\t{txt}\n" for lab, txt in rows[:8]), encoding="utf-8")
    return train, test


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


class TestExitCodes:
    def test_usage_error_is_one(self, capsys):
        assert run_cli("train", "--train", "x.tsv") == 1  # missing required flags
        assert run_cli("no-such-command") == 1

    def test_bad_batch_size_message(self, capsys):
        code = run_cli("train", "--train", "a", "--test", "b", "--out", "c",
                       "--batch", "48")
        assert code == 1
        assert "batch size is selected from [32, 64]" in capsys.readouterr().err

    def test_data_error_is_two(self, tmp_path, capsys):
        assert run_cli("stats", "--data", tmp_path / "missing.tsv") == 2

    def test_empty_dataset_is_two(self, tmp_path, capsys):
        empty = tmp_path / "empty.tsv"
        empty.write_bytes(b"")
        assert run_cli("stats", "--data", empty) == 2

    def test_gradcheck_tiny_dims_enforced(self, capsys):
        assert run_cli("gradcheck", "--dim", "512") == 1


class TestStats:
    def test_single_line_dataset(self, tmp_path, capsys):
        path = tmp_path / "one.tsv"
        path.write_text("X\ta b c\n", encoding="utf-8")
        assert run_cli("stats", "--data", path) == 0
        assert "1 classes, 1 examples, avg 3.00" in capsys.readouterr().out

    def test_trec6_train(self, trec6_train_path, capsys):
        assert run_cli("stats", "--data", trec6_train_path) == 0
        assert "6 classes, 5452 examples" in capsys.readouterr().out

    def test_atis_train(self, atis_train_path, capsys):
        assert run_cli("stats", "--data", atis_train_path) == 0
        assert "4978 examples" in capsys.readouterr().out


class TestTrainCommand:
    def test_writes_checkpoint_history_manifest(self, toy_files, tmp_path, capsys):
        train, test = toy_files
        out = tmp_path / "model.ckpt"
        code = run_cli("train", "--train", train, "--test", test, "--fusion", "dot",
                       "--dim", "8", "--epochs", "3", "--seed", "1", "--out", out)
        assert code == 0
        history = (tmp_path / "model.ckpt.history.csv").read_text().splitlines()
        assert len(history) == 3  # one line per epoch, no header
        for line in history:
            assert re.fullmatch(r"\d+,\d+\.\d{6},\d+\.\d{6},\d+\.\d{6}", line)
        manifest = json.loads((tmp_path / "model.ckpt.manifest.json").read_text())
        assert manifest["config"]["fusion_mode"] == "dot"
        assert len(manifest["train_sha256"]) == 64

    def test_zero_epochs_checkpoint_equals_initialization(self, toy_files, tmp_path):
        train, test = toy_files
        out = tmp_path / "init.ckpt"
        assert run_cli("train", "--train", train, "--test", test, "--fusion", "dot",
                       "--dim", "8", "--epochs", "0", "--seed", "5", "--out", out) == 0
        config = TrainConfig(fusion_mode="dot", dim=8, epochs=0, seed=5)
        reference = build_model(config, load_dataset(train))
        loaded = load_checkpoint(out, reference.vocab, reference.labels.label_names)
        for a, b in zip(reference.parameters(), loaded.parameters()):
            np.testing.assert_array_equal(a.value, b.value)

    def test_eval_reproduces_final_train_accuracy(self, toy_files, tmp_path, capsys):
        train, test = toy_files
        out = tmp_path / "model.ckpt"
        assert run_cli("train", "--train", train, "--test", test, "--fusion", "add",
                       "--dim", "8", "--epochs", "4", "--seed", "2", "--out", out) == 0
        final_train_acc = (tmp_path / "model.ckpt.history.csv") \
            .read_text().splitlines()[-1].split(",")[2]
        capsys.readouterr()
        assert run_cli("eval", "--checkpoint", out, "--test", train) == 0
        got = capsys.readouterr().out
        match = re.search(r"accuracy \d+\.\d \((\d+)/(\d+)\)", got)
        correct, total = int(match.group(1)), int(match.group(2))
        assert f"{100.0 * correct / total:.6f}" == final_train_acc


class TestEvalCommand:
    def test_memorized_toy_set_scores_hundred(self, toy_files, tmp_path, capsys):
        train, test = toy_files
        out = tmp_path / "model.ckpt"
        assert run_cli("train", "--train", train, "--test", test, "--fusion", "dot",
                       "--dim", "16", "--epochs", "30", "--seed", "0", "--out", out) == 0
        capsys.readouterr()
        assert run_cli("eval", "--checkpoint", out, "--test", train) == 0
        assert "accuracy 100.0" in capsys.readouterr().out

    def test_constant_prediction_matches_label_counting_oracle(
            self, trec6_train_path, trec6_test_path, tmp_path, capsys):
        train_set = load_dataset(trec6_train_path)
        config = TrainConfig(fusion_mode="none", dim=8, seed=0)
        model = build_model(config, train_set)
        target = model.labels.label_names.index("DESC")
        model.head.w_out.value[...] = 0.0
        model.head.b_out.value[...] = 0.0
        model.head.b_out.value[target] = 5.0  # always predicts DESC
        path = tmp_path / "const.ckpt"
        save_checkpoint(model, path)

        lines = trec6_test_path.read_text(encoding="utf-8").splitlines()
        oracle = sum(1 for line in lines if line.split("\t")[0] == "DESC")

        assert run_cli("eval", "--checkpoint", path, "--test", trec6_test_path,
                       "--train", trec6_train_path) == 0
        out = capsys.readouterr().out
        assert f"({oracle}/{len(lines)})" in out
        assert f"accuracy {100.0 * oracle / len(lines):.1f}" in out

    def test_empty_test_file_is_data_error(self, toy_files, tmp_path, capsys):
        train, test = toy_files
        out = tmp_path / "model.ckpt"
        assert run_cli("train", "--train", train, "--test", test, "--fusion", "none",
                       "--dim", "8", "--epochs", "1", "--seed", "0", "--out", out) == 0
        empty = tmp_path / "empty.tsv"
        empty.write_bytes(b"")
        assert run_cli("eval", "--checkpoint", out, "--test", empty) == 2

    def test_missing_manifest_needs_train_flag(self, toy_files, tmp_path, capsys):
        train, test = toy_files
        out = tmp_path / "model.ckpt"
        assert run_cli("train", "--train", train, "--test", test, "--fusion", "none",
                       "--dim", "8", "--epochs", "1", "--seed", "0", "--out", out) == 0
        (tmp_path / "model.ckpt.manifest.json").unlink()
        assert run_cli("eval", "--checkpoint", out, "--test", test) == 2
        assert run_cli("eval", "--checkpoint", out, "--test", test,
                       "--train", train) == 0


class TestAblationCommand:
    def test_three_rows_and_csv_twin(self, toy_files, tmp_path, capsys):
        train, test = toy_files
        report = tmp_path / "report"
        code = run_cli("ablation", "--train", train, "--test", test, "--dim", "8",
                       "--epochs", "1", "--seeds", "7", "--out", report)
        assert code == 0
        table = (tmp_path / "report.txt").read_text()
        assert re.search(r"No\s+No\s+\d", table)
        assert re.search(r"Yes\s+Add\s+\d", table)
        assert re.search(r"Yes\s+Dot Product\s+\d", table)
        csv_lines = (tmp_path / "report.csv").read_text().splitlines()
        assert csv_lines[0] == "label_embeddings,fusion_method,dataset,seed,accuracy"
        # single seed: mean equals the one run
        per_seed = [l for l in csv_lines[1:] if ",7," in l]
        means = [l for l in csv_lines[1:] if ",mean," in l]
        assert len(per_seed) == 3 and len(means) == 3
        for seed_line, mean_line in zip(per_seed, means):
            assert seed_line.rsplit(",", 1)[1] == mean_line.rsplit(",", 1)[1]


class TestGradcheckCommand:
    def test_default_config_passes(self, capsys):
        assert run_cli("gradcheck") == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 11
        assert "FAIL" not in out

    def test_corrupted_backward_fails_with_exit_three(self, monkeypatch, capsys):
        real = labelmatch.nncore.ffn_backward

        def corrupted(d_out, cache):
            d_x = real(d_out, cache)
            cache.w1.grad += 1e-2
            return d_x

        monkeypatch.setattr(labelmatch.nncore, "ffn_backward", corrupted)
        assert run_cli("gradcheck") == 3
        assert "FAIL" in capsys.readouterr().out
