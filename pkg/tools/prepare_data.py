#!/usr/bin/env python3
"""Build the TSV datasets under data/ from their public distributions.

The repository vendors the prepared files, so running this is only needed to
regenerate them from scratch. Two sources are used:

* TREC6 question classification: the `trec6` bundle inside the Phoneme-BERT
  data repository (original question texts). The published train and valid
  splits are concatenated, in file order, into the 5,452-example train set;
  the 500-example test set is kept as is. All six labels (ABBR, DESC, ENTY,
  HUM, LOC, NUM) occur in both splits.

* ATIS intent classification: the classic `w-intent` IOB files from the
  JointSLU distribution. `atis.train.w-intent.iob` is the pre-combined
  4,978-line train split (4,478 train + 500 dev) with exactly 22 distinct
  intents; `atis.test.w-intent.iob` has 893 lines. Each line is
  `BOS <tokens> EOS<TAB><slot tags> <intent>`; we keep the tokens between
  BOS/EOS as the text and the final tag as the intent.

Five ATIS test utterances carry intent strings that never occur in the train
split (atis_airfare#atis_flight, atis_flight#atis_airline,
atis_flight_no#atis_airline, and two atis_day_name). A classifier trained on
the 22 train intents cannot emit them, so they are remapped deterministically:
the first '#'-separated constituent that does occur in train, else the modal
train intent (atis_flight). The remap is printed when it happens.

Offline use: pass --trec6-dir / --atis-dir pointing at already-downloaded
copies (the Phoneme-BERT trec6 folder and a folder holding the two .iob
files) to skip the network entirely.
"""

from __future__ import annotations

import argparse
import collections
import io
import sys
import urllib.request
import zipfile
from pathlib import Path

PHONEME_BERT_ZIP = (
    "https://github.com/Observeai-Research/Phoneme-BERT/raw/main/"
    "phomeme-bert-data/downstream-datasets/trec6.zip"
)
JOINTSLU_BASE = "https://github.com/yvchen/JointSLU/raw/master/data"
ATIS_FILES = ("atis.train.w-intent.iob", "atis.test.w-intent.iob")


def fetch(url: str) -> bytes:
    print(f"fetching {url}")
    with urllib.request.urlopen(url) as resp:
        return resp.read()


def write_tsv(path: Path, rows: list[tuple[str, str]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for label, text in rows:
            assert "\t" not in label and "\n" not in text
            assert label.strip() and text.strip()
            f.write(f"{label}\t{text}\n")
    print(f"wrote {path} ({len(rows)} examples)")


def read_lines(data: bytes) -> list[str]:
    text = data.decode("utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


# --- TREC6 ----------------------------------------------------------------

def trec6_split(root: Path, split: str) -> list[tuple[str, str]]:
    texts = (root / split / "text_original.txt").read_text(encoding="utf-8").splitlines()
    labels = (root / split / "labels.classification.txt").read_text(encoding="utf-8").splitlines()
    if len(texts) != len(labels):
        raise SystemExit(f"trec6 {split}: {len(texts)} texts vs {len(labels)} labels")
    return list(zip((l.strip() for l in labels), (t.strip() for t in texts)))


def prepare_trec6(out_dir: Path, local_dir: Path | None) -> None:
    if local_dir is None:
        blob = fetch(PHONEME_BERT_ZIP)
        zi = zipfile.ZipFile(io.BytesIO(blob))
        tmp = out_dir / "_trec6_src"
        for name in zi.namelist():
            if name.startswith("trec6/") and not name.endswith("/"):
                zi.extract(name, tmp)
        local_dir = tmp / "trec6"
    train = trec6_split(local_dir, "train") + trec6_split(local_dir, "valid")
    test = trec6_split(local_dir, "test")
    write_tsv(out_dir / "trec6.train.tsv", train)
    write_tsv(out_dir / "trec6.test.tsv", test)


# --- ATIS -----------------------------------------------------------------

def parse_iob(lines: list[str]) -> list[tuple[str, str]]:
    rows = []
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        left, right = line.split("\t")
        words = left.split()
        tags = right.split()
        if words[0] != "BOS" or words[-1] != "EOS":
            raise SystemExit(f"atis line {i}: missing BOS/EOS sentinel")
        intent = tags[-1]
        text = " ".join(words[1:-1])
        if not text:
            raise SystemExit(f"atis line {i}: empty utterance")
        rows.append((intent, text))
    return rows


def prepare_atis(out_dir: Path, local_dir: Path | None) -> None:
    raw = {}
    for fname in ATIS_FILES:
        if local_dir is not None:
            raw[fname] = (local_dir / fname).read_bytes()
        else:
            raw[fname] = fetch(f"{JOINTSLU_BASE}/{fname}")
    train = parse_iob(read_lines(raw["atis.train.w-intent.iob"]))
    test = parse_iob(read_lines(raw["atis.test.w-intent.iob"]))

    train_labels = {label for label, _ in train}
    modal = collections.Counter(label for label, _ in train).most_common(1)[0][0]
    remapped = []
    for label, text in test:
        if label not in train_labels:
            parts = [p for p in label.split("#") if p in train_labels]
            new = parts[0] if parts else modal
            print(f"  remap test intent {label!r} -> {new!r}: {text[:50]}...")
            label = new
        remapped.append((label, text))

    assert len(train) == 4978 and len(remapped) == 893
    assert len(train_labels) == 22
    assert {label for label, _ in remapped} <= train_labels
    write_tsv(out_dir / "atis.train.tsv", train)
    write_tsv(out_dir / "atis.test.tsv", remapped)


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parent.parent / "data")
    ap.add_argument("--trec6-dir", type=Path, default=None,
                    help="local Phoneme-BERT trec6 folder (train/valid/test subdirs)")
    ap.add_argument("--atis-dir", type=Path, default=None,
                    help="local folder holding the two w-intent .iob files")
    args = ap.parse_args(argv)
    prepare_trec6(args.out, args.trec6_dir)
    prepare_atis(args.out, args.atis_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
