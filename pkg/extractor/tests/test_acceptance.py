"""Acceptance: extraction output interoperates with the trainer end to end.

The trainer is used strictly through its external surfaces: the record and
posterior file formats and the ``sensekit`` command line.
"""

import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from teacher_extract.cli import main
from teacher_extract.records import _HEADER, iter_records, validate
from teacher_extract.windows import Vocab

from conftest import FIXTURES


def report(name: str, ok: bool, detail: str = "") -> None:
    verdict = "PASS" if ok else "FAIL"
    print(f"[{verdict}] {name}" + (f" ({detail})" if detail else ""))
    assert ok, f"{name}: {detail}"


def run_sensekit(*args: str) -> subprocess.CompletedProcess:
    return subprocess.run(
        [sys.executable, "-m", "sensekit.cli", *args],
        capture_output=True, text=True,
    )


@pytest.fixture(scope="module")
def extracted(toy_encoder_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance") / "records.tse"
    code = main([
        "extract",
        "--corpus", str(FIXTURES / "shared_corpus.txt"),
        "--vocab", str(FIXTURES / "shared_vocab.tsv"),
        "--encoder", f"hf:{toy_encoder_dir}",
        "--window", "5",
        "--out", str(out),
    ])
    assert code == 0
    return out


class TestSecondaryAcceptance:
    def test_validate_zero_violations(self, extracted, capsys):
        code = main(["validate", "--file", str(extracted),
                     "--vocab", str(FIXTURES / "shared_vocab.tsv")])
        out = capsys.readouterr().out
        ok = code == 0 and "violations\t0" in out
        report("extraction passes validate on the 100-sentence fixture", ok,
               out.replace("\n", " ").strip())

    def test_position_keys_match_trainer_windowing(self, extracted):
        data = extracted.read_bytes()
        _, _, dim, delta, count, _ = _HEADER.unpack_from(data, 0)
        keys = [r.key for r in iter_records(data, dim, delta, count)]
        frozen = [
            int(line)
            for line in (FIXTURES / "shared_keys.txt").read_text().splitlines()
            if line
        ]
        ok = keys == frozen
        report("position keys exactly match the trainer's windowing", ok,
               f"{len(keys)} keys vs {len(frozen)} frozen")

    def test_subword_pooling_matches_direct_dump(self, extracted, toy_encoder_dir):
        import torch
        from transformers import AutoModel, AutoTokenizer

        from teacher_extract.windows import (
            iter_paragraphs,
            iter_window_spans,
            pack_position,
        )

        data = extracted.read_bytes()
        _, _, dim, delta, count, _ = _HEADER.unpack_from(data, 0)
        by_key = {r.key: r for r in iter_records(data, dim, delta, count)}
        tok = AutoTokenizer.from_pretrained(toy_encoder_dir)
        model = AutoModel.from_pretrained(toy_encoder_dir)
        model.eval()
        vocab = Vocab.load(FIXTURES / "shared_vocab.tsv")

        worst = 0.0
        multi = 0
        paragraphs = list(iter_paragraphs([FIXTURES / "shared_corpus.txt"], vocab))
        for para in paragraphs[:8]:
            enc = tok([para.tokens], is_split_into_words=True, return_tensors="pt")
            with torch.no_grad():
                hidden = model(**enc).last_hidden_state[0].numpy()
            pooled = {}
            for t, w in enumerate(enc.word_ids(0)):
                if w is not None:
                    pooled.setdefault(w, []).append(hidden[t])
            for center, ctx in iter_window_spans(len(para.invocab_ids), 5):
                rec = by_key[pack_position(para.doc, para.para, center)]
                for row, j in enumerate(sorted(ctx + [center])):
                    token_idx = para.invocab_token_idx[j]
                    expect = np.mean(pooled[token_idx], axis=0)
                    worst = max(worst, float(np.abs(rec.vectors[row] - expect).max()))
                    if len(pooled[token_idx]) > 1:
                        multi += 1
        ok = worst < 1e-5 and multi > 0
        report("per-word vectors are subword means (direct per-token dump)", ok,
               f"max abs diff={worst:.2e}, multi-piece words checked={multi}")

    def test_end_to_end_through_trainer_cli(self, extracted, tmp_path):
        # fit-teacher consumes the records; distill must then find a
        # posterior for every one of its windows, proving key coverage
        tparams = tmp_path / "teacher.npz"
        tpost = tmp_path / "teacher.tpo"
        fit = run_sensekit(
            "fit-teacher",
            "--records", str(extracted),
            "--vocab", str(FIXTURES / "shared_vocab.tsv"),
            "--senses", "2", "--epochs", "3",
            "--out-params", str(tparams),
            "--out-posteriors", str(tpost),
        )
        assert fit.returncode == 0, fit.stderr
        model = tmp_path / "model.sns"
        distill = run_sensekit(
            "distill",
            "--corpus", str(FIXTURES / "shared_corpus.txt"),
            "--vocab", str(FIXTURES / "shared_vocab.tsv"),
            "--posteriors", str(tpost),
            "--dim", "8", "--senses", "2", "--window", "5",
            "--negatives", "2", "--epochs", "1", "--batch", "64",
            "--seed", "1", "--out", str(model),
        )
        frozen = (FIXTURES / "shared_keys.txt").read_text().splitlines()
        windows_trained = (
            distill.stdout.strip().splitlines()[-1].split("\t")[-1]
            if distill.returncode == 0 else "?"
        )
        ok = (
            distill.returncode == 0
            and model.exists()
            and windows_trained == str(len(frozen))
        )
        report("trainer distills from the extracted records end to end", ok,
               f"exit={distill.returncode}, windows trained={windows_trained}, "
               f"records={len(frozen)}; {distill.stderr.strip()[:200]}")
