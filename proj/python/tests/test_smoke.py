import math
import os

import pytest

import frul


def test_corpus_split_and_vocab():
    corpus = frul.generate_corpus(n_entities=8, questions_per_entity=3, seed=2)
    assert len(corpus) == 24
    split = frul.partition(corpus, 0.25, 2)
    assert len(split.forget_ids) + len(split.retain_ids) == 24
    assert not set(split.forget_ids) & set(split.retain_ids)
    vocab = frul.build_vocab(corpus)
    ex = corpus.examples[0]
    assert corpus.find(ex.id).answer == ex.answer
    assert vocab.decode(vocab.encode(ex.answer)) == ex.answer
    assert frul.generate_corpus(8, 3, 2).examples[5].cot == corpus.examples[5].cot


def test_rouge_and_log1mexp():
    vocab = frul.Vocabulary(["cat", "lay", "mat", "on", "sat", "the"])
    s = frul.rouge_l("the cat sat on mat", "the cat lay on the mat", vocab)
    assert s["f1"] == pytest.approx(8 / 11, rel=1e-15)
    assert frul.log1mexp(-math.log(2.0)) == pytest.approx(-math.log(2.0), rel=1e-15)
    with pytest.raises(frul.ValidationError):
        frul.log1mexp(0.0)
    with pytest.raises(ValueError):
        vocab.id("zebra")


def test_scrub_removes_forget_values():
    corpus = frul.generate_corpus(20, 4, 1)
    split = frul.partition(corpus, 0.1, 1)
    scrubbed = frul.scrub(corpus, split)
    assert [s.example_id for s in scrubbed] == sorted(split.forget_ids)
    for s in scrubbed:
        assert s.spans
        assert all(sp.start < sp.end and 0.0 < sp.confidence <= 1.0 for sp in s.spans)
        answer = corpus.find(s.example_id).answer
        assert f" {answer} " not in f" {s.cot_modified} "


def test_config_hash_and_cli(tmp_path):
    assert len(frul.config_hash()) == 16
    assert frul.config_hash(overrides=["train.epochs=5"]) != frul.config_hash()
    assert "epochs = 5" in frul.canonical_config(overrides=["train.epochs=5"])
    with pytest.raises(frul.ValidationError):
        frul.config_hash(overrides=["no.such_key=1"])

    code, _, err = frul.run_cli(["no-such-command"])
    assert code == 1 and err

    tiny = ["--set", "data.n_entities=6", "--set", "data.questions_per_entity=3",
            "--set", "data.forget_fraction=0.25", "--set", "model.d_model=16",
            "--set", "model.d_ff=32", "--set", "model.context_len=128",
            "--set", "train.epochs=2", "--set", "train.batch_size=4",
            "--set", "unlearn.epochs=2", "--set", "unlearn.eval_every=0",
            "--set", "eval.max_new=12", "--set", "optim.warmup_steps=2"]
    for sub in ["gen-data", "build-kb", "scrub", "train", "retrain", "unlearn", "eval"]:
        code, _, err = frul.run_cli([sub, "--out", str(tmp_path), "-q", *tiny])
        assert code == 0, f"{sub}: {err}"
    cells = frul.read_report(os.path.join(tmp_path, "reports", "unlearned-frul", "report.json"))
    assert set(cells) == {(s, c) for s in ("forget", "retain") for c in ("reasoning", "answer")}
    for cell in cells.values():
        assert cell["ue"] == pytest.approx(abs(cell["model"] - cell["reference"]), abs=1e-12)
