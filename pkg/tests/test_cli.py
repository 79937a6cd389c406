import re

import pytest

from sarcmtl.cli import build_parser, run

TINY = ["--encoder", "transformer", "--d", "8", "--layers", "1", "--heads", "2",
        "--nmax", "20", "--epochs", "1", "--batch-size", "32"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    train, test = root / "train.tsv", root / "test.tsv"
    assert run(["synth", "--out", str(train), "--n", "200", "--seed", "1", "--max-len", "8",
                "--vocab-size", "80", "--indicators-per-class", "2"]) == 0
    assert run(["synth", "--out", str(test), "--n", "60", "--seed", "2", "--max-len", "8",
                "--vocab-size", "80", "--indicators-per-class", "2"]) == 0
    return root, train, test


def test_synth_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run(["synth", "--out", str(tmp_path / name), "--n", "1000", "--seed", "7"]) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_help_lists_every_flag_with_defaults():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
            if action.option_strings and action.default not in (None, False, "==SUPPRESS=="):
                assert "default" in text


def test_usage_errors():
    assert run([]) == 1
    assert run(["train"]) == 1
    assert run(["bogus"]) == 1
    assert run(["ablate", "--train-data", "x", "--test-data", "y", "--run-dir", "z",
                "--seeds", "a,b"]) == 1


def test_data_errors(tmp_path, capsys):
    assert run(["train", "--data", str(tmp_path / "missing.tsv"),
                "--run-dir", str(tmp_path / "r")]) == 2
    bad = tmp_path / "bad.tsv"
    bad.write_text("text\tsentiment\tsarcasm\nhi\tMAYBE\tFALSE\n")
    assert run(["train", "--data", str(bad), "--run-dir", str(tmp_path / "r")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_invalid_config_is_usage_error(data, tmp_path):
    _, train, _ = data
    assert run(["train", "--data", str(train), "--run-dir", str(tmp_path / "r"),
                "--epochs", "0"]) == 1


def test_expect_count(data, tmp_path):
    _, train, _ = data
    assert run(["train", "--data", str(train), "--run-dir", str(tmp_path / "r"),
                "--expect-count", "12548", *TINY]) == 2


def test_train_then_eval(data, tmp_path, capsys):
    _, train, test = data
    run_dir = tmp_path / "run"
    assert run(["train", "--data", str(train), "--run-dir", str(run_dir), "--seed", "3",
                *TINY]) == 0
    for f in ("config.snapshot", "history.tsv", "checkpoint.final"):
        assert (run_dir / f).exists()
    assert (run_dir / "history.tsv").read_text().startswith("# seed=3\n")
    capsys.readouterr()
    out_dir = tmp_path / "eval"
    assert run(["eval", "--checkpoint", str(run_dir / "checkpoint.final"), "--data", str(test),
                "--out-dir", str(out_dir)]) == 0
    text = capsys.readouterr().out
    assert "seed=3" in text and "Sarcasm:" in text and "Sentiment:" in text
    names = sorted(p.name for p in out_dir.iterdir())
    assert names == ["cm_sarcasm.tsv", "cm_sentiment.tsv", "cm_sentiment_given_non_sarcastic.tsv",
                     "cm_sentiment_given_sarcastic.tsv", "report.txt"]


def test_eval_rejects_non_checkpoint(data):
    _, train, test = data
    assert run(["eval", "--checkpoint", str(train), "--data", str(test)]) == 2


def test_ablate_table(data, tmp_path, capsys):
    _, train, test = data
    out = tmp_path / "abl"
    assert run(["ablate", "--train-data", str(train), "--test-data", str(test),
                "--run-dir", str(out), "--seeds", "0", *TINY]) == 0
    rows = (out / "table.tsv").read_text().strip().split("\n")
    assert len(rows) == 11 and len(rows[0].split("\t")) == 3 + 10 + 1
    md = capsys.readouterr().out
    assert len([l for l in md.splitlines() if re.match(r"\| (ST|MTL)", l)]) == 10


def test_gradcheck_passes(capsys):
    # smaller than the default instance to keep the unit suite quick
    assert run(["gradcheck", "--d", "4", "--nmax", "4", "--vocab", "12", "--batch", "2",
                "--layers", "1", "--heads", "2", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "inter" in out and "att_sarc" in out


def test_gradcheck_fails_on_impossible_tolerance():
    assert run(["gradcheck", "--d", "4", "--nmax", "4", "--vocab", "12", "--batch", "2",
                "--layers", "1", "--heads", "2", "--tol", "0", "--plain"]) == 3
