import json

import pytest

from txlmem import cli
from txlmem.config import DEFAULT, save
from txlmem.data import synthetic_corpus
from txlmem.memory import MemoryConfig
from txlmem.model import ModelConfig
from txlmem.train import TrainConfig


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "out"))
    corpus = tmp_path / "corpus.txt"
    corpus.write_bytes(synthetic_corpus(20_000, seed=0))
    mem = MemoryConfig(num_layers=2, lrm_length=16, srm_length=4, num_lrm=1, pattern="last")
    model = ModelConfig(layers=2, d_model=16, heads=2, window=8, memory=mem)
    cfg = DEFAULT.__class__(model, TrainConfig(max_steps=6, valid_interval=3, log_interval=3, lanes=2,
                                               valid_prefix=400, eval_lanes=1),
                            DEFAULT.data.__class__(path=str(corpus)))
    save(cfg, tmp_path / "small.cfg")
    return tmp_path


def run(capsys, *argv):
    code = cli.run(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.mark.parametrize("argv,expected", [
    (["--layers", "24", "--num-lrm", "1", "--pattern", "last"], "23"),
    (["--layers", "24", "--num-lrm", "24", "--pattern", "interleaved"], "0..23"),
    (["--layers", "24", "--num-lrm", "4", "--pattern", "interleaved"], "5,11,17,23"),
    (["--layers", "12", "--num-lrm", "2", "--pattern", "first", "--expand"], "0,1"),
    (["--layers", "6", "--num-lrm", "0", "--pattern", "first"], ""),
])
def test_arrange(capsys, argv, expected):
    code, out, _ = run(capsys, "arrange", *argv)
    assert code == 0 and out.strip() == expected


def test_format_layers():
    assert cli.format_layers([0, 1, 2, 5, 7, 8]) == "0..2,5,7..8"


def test_usage_errors(capsys, workdir):
    assert run(capsys, "arrange", "--layers", "4", "--num-lrm", "5", "--pattern", "last")[0] == cli.EXIT_USAGE
    code, _, err = run(capsys, "train", "--bogus")
    assert code == cli.EXIT_USAGE and "usage error" in err
    assert run(capsys, "train", "--config", str(workdir / "missing.cfg"))[0] == cli.EXIT_USAGE
    (workdir / "bad.cfg").write_text("memory.num_lrm = 9\n")
    assert run(capsys, "train", "--config", str(workdir / "bad.cfg"))[0] == cli.EXIT_USAGE


def test_data_error(capsys, workdir):
    code, _, err = run(capsys, "train", "--config", str(workdir / "small.cfg"), "--data", str(workdir / "nope"))
    assert code == cli.EXIT_DATA and "data error" in err
    (workdir / "junk.ckpt").write_bytes(b"junk")
    assert run(capsys, "eval", "--checkpoint", str(workdir / "junk.ckpt"), "--split", "test")[0] == cli.EXIT_DATA


def test_train_then_eval(capsys, workdir):
    code, out, _ = run(capsys, "train", "--config", str(workdir / "small.cfg"), "--seed", "3")
    assert code == 0
    summary = json.loads(out)
    ckpt = summary["checkpoint"]
    assert (workdir / "out" / "small.metrics.jsonl").exists()
    base = run(capsys, "eval", "--checkpoint", ckpt, "--split", "valid")
    same = run(capsys, "eval", "--checkpoint", ckpt, "--split", "valid", "--lrm-eval", "16")
    assert base[0] == same[0] == 0 and base[1] == same[1]
    longer = run(capsys, "eval", "--checkpoint", ckpt, "--split", "test", "--lrm-eval", "48")
    assert json.loads(longer[1])["memory"]["capacities"] == [4, 48]
    assert run(capsys, "eval", "--checkpoint", ckpt, "--split", "test", "--lrm-eval", "8")[0] == cli.EXIT_USAGE


def test_sweep_and_profile(capsys, workdir):
    code, out, _ = run(capsys, "sweep-srm", "--config", str(workdir / "small.cfg"), "--lengths", "2,4")
    assert code == 0 and len(out.splitlines()) == 3
    assert run(capsys, "sweep-srm", "--config", str(workdir / "small.cfg"), "--lengths", "a")[0] == cli.EXIT_USAGE
    cfg = str(workdir / "small.cfg")
    code, out, _ = run(capsys, "profile", "--configs", f"{cfg},{cfg}", "--warmup", "1", "--measure", "1")
    assert code == 0 and out.startswith("# memory:")
    assert (workdir / "out" / "profile_series.json").exists()


def test_config_and_synth(capsys, tmp_path):
    code, out, _ = run(capsys, "config", "--num-lrm", "2", "--pattern", "first")
    assert code == 0 and "memory.num_lrm = 2" in out
    code, out, _ = run(capsys, "synth-corpus", "--bytes", "1000", "--out", str(tmp_path / "c.txt"))
    assert code == 0 and (tmp_path / "c.txt").stat().st_size == 1000
