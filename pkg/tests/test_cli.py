import json

import pytest

from fs3d import cli
from fs3d.data import read_dataset
from fs3d.train import NumericError, load_checkpoint


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    p = tmp_path_factory.mktemp("d") / "d.jsonl"
    assert cli.main(["gen", "--seed", "1", "--n-configs", "16", "--atoms-max", "6", "--output", str(p)]) == 0
    return p


def test_gen_byte_identical(tmp_path, data):
    q = tmp_path / "again.jsonl"
    cli.main(["gen", "--seed", "1", "--n-configs", "16", "--atoms-max", "6", "--output", str(q)])
    assert q.read_bytes() == data.read_bytes()
    assert len(read_dataset(q)) == 16


def test_gen_needs_seed(tmp_path):
    with pytest.raises(SystemExit) as e:
        cli.main(["gen", "--output", str(tmp_path / "x")])
    assert e.value.code == 2


def test_train_outputs(tmp_path, data):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("fs = 2\nmax_steps = 2\nresidual_scale = 0.5\n")
    args = ["train", "--config", str(cfg), "--data", str(data), "--seed", "3", "--set", "momentum=0.9"]
    assert cli.main(args + ["--checkpoint", str(tmp_path / "a.ckpt"), "--metrics", str(tmp_path / "m")]) == 0
    assert cli.main(args + ["--checkpoint", str(tmp_path / "b.ckpt")]) == 0
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    recs = [json.loads(l) for l in (tmp_path / "m").read_text().splitlines()]
    assert [r["step"] for r in recs] == [1, 2]
    assert all(r["edges_per_sec"] == pytest.approx(r["edges"] / r["wall_time"]) for r in recs)
    _, layout, mom, meta = load_checkpoint(tmp_path / "a.ckpt")
    assert layout.n_shards == 2 and mom is not None and meta["step"] == 2


def test_usage_errors(tmp_path, data):
    ck = str(tmp_path / "c")
    assert cli.main(["train", "--data", str(data), "--seed", "0", "--checkpoint", ck, "--set", "fs=0"]) == 2
    assert cli.main(["train", "--data", str(tmp_path / "missing"), "--seed", "0", "--checkpoint", ck]) == 2
    assert cli.main(["verify", "--suite", "nonsense"]) == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--data", str(data), "--checkpoint", ck])
    assert e.value.code == 2


def test_numeric_failure_exit_code(tmp_path, data, monkeypatch):
    from fs3d import train

    def boom(self, *a, **k):
        raise NumericError("non-finite loss")
    monkeypatch.setattr(train.Trainer, "run", boom)
    assert cli.main(["train", "--data", str(data), "--seed", "0", "--checkpoint", str(tmp_path / "c")]) == 3


def test_verify_exit_codes(tmp_path, monkeypatch, capsys):
    out = tmp_path / "v.json"
    assert cli.main(["verify", "--suite", "loss", "--output", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["passed"] and rep["suite"] == "loss"
    from fs3d import verify
    real = verify.suite_loss

    def failing(seed=0, quick=True):
        res = real(seed, quick)
        res.add("forced", 1.0, 0.0)
        return res
    monkeypatch.setattr(verify, "suite_loss", failing)
    assert cli.main(["verify", "--suite", "loss"]) == 1


def test_plan_deterministic(data, capsys):
    args = ["plan", "--data", str(data), "--set", "fs=2", "--set", "batch_size=8"]
    assert cli.main(args) == 0
    a = capsys.readouterr().out
    assert cli.main(args) == 0
    assert capsys.readouterr().out == a and "b0.moe0" in a


def test_bench_report(data, capsys):
    assert cli.main(["bench", "--data", str(data), "--steps", "2", "--warmup", "1"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["steps"] == 2
    assert rep["peak_edges_per_sec"] == pytest.approx(rep["edges"] / rep["loop_seconds"])
