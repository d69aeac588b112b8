import json
from pathlib import Path

import pytest

from gels.cli import default_config, resolve_config, run, ValidationError

TINY = {
    "gen.n_viewers": 9,
    "gen.n_offices": 3,
    "gen.T": 6,
    "gen.count": 3,
    "train.cut": 3,
    "train.eta": 0.01,
    "agent.embed_dim": 6,
    "agent.state_dim": 4,
    "agent.hidden_dim": 5,
    "agent.buffer_k": 8,
}


def snapshot(d: Path) -> dict:
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert run(["gen", "--config", str(cfg), "--seed", "4", "--out", str(root / "events")]) == 0
    assert run(["train", "--config", str(cfg), "--events", str(root / "events"), "--out", str(root / "train")]) == 0
    return root, cfg


def test_gen_is_byte_identical(workspace, tmp_path):
    root, cfg = workspace
    assert run(["gen", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path)]) == 0
    assert snapshot(tmp_path) == snapshot(root / "events")
    assert len(list(tmp_path.glob("event_*.jsonl"))) == 3


def test_train_outputs(workspace):
    root, _ = workspace
    names = set(snapshot(root / "train"))
    assert {"checkpoint.json", "training_log.csv", "manifest.json", "checkpoints/epoch_0000.json"} <= names
    manifest = json.loads((root / "train" / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert set(manifest["inputs"]["events"]) == {f"event_{i:03d}.jsonl" for i in range(3)}


@pytest.mark.parametrize("command", ["train", "train-star", "eval", "improve"])
def test_rerun_from_manifest(workspace, tmp_path, command):
    root, cfg = workspace
    first, second = tmp_path / "a", tmp_path / "b"
    extra = ["--events", str(root / "events")]
    if command in ("eval", "improve"):
        extra += ["--checkpoint", str(root / "train" / "checkpoint.json")]
    assert run([command, "--config", str(cfg), "--out", str(first)] + extra) == 0
    assert run([command, "--config", str(first / "manifest.json"), "--out", str(second)]) == 0
    assert snapshot(first) == snapshot(second)


def test_eval_outputs(workspace, tmp_path):
    root, cfg = workspace
    code = run(["eval", "--config", str(cfg), "--events", str(root / "events"),
                "--checkpoint", str(root / "train" / "checkpoint.json"), "--out", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "eval_summary.csv").read_text().startswith("event,macro_auc,micro_f1,macro_f1\n")
    assert len(list(tmp_path.glob("eval_event_*.csv"))) == 3


def test_error_exit_codes(workspace, tmp_path, capsys):
    root, cfg = workspace
    assert run(["eval", "--events", str(root / "events"), "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"agent.nonsense": 1}))
    assert run(["gen", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert run(["train", "--config", str(root / "events" / "manifest.json"), "--out", str(tmp_path)]) == 1
    with pytest.raises(SystemExit) as exc:
        run(["bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        run(["gen", "--no-such-flag"])
    assert exc.value.code == 2


def test_selftest_command(tmp_path, capsys):
    assert run(["selftest", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "selftest.txt").read_text().splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)


def test_config_resolution():
    cfg = resolve_config({"agent.gamma": 0.5, "train.eta": 1})
    assert cfg["agent.gamma"] == 0.5 and cfg["train.eta"] == 1.0
    assert set(cfg) == set(default_config())
    for bad in ({"agent.buffer_k": 1.5}, {"train.value_init": 1}, {"nope": 0}):
        with pytest.raises(ValidationError):
            resolve_config(bad)
