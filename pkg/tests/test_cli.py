import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import power_law_delta
from deltapress.cli import ConfigError, main, parse_group_bits
from deltapress.tensor_store import file_digest, read_container, write_container


@pytest.fixture
def checkpoints(tmp_path):
    rng = np.random.default_rng(0)
    base = {"l0.w": rng.standard_normal((64, 48)).astype(np.float32),
            "l0.b": np.zeros(48, np.float32)}
    ft = {"l0.w": base["l0.w"] + power_law_delta(64, 48, 1.0, rng, scale=0.1),
          "l0.b": np.full(48, 0.5, np.float32)}
    write_container(tmp_path / "base.bin", base)
    write_container(tmp_path / "ft.bin", ft)
    return tmp_path


def run(*args):
    return main([str(a) for a in args])


def test_delta_and_stats(checkpoints, capsys):
    p = checkpoints
    assert run("delta", "--base", p / "base.bin", "--finetuned", p / "ft.bin", "--out", p / "d.bin") == 0
    d = read_container(p / "d.bin")
    assert np.allclose(d.get("l0.w"), read_container(p / "ft.bin").get("l0.w") - read_container(p / "base.bin").get("l0.w"))
    assert np.array_equal(d.get("l0.b"), np.full(48, 0.5))
    capsys.readouterr()
    assert run("stats", p / "d.bin") == 0
    stats = json.loads(capsys.readouterr().out)
    assert {t["name"] for t in stats["tensors"]} == {"l0.b", "l0.w"}


@pytest.mark.parametrize("target", [["--cr", "8"], ["--alpha", "0.9"]])
@pytest.mark.parametrize("method", ["impart", "dare", "lowrank"])
def test_compress_reconstruct(checkpoints, method, target):
    p = checkpoints
    code = run("compress", "--base", p / "base.bin", "--finetuned", p / "ft.bin", "--method", method,
               *target, "--out", p / "a.bin", "--report", p / "r.json")
    assert code == 0
    report = json.loads((p / "r.json").read_text())
    assert report["effective_config"]["method"] == method
    assert run("reconstruct", "--artifact", p / "a.bin", "--base", p / "base.bin", "--out", p / "rec.bin") == 0
    rec = read_container(p / "rec.bin")
    assert np.array_equal(rec.get("l0.b"), np.full(48, 0.5))


def test_compress_quantized_with_calibration_and_config(checkpoints):
    p = checkpoints
    write_container(p / "calib.bin", {"l0.w": np.random.default_rng(1).standard_normal((48, 96))})
    (p / "cfg.json").write_text(json.dumps({"method": "impart-qt", "group_bits": "2:8,rest:4", "seed_salt": "run1"}))
    code = run("compress", "--base", p / "base.bin", "--finetuned", p / "ft.bin", "--config", p / "cfg.json",
               "--cr-qt", "16", "--calibration", p / "calib.bin", "--out", p / "a.bin", "--report", p / "r.json")
    assert code == 0
    cfg = json.loads((p / "r.json").read_text())["effective_config"]
    assert cfg["group_bits"] == "2:8,rest:4" and cfg["seed_salt"] == "run1"


def test_flags_override_config_file(checkpoints):
    p = checkpoints
    (p / "cfg.json").write_text(json.dumps({"method": "dare", "beta": 0.7}))
    run("compress", "--delta", p / "ft.bin", "--config", p / "cfg.json", "--method", "lowrank", "--cr", "4",
        "--out", p / "a.bin", "--report", p / "r.json")
    cfg = json.loads((p / "r.json").read_text())["effective_config"]
    assert cfg["method"] == "lowrank" and cfg["beta"] == 0.7


def test_exit_codes(checkpoints, tmp_path):
    p = checkpoints
    base = ["compress", "--base", p / "base.bin", "--finetuned", p / "ft.bin", "--out", p / "a.bin", "--report", p / "r.json"]
    # config errors
    assert run(*base, "--method", "impart", "--alpha", "1.5") == 2
    assert run("compress", "--out", p / "a.bin", "--cr", "8") == 2
    (p / "bad.json").write_text("{not json")
    assert run(*base, "--config", p / "bad.json", "--cr", "8") == 2
    with pytest.raises(SystemExit) as exc:
        run(*base, "--cr", "8", "--alpha", "0.5")
    assert exc.value.code == 2
    # data errors
    (p / "junk.bin").write_bytes(b"\xff" * 4)
    assert run("stats", p / "junk.bin") == 3
    assert run("stats", p / "missing.bin") == 3
    write_container(p / "other.bin", {"l0.w": np.zeros((3, 3), np.float32)})
    assert run("compress", "--base", p / "other.bin", "--finetuned", p / "ft.bin", "--cr", "8", "--out", p / "a.bin") == 3
    # numerical error: the ratio cannot be met without dropping every component
    assert run(*base, "--cr", "100000") == 4
    # digest mismatch is a data error unless forced
    assert run(*base, "--cr", "8") == 0
    write_container(p / "base2.bin", {"l0.w": np.ones((64, 48), np.float32), "l0.b": np.zeros(48, np.float32)})
    assert run("reconstruct", "--artifact", p / "a.bin", "--base", p / "base2.bin", "--out", p / "x.bin") == 3
    assert run("reconstruct", "--artifact", p / "a.bin", "--base", p / "base2.bin", "--out", p / "x.bin", "--force") == 0


def test_deterministic_across_processes(checkpoints):
    p = checkpoints
    digests = []
    for i, threads in enumerate(("1", "3")):
        out = p / f"a{i}.bin"
        subprocess.run([sys.executable, "-m", "deltapress.cli", "compress", "--base", p / "base.bin",
                        "--finetuned", p / "ft.bin", "--cr", "16", "--out", out, "--report", p / "r.json"],
                       check=True, env={"DELTAPRESS_THREADS": threads, "PATH": ""})
        digests.append(file_digest(out))
    assert digests[0] == digests[1]


def test_merge_command(checkpoints):
    p = checkpoints
    run("compress", "--base", p / "base.bin", "--finetuned", p / "ft.bin", "--cr", "4", "--out", p / "a.bin",
        "--report", p / "r.json")
    code = run("merge", "--base", p / "base.bin", p / "ft.bin", p / "a.bin", "--strategy", "ties",
               "--lam", "0.8", "--retain", "0.6", "--pre-sparsify", "dare:0.3", "--out", p / "m.bin",
               "--report", p / "m.json")
    assert code == 0
    assert read_container(p / "m.bin").names == ["l0.b", "l0.w"]
    assert run("merge", "--base", p / "base.bin", p / "ft.bin", "--pre-sparsify", "bogus", "--out", p / "m.bin") == 2


def test_bench_command(tmp_path):
    spec = {"sizes": [[32, 32]], "methods": ["dare", "lowrank"], "cr": [4], "cr_qt": []}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert run("bench", "--spec", tmp_path / "spec.json", "--out", tmp_path / "b.json", "--csv", tmp_path / "b.csv") == 0
    rows = json.loads((tmp_path / "b.json").read_text())["rows"]
    assert [r["method"] for r in rows] == ["dare", "lowrank"]
    assert (tmp_path / "b.csv").read_text().startswith("m,n,")
    (tmp_path / "spec.json").write_text(json.dumps({"colour": 1}))
    assert run("bench", "--spec", tmp_path / "spec.json") == 2


def test_parse_group_bits():
    assert parse_group_bits("2:8,32:3,rest:2") == ((2, 8), (32, 3), (None, 2))
    with pytest.raises(ConfigError):
        parse_group_bits("8")
