import json
import subprocess
import sys

import pytest

from embp.cli import main
from embp.em import Schedule

SWEEP = ["sweep", "--N", "20", "--L", "1", "--snr", "3,9", "--blocks", "12", "--chunk-size", "5",
         "--detectors", "embp,map_coherent"]


def test_sweep_byte_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(SWEEP + ["--seed", "7", "--out", str(a)]) == 0
    assert main(SWEEP + ["--seed", "7", "--workers", "2", "--out", str(b), "--dump-blocks", str(tmp_path / "d.jsonl")]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().splitlines()[0].startswith("snr_db,blocks,failures,ber_embp")
    meta = json.loads((tmp_path / "a.csv.meta.json").read_text())
    assert meta["wall_time_s"] > 0
    assert len((tmp_path / "d.jsonl").read_text().splitlines()) == 24


def test_sweep_stdout_and_seed_echo(capsys):
    assert main(SWEEP + ["--seed", "3"]) == 0
    out, err = capsys.readouterr()
    assert out.count("\n") == 3 and "# master seed 3" in err


def test_sweep_from_config(tmp_path):
    cfg = tmp_path / "e.cfg"
    cfg.write_text("[experiment]\nN = 16\nL = 1\nsnr_db = 5\nblocks = 6\ndetectors = bp_coherent\nseed = 2\n")
    out = tmp_path / "o.csv"
    assert main(["sweep", "--config", str(cfg), "--out", str(out)]) == 0
    assert out.read_text().splitlines()[1].startswith("5,6,0,")


def test_iters(tmp_path):
    out = tmp_path / "i.csv"
    assert main(["iters", "--N", "20", "--L", "2", "--snr", "10", "--blocks", "8",
                 "--schedules", "serial,parallel", "--T", "4", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "t,mse_serial,mse_parallel" and len(lines) == 6


def test_train_then_eval(tmp_path):
    sched = tmp_path / "s.txt"
    assert main(["train", "--T", "2", "--L", "1", "--N", "12", "--batches", "3", "--batch-size", "8",
                 "--out", str(sched), "--seed", "1"]) == 0
    s = Schedule.load(sched)
    assert (s.T, s.L) == (2, 1)
    out = tmp_path / "e.csv"
    assert main(["eval-schedule", str(sched), "--N", "12", "--snr", "6", "--blocks", "6", "--out", str(out)]) == 0
    assert "ber_bp_with_embp_estimate" in out.read_text()
    assert main(["eval-schedule", str(sched), "--N", "12", "--snr", "6", "--blocks", "6", "--iters",
                 "--out", str(out)]) == 0
    assert out.read_text().splitlines()[0].startswith("t,")


def test_selftest_subset():
    assert main(["selftest", "--only", "schedule_roundtrip,update_counter"]) == 0


def test_errors_exit_nonzero(capsys):
    assert main(["sweep", "--blocks", "0"]) == 2
    assert main(["eval-schedule", "/nonexistent"]) == 2
    with pytest.raises(SystemExit) as e:
        main(["sweep", "--frobnicate"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["launch"])
    assert e.value.code == 2


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "embp.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "selftest" in r.stdout
