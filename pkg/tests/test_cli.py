import csv
import io
import json
import shutil
from pathlib import Path

import pytest
import yaml

from llmpc.cli import EXIT_ERROR, EXIT_INFEASIBLE, EXIT_OK, key_line, main, parse_axis
from llmpc.config import PRESET_ENV, preset_dir

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SMALL = CONFIGS / "gpt2-medium-a100.yaml"


def _rows(text):
    body = "\n".join(line for line in text.splitlines() if not line.startswith("#"))
    return list(csv.DictReader(io.StringIO(body)))


@pytest.mark.parametrize("name,code", [("gpt3-175b-training", EXIT_OK),
                                       ("gpt3-175b-pp1-overflow", EXIT_INFEASIBLE),
                                       ("gpt2-medium-a100", EXIT_OK)])
def test_predict_exit_codes(tmp_path, capsys, name, code):
    assert main(["predict", "--config", str(CONFIGS / f"{name}.yaml"),
                 "--out", str(tmp_path)]) == code
    doc = json.loads((tmp_path / f"{name}.json").read_text())
    assert doc["feasible"] is (code == EXIT_OK)
    assert len(doc["fingerprint"]) == 16
    err = capsys.readouterr().err
    assert ("memory overflow" in err) is (code == EXIT_INFEASIBLE)


def test_predict_invalid_config_points_at_line(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    text = SMALL.read_text().replace("{dp: 8, tp: 1, microbatches: 8}",
                                     "{dp: 8, tp: 3, microbatches: 8}")
    bad.write_text(text)
    assert main(["predict", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_ERROR
    err = capsys.readouterr().err
    line = text.splitlines().index("  parallelism: {dp: 8, tp: 3, microbatches: 8}") + 1
    assert f"{bad}:{line}:" in err
    assert not (tmp_path / "bad.json").exists()


def test_key_line(tmp_path):
    assert key_line(SMALL, "run.parallelism.dp") == 12
    assert key_line(SMALL, "system.network.0.size") == 5
    assert key_line(SMALL, "run.nonexistent") == 7
    assert key_line(tmp_path / "missing.yaml", "run") is None


def test_predict_flash_pair(tmp_path):
    for flag in ("on", "off"):
        assert main(["predict", "--config", str(SMALL), "--flash-attention", flag,
                     "--out", str(tmp_path)]) == EXIT_OK
    on = json.loads((tmp_path / "gpt2-medium-a100-fa-on.json").read_text())
    off = json.loads((tmp_path / "gpt2-medium-a100-fa-off.json").read_text())
    assert on["iteration_time_s"] < off["iteration_time_s"]
    assert on["fingerprint"] != off["fingerprint"]
    assert (tmp_path / "gpt2-medium-a100-fa-on.csv").exists()


def test_sweep_product_and_invalid_rows(tmp_path):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--config", str(SMALL), "--axis", "run.parallelism.tp=1,2,3",
                 "--axis", "run.flash_attention=on,off", "--out", str(out)]) == EXIT_OK
    rows = _rows(out.read_text())
    assert len(rows) == 6
    assert [r["label"] for r in rows[:2]] == ["run.parallelism.tp=1;run.flash_attention=on",
                                              "run.parallelism.tp=1;run.flash_attention=off"]
    # only tp=1 fits 8 devices at dp=8; tp=3 also fails to divide the heads
    assert [r["iteration_time_s"] != "" for r in rows] == [True, True] + [False] * 4
    assert all(r["feasible"] == "false" for r in rows[2:])
    assert "row 4: invalid" in out.read_text()


def test_sweep_without_axes_is_one_row(capsys):
    assert main(["sweep", "--config", str(SMALL)]) == EXIT_OK
    assert len(_rows(capsys.readouterr().out)) == 1


def test_sweep_is_byte_identical(tmp_path):
    args = ["sweep", "--config", str(SMALL), "--axis", "workload.context=512,1024"]
    texts = []
    for i, jobs in enumerate(("1", "1", "2")):
        out = tmp_path / f"s{i}.csv"
        assert main([*args, "--jobs", jobs, "--out", str(out)]) == EXIT_OK
        texts.append(out.read_bytes())
    assert texts[0] == texts[1] == texts[2]


def test_sweep_bad_axis(capsys):
    with pytest.raises(SystemExit):
        main(["sweep", "--config", str(SMALL), "--axis", "run.batch"])
    assert main(["sweep", "--config", str(SMALL), "--axis",
                 "system.network.5.size=1"]) == EXIT_ERROR
    assert "cannot set" in capsys.readouterr().err
    assert parse_axis("a.b = 1, 2") == ("a.b", ["1", "2"])


def test_validate_only(capsys):
    assert main(["validate", "--only", "network"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    lines = [line for line in out if line.startswith(("[PASS]", "[FAIL]"))]
    assert lines and all("C5" in line for line in lines)


def test_validate_unknown_suite(capsys):
    assert main(["validate", "--only", "nonsense"]) == EXIT_ERROR
    assert "nonsense" in capsys.readouterr().err


def test_negative_control_inflated_peak_fails(tmp_path, monkeypatch, capsys):
    root = tmp_path / "presets"
    shutil.copytree(preset_dir(), root)
    path = root / "accelerators" / "a100-40gb.yaml"
    tree = yaml.safe_load(path.read_text())
    tree["accelerator"]["peak_flops"] = {k: 10 * v
                                         for k, v in tree["accelerator"]["peak_flops"].items()}
    path.write_text(yaml.safe_dump(tree, sort_keys=False))
    monkeypatch.setenv(PRESET_ENV, str(root))
    assert main(["validate", "--only", "flash"]) == EXIT_ERROR
    assert "[FAIL] C1" in capsys.readouterr().out


def test_hbm_study(tmp_path):
    out = tmp_path / "study.csv"
    assert main(["hbm-study", "--out", str(out)]) == EXIT_OK
    rows = {r["label"]: r for r in _rows(out.read_text())}
    assert len(rows) == 7
    assert float(rows["A100-5HBMs"]["metric"]) == 1.0
