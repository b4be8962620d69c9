import json
import os
import subprocess
import sys

import numpy as np
import pytest

from seyolo.cli import main, worker_count
from seyolo.memplan import read_trace_csv
from seyolo.ppm import read_ppm, write_ppm

BENCH = ["bench-report",
         "--baseline-latency", "231", "--baseline-cpu-mw", "777", "--baseline-gpu-mw", "3846",
         "--baseline-gops", "198.2", "--baseline-reported-efficiency", "185.7",
         "--candidate-latency", "70", "--candidate-cpu-mw", "1158", "--candidate-gpu-mw", "2434",
         "--candidate-gops", "94.3", "--candidate-reported-efficiency", "788.5"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth-data", "--out", str(d / "ds"), "--n", "4", "--seed", "1"]) == 0
    assert main(["init-weights", "--out", str(d / "f.seyw"), "--calibrate-on", str(d / "ds"), "--limit", "4"]) == 0
    assert main(["quantize", "--weights", str(d / "f.seyw"), "--calib", str(d / "ds"), "--out", str(d / "q.seyw")]) == 0
    assert main(["init-weights", "--out", str(d / "zero.seyw"), "--zero"]) == 0
    return d


def test_model_info(capsys):
    code, out, _ = run(capsys, "model-info", "--json")
    d = json.loads(out)
    assert code == 0
    assert d["params"] == 981_816 and d["input_bytes"] == 49_152
    assert abs(d["size_mbit_8bit"] - 7.5) / 7.5 < 0.05
    _, out4, _ = run(capsys, "model-info", "--json", "--scale", "4")
    assert abs(json.loads(out4)["params"] / (4 * d["params"]) - 1) <= 0.15
    _, out1, _ = run(capsys, "model-info", "--json", "--classes", "1")
    assert d["params"] - json.loads(out1)["params"] == 6 * (128 + 64) + 12
    code, out, _ = run(capsys, "model-info")
    assert code == 0 and "981816" in out.replace(",", "")


def test_bench_report(capsys):
    code, out, _ = run(capsys, *BENCH, "--json")
    d = json.loads(out)
    assert code == 0
    assert abs(d["candidate"]["throughput"] - 14.2) <= 0.1
    assert abs(d["baseline"]["energy_per_inference_mj"] - 1068) <= 1
    assert abs(d["baseline"]["energy_efficiency_gops_per_j"] - 185.7) <= 0.5
    assert d["candidate"]["efficiency_consistent"] is False
    assert abs(d["comparison"]["speedup"] - 3.3) <= 0.1
    code, text, _ = run(capsys, *BENCH)
    assert code == 0 and "788.5" in text


def test_plan_calibrated_and_trace(capsys, tmp_path):
    trace = tmp_path / "t.csv"
    code, out, _ = run(capsys, "plan", "--calibrate-ms", "130", "--trace", trace, "--json")
    d = json.loads(out)
    assert code == 0
    assert abs(d["ms"] - 130) <= 1.3
    assert abs(d["inferences_per_second"] - 7.7) <= 0.1
    events = read_trace_csv(trace)
    assert len(events) == d["trace_events"]
    by_unit = {}
    for ev in events:
        by_unit.setdefault(ev.unit, []).append(ev)
    for evs in by_unit.values():
        for a, b in zip(evs, evs[1:]):
            assert a.end_cycle <= b.start_cycle
    assert max(ev.end_cycle for ev in events) == d["cycles"]


def test_plan_scale_ordering(capsys):
    res = [json.loads(run(capsys, "plan", "--json", "--scale", s)[1]) for s in ("1", "2", "4")]
    assert res[0]["l3_traffic_bytes"] < res[1]["l3_traffic_bytes"] < res[2]["l3_traffic_bytes"]
    assert res[0]["ms"] < res[1]["ms"] < res[2]["ms"]


def test_plan_hw_file_and_errors(capsys, tmp_path):
    hw = tmp_path / "hw.txt"
    code, _, _ = run(capsys, "plan", "--calibrate-ms", "130", "--save-hw", hw)
    assert code == 0 and "effective_macs_per_core_cycle" in hw.read_text()
    code, out, _ = run(capsys, "plan", "--hw", hw, "--json")
    assert abs(json.loads(out)["ms"] - 130) <= 1.3
    small = tmp_path / "small.txt"
    small.write_text("l1_bytes = 4096\n")
    code, _, err = run(capsys, "plan", "--hw", small)
    assert code == 5 and "neck" in err
    small.write_text("l9_bytes = 4096\n")
    assert run(capsys, "plan", "--hw", small)[0] == 3
    assert run(capsys, "plan", "--hw", tmp_path / "missing.txt")[0] == 3


def test_infer_deterministic_and_json(capsys, work):
    img = work / "ds/images/00000.ppm"
    outs = [run(capsys, "infer", img, "--weights", work / "q.seyw", "--json", "--conf", "0.05") for _ in range(2)]
    assert outs[0] == outs[1]
    code, out, _ = outs[0]
    assert code == 0
    for line in out.splitlines():
        d = json.loads(line)
        assert set(d) == {"class", "score", "cx", "cy", "w", "h"}
        assert 0 <= d["score"] <= 1


def test_infer_annotate(capsys, work, tmp_path):
    img = work / "ds/images/00001.ppm"
    out_img = tmp_path / "a.ppm"
    code, _, _ = run(capsys, "infer", img, "--weights", work / "q.seyw", "--conf", "0.01", "--annotate", out_img)
    assert code == 0
    assert read_ppm(out_img).shape == read_ppm(img).shape


def test_zero_model_scores(capsys, work):
    img = work / "ds/images/00000.ppm"
    # zero logits: objectness 0.5 times class prob 0.5, exactly at the default threshold
    code, out, _ = run(capsys, "infer", img, "--weights", work / "zero.seyw", "--json")
    assert code == 0 and out
    assert all(json.loads(line)["score"] == 0.25 for line in out.splitlines())
    code, out, _ = run(capsys, "infer", img, "--weights", work / "zero.seyw", "--json", "--conf", "0.26")
    assert code == 0 and out == ""


def test_infer_errors(capsys, work, tmp_path):
    assert run(capsys, "infer", tmp_path / "nope.ppm", "--weights", work / "q.seyw")[0] == 3
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P5\n1 1\n255\n\0")
    assert run(capsys, "infer", bad, "--weights", work / "q.seyw")[0] == 3
    img = work / "ds/images/00000.ppm"
    assert run(capsys, "infer", img, "--weights", work / "q.seyw", "--mode", "float")[0] == 4
    trunc = tmp_path / "t.seyw"
    trunc.write_bytes((work / "q.seyw").read_bytes()[:64])
    assert run(capsys, "infer", img, "--weights", trunc)[0] == 4


def test_eval_weights_and_detections(capsys, work, tmp_path):
    code, out, _ = run(capsys, "eval", work / "ds", "--weights", work / "q.seyw", "--json")
    assert code == 0 and 0 <= json.loads(out)["mAP"] <= 1
    # oracle detections straight from the labels
    lines = []
    for lab in sorted((work / "ds/labels").glob("*.txt")):
        for row in lab.read_text().splitlines():
            c, cx, cy, w, h = row.split()
            lines.append(json.dumps({"image": lab.stem, "class": int(c), "score": 1.0,
                                     "cx": float(cx), "cy": float(cy), "w": float(w), "h": float(h)}))
    dets = tmp_path / "d.jsonl"
    dets.write_text("\n".join(lines) + "\n")
    code, out, _ = run(capsys, "eval", work / "ds", "--detections", dets, "--json")
    assert code == 0 and abs(json.loads(out)["mAP"] - 1.0) <= 1e-9
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    assert json.loads(run(capsys, "eval", work / "ds", "--detections", empty, "--json")[1])["mAP"] == 0.0


def test_eval_malformed_label_names_file(capsys, work, tmp_path):
    import shutil
    ds = tmp_path / "ds"
    shutil.copytree(work / "ds", ds)
    (ds / "labels/00002.txt").write_text("0 0.5 0.5\n")
    code, _, err = run(capsys, "eval", ds, "--weights", work / "q.seyw")
    assert code == 3 and "00002.txt" in err


def test_quantize_errors(capsys, work, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run(capsys, "quantize", "--weights", work / "f.seyw", "--calib", empty, "--out", tmp_path / "x.seyw")[0] == 3
    zero = tmp_path / "zero"
    zero.mkdir()
    write_ppm(zero / "z.ppm", np.zeros((128, 128, 3), dtype=np.uint8))
    assert run(capsys, "quantize", "--weights", work / "f.seyw", "--calib", zero, "--out", tmp_path / "x.seyw")[0] == 3
    assert run(capsys, "quantize", "--weights", work / "q.seyw", "--calib", work / "ds", "--out", tmp_path / "x.seyw")[0] == 4


def test_synth_data_deterministic(capsys, tmp_path):
    for name in ("a", "b"):
        assert run(capsys, "synth-data", "--out", tmp_path / name, "--n", "3", "--seed", "9")[0] == 0
    for sub in ("manifest.txt", "images/00002.ppm", "labels/00002.txt"):
        assert (tmp_path / "a" / sub).read_bytes() == (tmp_path / "b" / sub).read_bytes()


def test_usage_errors(capsys):
    assert run(capsys, "frobnicate")[0] == 2
    assert run(capsys, "plan", "--scale", "x")[0] == 2
    assert run(capsys, "bench-report", "--baseline-latency", "1")[0] == 2
    assert run(capsys, "bench-report", *BENCH[1:3], "--baseline-cpu-mw", "1",
               "--candidate-latency", "0", "--candidate-cpu-mw", "1")[0] == 2


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("SEYOLO_THREADS", "1")
    assert worker_count() == 1
    monkeypatch.setenv("SEYOLO_THREADS", "zero")
    with pytest.raises(ValueError):
        worker_count()


def test_subprocess_entry_point_is_byte_identical(work):
    cmd = [sys.executable, "-m", "seyolo", "infer", str(work / "ds/images/00003.ppm"),
           "--weights", str(work / "q.seyw"), "--json", "--conf", "0.05"]
    runs = [subprocess.run(cmd, capture_output=True, env=dict(os.environ, SEYOLO_THREADS=t)) for t in ("1", "4")]
    assert runs[0].returncode == 0
    assert runs[0].stdout == runs[1].stdout
    bad = subprocess.run(cmd, capture_output=True, env=dict(os.environ, SEYOLO_THREADS="-3"))
    assert bad.returncode == 2
