import argparse
import csv
import json
import os

import pytest

from umc.cli import (
    EXIT_BAD_INPUT,
    EXIT_OK,
    SWEEP_FIELDS,
    cmd_eval,
    cmd_inspect_packet,
    cmd_run,
    cmd_sweep,
    main,
    parse_delta,
    parse_delta_pair,
    sweep_points,
)
from umc.comm.packet import SparsePacket, encode


RUN_FILES = (
    "detections.jsonl",
    "ground_truth.jsonl",
    "metrics.csv",
    "ledger.csv",
    "config.yml",
    "manifest.json",
)


def _read_bytes(path):
    with open(path, "rb") as binary_file:
        return binary_file.read()


def test_parse_delta():
    assert parse_delta("0.25") == 0.25
    assert parse_delta("50%") == 0.5
    assert parse_delta("1") == 1.0
    for text in ("0", "1.5", "-0.1", "abc", "%"):
        with pytest.raises(argparse.ArgumentTypeError):
            parse_delta(text)
    assert parse_delta_pair("0.5,20%") == (0.5, 0.2)
    with pytest.raises(argparse.ArgumentTypeError):
        parse_delta_pair("0.5")


def test_sweep_points():
    points = sweep_points([(0.5, 0.5)], [1.0, 0.5])
    assert points == [(0.5, 0.5), (1.0, 1.0), (1.0, 0.5), (0.5, 1.0)]
    assert sweep_points() == []


def test_run_writes_run_dir(tmp_path, small_config_yml):
    out_dir = str(tmp_path / "run")
    assert cmd_run(small_config_yml, out_dir, ["SELECTION.DELTA_S", 0.2], dump_packets=True) == EXIT_OK
    for name in RUN_FILES:
        assert os.path.isfile(os.path.join(out_dir, name))
    assert len(os.listdir(os.path.join(out_dir, "packets"))) == 8

    with open(os.path.join(out_dir, "manifest.json")) as manifest_file:
        manifest = json.load(manifest_file)
    assert manifest["delta_s"] == 0.2
    assert manifest["selection_enabled"] is True
    assert manifest["gcgru_enabled"] is True
    assert manifest["mgfe_enabled"] is True
    assert len(manifest["params_sha256"]) == 64
    assert manifest["comm_volume"] > 0


def test_manifest_records_fusion_switches(tmp_path, small_config_yml):
    out_dir = str(tmp_path / "plain")
    overrides = ["GCGRU.ENABLED", False, "MGFE.ENABLED", False, "SCENARIO.TIMESTEPS", 1]
    assert cmd_run(small_config_yml, out_dir, overrides) == EXIT_OK
    with open(os.path.join(out_dir, "manifest.json")) as manifest_file:
        manifest = json.load(manifest_file)
    assert manifest["gcgru_enabled"] is False
    assert manifest["mgfe_enabled"] is False


def test_run_is_reproducible_from_its_config(tmp_path, small_config_yml):
    first = str(tmp_path / "first")
    second = str(tmp_path / "second")
    assert cmd_run(small_config_yml, first) == EXIT_OK
    assert cmd_run(os.path.join(first, "config.yml"), second) == EXIT_OK
    for name in ("detections.jsonl", "metrics.csv", "ledger.csv", "ground_truth.jsonl"):
        assert _read_bytes(os.path.join(first, name)) == _read_bytes(os.path.join(second, name))


def test_sweep_writes_one_row_per_point(tmp_path, small_config_yml):
    out_dir = str(tmp_path / "sweep")
    assert cmd_sweep(small_config_yml, [(1.0, 1.0), (0.5, 0.2)], out_dir) == EXIT_OK
    assert os.path.isdir(os.path.join(out_dir, "ds0.5_dc0.2"))

    with open(os.path.join(out_dir, "sweep.csv")) as csv_file:
        rows = list(csv.DictReader(csv_file))
    assert [(row["delta_s"], row["delta_c"]) for row in rows] == [("1.0", "1.0"), ("0.5", "0.2")]
    assert set(SWEEP_FIELDS) <= set(rows[0])
    assert "AP@0.5" in rows[0]
    assert float(rows[1]["comm_volume"]) < float(rows[0]["comm_volume"])


def test_eval_rescores_a_run(tmp_path, small_config_yml):
    out_dir = str(tmp_path / "run")
    cmd_run(small_config_yml, out_dir)
    output = str(tmp_path / "rescored.csv")
    code = cmd_eval(
        os.path.join(out_dir, "detections.jsonl"),
        os.path.join(out_dir, "ground_truth.jsonl"),
        output,
        iou_thresholds=[0.5, 0.7],
        taus=[4],
    )
    assert code == EXIT_OK
    # The default thresholds and tau reproduce the metrics of the run itself.
    assert _read_bytes(output) == _read_bytes(os.path.join(out_dir, "metrics.csv"))

    cmd_eval(
        os.path.join(out_dir, "detections.jsonl"),
        os.path.join(out_dir, "ground_truth.jsonl"),
        output,
        taus=[2, 8],
    )
    with open(output) as csv_file:
        header = next(csv.reader(csv_file))
    assert header == ["tau", "metric", "iou", "value"]


def _metric_values(path):
    with open(path) as csv_file:
        return {(row["metric"], row["iou"]): float(row["value"]) for row in csv.DictReader(csv_file)}


def test_eval_perfect_and_empty_dumps(tmp_path):
    gt_path = tmp_path / "gt.jsonl"
    gt_path.write_text(
        json.dumps(
            {
                "frame": 0,
                "agent": 0,
                "objects": [
                    {"box": [0.0, 0.0, 4.0, 2.0], "points_sv": 10, "points_cv": 12},
                    {"box": [10.0, 0.0, 4.0, 2.0], "points_sv": 0, "points_cv": 8},
                ],
            }
        )
        + "\n"
    )
    perfect_path = tmp_path / "perfect.jsonl"
    perfect_path.write_text(
        json.dumps(
            {"frame": 0, "agent": 0, "boxes": [[0.0, 0.0, 4.0, 2.0, 0.9], [10.0, 0.0, 4.0, 2.0, 0.8]]}
        )
        + "\n"
    )
    empty_path = tmp_path / "empty.jsonl"
    empty_path.write_text(json.dumps({"frame": 0, "agent": 0, "boxes": []}) + "\n")

    output = str(tmp_path / "metrics.csv")
    assert cmd_eval(str(perfect_path), str(gt_path), output) == EXIT_OK
    values = _metric_values(output)
    for iou in ("0.5", "0.7"):
        assert values[("AP", iou)] == 1.0
        assert values[("ARSV", iou)] == 1.0
        assert values[("ARCV", iou)] == 1.0

    assert cmd_eval(str(empty_path), str(gt_path), output) == EXIT_OK
    values = _metric_values(output)
    assert all(value == 0.0 for value in values.values())
    assert ("ARCI", "0.5") not in values


def test_inspect_packet(tmp_path, capsys):
    packet = SparsePacket(
        sender_id=2,
        receiver_id=0,
        timestep=7,
        level=1,
        height=4,
        width=4,
        channels=2,
        rows=[0, 3],
        cols=[1, 2],
        values=[[1.0, 2.0], [3.0, 4.0]],
    )
    path = tmp_path / "packet.umcw"
    path.write_bytes(encode(packet))
    assert cmd_inspect_packet(str(path), max_entries=1) == EXIT_OK

    printed = capsys.readouterr().out
    assert "sender      : 2" in printed
    assert "timestep    : 7" in printed
    assert "entries     : 2 (12.50%)" in printed
    assert "(  0,   1): [1, 2]" in printed
    assert "... 1 more" in printed


def test_main_runs_with_overrides(tmp_path, small_config_yml):
    out_dir = str(tmp_path / "run")
    argv = [
        "run",
        "--config-yml", small_config_yml,
        "--out-dir", out_dir,
        "--delta-c", "20%",
        "--config-override", "SCENARIO.TIMESTEPS", "1",
    ]
    assert main(argv) == EXIT_OK
    with open(os.path.join(out_dir, "manifest.json")) as manifest_file:
        assert json.load(manifest_file)["delta_c"] == 0.2
    with open(os.path.join(out_dir, "detections.jsonl")) as jsonl_file:
        assert len(jsonl_file.readlines()) == 2


def test_main_exit_codes(tmp_path, small_config_yml, monkeypatch):
    missing = str(tmp_path / "missing.yml")
    assert main(["run", "--config-yml", missing, "--out-dir", str(tmp_path)]) == EXIT_BAD_INPUT

    bad_key = ["--config-override", "SCENARIO.NO_SUCH_KEY", "1"]
    argv = ["run", "--config-yml", small_config_yml, "--out-dir", str(tmp_path)] + bad_key
    assert main(argv) == EXIT_BAD_INPUT

    garbage = tmp_path / "garbage.umcw"
    garbage.write_bytes(b"not a packet")
    assert main(["inspect-packet", str(garbage)]) == EXIT_BAD_INPUT

    broken = tmp_path / "broken.jsonl"
    broken.write_text("{oops\n")
    argv = ["eval", "--detections", str(broken), "--ground-truth", str(broken), "--output", "x.csv"]
    assert main(argv) == EXIT_BAD_INPUT

    sweep = ["sweep", "--config-yml", small_config_yml, "--out-dir", str(tmp_path)]
    assert main(sweep) == EXIT_BAD_INPUT

    assert main([]) == EXIT_BAD_INPUT

    monkeypatch.setenv("UMC_THREADS", "many")
    assert main(["inspect-packet", str(garbage)]) == EXIT_BAD_INPUT
