import itertools
import math
import os

import pytest

from umc.comm.packet import decode
from umc.config import Config
from umc.data.writers import write_detections_jsonl
from umc.evaluators import EpisodeEvaluator, run_episode
from umc.evaluators.episode_evaluator import BROADCAST, packet_filename
from umc.models.collaborative_detector import CollaborativeDetector


def _detections_bytes(report, path):
    write_detections_jsonl(str(path), report.detections)
    with open(path, "rb") as jsonl_file:
        return jsonl_file.read()


def test_report_covers_every_frame_and_agent(small_config, small_params):
    report = run_episode(small_config, small_params)
    keys = [key for key, _ in report.detections]
    assert keys == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert [key for key, _ in report.ground_truth] == keys

    rows = report.metric_rows([0.5, 0.7])
    assert [row.metric for row in rows if row.metric == "AP"] == ["AP", "AP"]
    assert all(0.0 <= row.value <= 1.0 for row in rows)


def test_query_broadcasts_and_conservation(small_config, small_params):
    report = run_episode(small_config, small_params)
    ledger = report.ledger
    broadcasts = [record for record in ledger.transfers if record.receiver == BROADCAST]
    # One query per level, per agent and timestep.
    assert len(broadcasts) == 2 * 2 * 2
    assert sum(record.query_scalars for record in broadcasts) == 4 * (64 + 256)

    assert len(ledger.feature_transfers()) == 2 * 2 * 2
    assert ledger.sent_feature_scalars == ledger.received_feature_scalars > 0
    assert math.isfinite(report.comm_volume)


def test_bandwidth_ratio_of_half_selection(small_params, make_config):
    selected = run_episode(make_config("SELECTION.DELTA_S", 0.5, "SELECTION.DELTA_C", 0.5), small_params)
    everything = run_episode(make_config("SELECTION.DELTA_S", 1.0, "SELECTION.DELTA_C", 1.0), small_params)
    # Per pair, 17 of 64 coarse and 65 of 256 fine cells against the full grids.
    ratio = selected.mean_feature_scalars / everything.mean_feature_scalars
    assert 0.23 <= ratio <= 0.27
    assert everything.mean_feature_scalars == (64 * 64 + 32 * 256) / 2


def test_bandwidth_ratio_on_desk_episode():
    # Four agents over twenty timesteps, the default desk setting.
    selected = run_episode(Config(None, ["SELECTION.DELTA_S", 0.5, "SELECTION.DELTA_C", 0.5]))
    everything = run_episode(Config(None, ["SELECTION.DELTA_S", 1.0, "SELECTION.DELTA_C", 1.0]))
    assert len(selected.detections) == 4 * 20
    ratio = selected.mean_feature_scalars / everything.mean_feature_scalars
    assert 0.23 <= ratio <= 0.27


def test_full_selection_matches_disabled_selection(tmp_path, small_params, make_config):
    full = run_episode(make_config("SELECTION.DELTA_S", 1.0, "SELECTION.DELTA_C", 1.0), small_params)
    disabled = run_episode(make_config("SELECTION.ENABLED", False), small_params)

    assert _detections_bytes(full, tmp_path / "full.jsonl") == _detections_bytes(
        disabled, tmp_path / "disabled.jsonl"
    )
    assert full.ledger.sent_feature_scalars == disabled.ledger.sent_feature_scalars
    # Without selection no queries are broadcast.
    assert all(record.query_scalars == 0 for record in disabled.ledger.transfers)
    assert disabled.selected_fraction == 1.0


def _check_sweep(config_for):
    deltas = [1.0, 0.5, 0.2, 0.1]
    volumes = {}
    for delta_s, delta_c in itertools.product(deltas, deltas):
        report = run_episode(config_for("SELECTION.DELTA_S", delta_s, "SELECTION.DELTA_C", delta_c))
        volumes[(delta_s, delta_c)] = report.comm_volume
        assert abs(report.selected_fraction - delta_s * delta_c) <= 2 / 64

    for larger, smaller in zip(deltas[:-1], deltas[1:]):
        for other in deltas:
            assert volumes[(smaller, other)] <= volumes[(larger, other)] + 1e-12
            assert volumes[(other, smaller)] <= volumes[(other, larger)] + 1e-12


def test_sweep_is_monotone(make_config):
    _check_sweep(make_config)


def test_sweep_is_monotone_on_desk_episode():
    # Four agents and the desk ladder, over a short episode.
    _check_sweep(lambda *overrides: Config(None, ["SCENARIO.TIMESTEPS", 3] + list(overrides)))


def test_skipped_collaborators_send_nothing(small_params, make_config):
    report = run_episode(make_config("SELECTION.MIN_CELLS", 1000), small_params)
    assert report.ledger.sent_feature_scalars == 0
    assert report.selected_fraction == 0.0
    assert all(record.skipped for record in report.ledger.feature_transfers())
    # Only the queries remain: 320 scalars per timestep for each of the two agents.
    assert report.comm_volume == pytest.approx(math.log(2 * 320))
    assert len(report.detections) == 4


def test_packet_dumps(tmp_path, small_config, small_params):
    run_episode(small_config, small_params, serialization_dir=str(tmp_path), dump_packets=True)
    packets_dir = tmp_path / "packets"
    filename = packet_filename(1, 0, 1, 1)
    assert filename == "t1_s0_r1_l1.umcw"
    assert len(os.listdir(packets_dir)) == 8

    packet = decode((packets_dir / filename).read_bytes())
    assert packet.header_fields()[:4] == (0, 1, 1, 1)
    assert (packet.height, packet.width, packet.channels) == (16, 16, 32)


def test_tensorboard_logs(tmp_path, small_config, small_params):
    run_episode(small_config, small_params, serialization_dir=str(tmp_path), tensorboard=True)
    assert len(os.listdir(tmp_path / "tensorboard")) > 0


def test_outputs_need_a_serialization_dir(small_config):
    with pytest.raises(ValueError):
        EpisodeEvaluator(small_config, dump_packets=True)
    with pytest.raises(ValueError):
        EpisodeEvaluator(small_config, tensorboard=True)


def test_evaluate_prefix_of_episode(small_config, small_params):
    model = CollaborativeDetector.from_config(small_config, small_params)
    report = EpisodeEvaluator(small_config, model).evaluate(num_frames=1)
    assert [key for key, _ in report.detections] == [(0, 0), (0, 1)]


def test_tensorboard_writer_is_closed_when_the_episode_fails(
    tmp_path, small_config, small_params, monkeypatch
):
    model = CollaborativeDetector.from_config(small_config, small_params)
    evaluator = EpisodeEvaluator(small_config, model, serialization_dir=str(tmp_path), tensorboard=True)
    writer = evaluator._tensorboard_writer
    closed = []
    close = writer.close
    monkeypatch.setattr(writer, "close", lambda: closed.append(True) or close())

    def broken_detect(features, collab_maps):
        raise RuntimeError("head failed")

    monkeypatch.setattr(model, "detect", broken_detect)
    with pytest.raises(RuntimeError):
        evaluator.evaluate()
    assert closed == [True]


@pytest.mark.parametrize("switch", ["GCGRU.ENABLED", "MGFE.ENABLED"])
def test_fusion_switches_change_detections_not_traffic(tmp_path, small_params, make_config, switch):
    fused = run_episode(make_config("HEAD.SCORE_THRESHOLD", 0.0), small_params)
    plain = run_episode(make_config("HEAD.SCORE_THRESHOLD", 0.0, switch, False), small_params)
    assert _detections_bytes(fused, tmp_path / "fused.jsonl") != _detections_bytes(
        plain, tmp_path / "plain.jsonl"
    )
    assert plain.ledger.sent_feature_scalars == fused.ledger.sent_feature_scalars
    assert plain.comm_volume == fused.comm_volume


def test_without_gcgru_received_features_are_ignored(tmp_path, small_params, make_config):
    received = run_episode(make_config("GCGRU.ENABLED", False), small_params)
    skipped = run_episode(make_config("GCGRU.ENABLED", False, "SELECTION.MIN_CELLS", 1000), small_params)
    assert skipped.ledger.sent_feature_scalars == 0 < received.ledger.sent_feature_scalars
    assert _detections_bytes(received, tmp_path / "received.jsonl") == _detections_bytes(
        skipped, tmp_path / "skipped.jsonl"
    )
