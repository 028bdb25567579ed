r"""
Command-line entry point with four sub-commands::

    umc run            --config-yml CONFIG --out-dir DIR [--delta-s D] [--delta-c D] ...
    umc sweep          --config-yml CONFIG --out-dir DIR (--grid DS,DC ... | --deltas D ...)
    umc eval           --detections JSONL --ground-truth JSONL --output CSV [--iou ...] [--tau ...]
    umc inspect-packet PACKET [--max-entries N]

Exit codes are 0 on success, 1 on runtime failures and 2 on bad configuration or input. The
environment variable ``UMC_THREADS`` caps the number of intra-op threads.
"""
import argparse
import itertools
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

import torch
import yaml

import umc
from umc.comm.packet import decode
from umc.config import Config
from umc.data.readers import DetectionsReader, GroundTruthReader
from umc.data.writers import (
    write_detections_jsonl,
    write_ground_truth_jsonl,
    write_json,
    write_metrics_csv,
    write_table_csv,
)
from umc.errors import ConfigError, DecodeError, EmptyLedgerError, ParamError, ParseError, UmcError
from umc.evaluators.episode_evaluator import EpisodeReport, run_episode
from umc.models.collaborative_detector import CollaborativeDetector
from umc.utils.metrics import evaluate_frames, typed_frame


logger: logging.Logger = logging.getLogger(__name__)

EXIT_OK, EXIT_RUNTIME, EXIT_BAD_INPUT = 0, 1, 2

# Failures caused by what the user passed in rather than by the pipeline itself.
_BAD_INPUT_ERRORS = (ConfigError, ParseError, DecodeError, ParamError, FileNotFoundError)


def parse_delta(text: str) -> float:
    r"""A keep fraction in (0, 1], given either as a fraction or as a percentage ``"50%"``."""
    try:
        value = float(text[:-1]) / 100.0 if text.endswith("%") else float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid fraction {text!r}")
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"fraction {text!r} outside (0, 1]")
    return value


def parse_delta_pair(text: str) -> Tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected DS,DC, found {text!r}")
    return parse_delta(parts[0]), parse_delta(parts[1])


def load_config(config_path: str, overrides: Sequence[Any] = ()) -> Config:
    r"""Build a :class:`~umc.Config`, mapping every way it can fail to :class:`ConfigError`."""
    if not os.path.isfile(config_path):
        raise FileNotFoundError(f"Config file not found: {config_path}")
    try:
        return Config(config_path, list(overrides))
    except (KeyError, ValueError, TypeError, AssertionError, yaml.YAMLError) as error:
        raise ConfigError(f"Invalid config {config_path}: {error}")


def _delta_overrides(delta_s: Optional[float], delta_c: Optional[float]) -> List[Any]:
    overrides: List[Any] = []
    if delta_s is not None:
        overrides += ["SELECTION.DELTA_S", float(delta_s)]
    if delta_c is not None:
        overrides += ["SELECTION.DELTA_C", float(delta_c)]
    return overrides


def _comm_volume(report: EpisodeReport) -> Optional[float]:
    try:
        return report.comm_volume
    except EmptyLedgerError:
        return None


def write_run_dir(out_dir: str, config: Config, model: CollaborativeDetector, report: EpisodeReport):
    r"""Write every file of a run directory except packet dumps and tensorboard logs."""
    write_detections_jsonl(os.path.join(out_dir, "detections.jsonl"), report.detections)
    write_ground_truth_jsonl(os.path.join(out_dir, "ground_truth.jsonl"), report.ground_truth)
    write_metrics_csv(
        os.path.join(out_dir, "metrics.csv"), report.metric_rows(config.EVAL.IOU_THRESHOLDS)
    )
    report.ledger.write_csv(os.path.join(out_dir, "ledger.csv"))
    config.dump(os.path.join(out_dir, "config.yml"))
    write_json(
        os.path.join(out_dir, "manifest.json"),
        {
            "version": umc.__version__,
            "seed": config.RANDOM_SEED,
            "selection_enabled": bool(config.SELECTION.ENABLED),
            "selection_mode": config.SELECTION.MODE,
            "gcgru_enabled": bool(config.GCGRU.ENABLED),
            "mgfe_enabled": bool(config.MGFE.ENABLED),
            "delta_s": config.SELECTION.DELTA_S,
            "delta_c": config.SELECTION.DELTA_C,
            "ladder": [list(level) for level in config.LADDER],
            "params_path": config.PARAMS.PATH,
            "params_sha256": model.params.digest(),
            "config": config.dumps(),
            "comm_volume": _comm_volume(report),
            "selected_fraction": report.selected_fraction,
        },
    )


def _run_once(config: Config, out_dir: str, dump_packets: bool, tensorboard: bool) -> EpisodeReport:
    os.makedirs(out_dir, exist_ok=True)
    model = CollaborativeDetector.from_config(config)
    report = run_episode(
        config,
        model.params,
        serialization_dir=out_dir,
        dump_packets=dump_packets,
        tensorboard=tensorboard,
    )
    write_run_dir(out_dir, config, model, report)
    return report


def cmd_run(
    config_path: str,
    out_dir: str,
    overrides: Sequence[Any] = (),
    dump_packets: bool = False,
    tensorboard: bool = False,
) -> int:
    r"""Run one episode and write its run directory."""
    config = load_config(config_path, overrides)
    print(config)
    report = _run_once(config, out_dir, dump_packets, tensorboard)
    logger.info(f"Wrote run directory {out_dir} ({len(report.detections)} detection records).")
    return EXIT_OK


def sweep_points(
    grid: Sequence[Tuple[float, float]] = (), deltas: Sequence[float] = ()
) -> List[Tuple[float, float]]:
    r"""Explicit ``(delta_s, delta_c)`` pairs followed by the square grid over ``deltas``."""
    points = list(grid) + list(itertools.product(deltas, repeat=2))
    return list(dict.fromkeys(points))


SWEEP_FIELDS = [
    "delta_s",
    "delta_c",
    "comm_volume",
    "selected_fraction",
    "mean_feature_scalars",
]


def cmd_sweep(
    config_path: str,
    points: Sequence[Tuple[float, float]],
    out_dir: str,
    overrides: Sequence[Any] = (),
) -> int:
    r"""
    One sub-run per ``(delta_s, delta_c)`` point under ``out_dir/ds<ds>_dc<dc>``, plus an
    aggregate ``sweep.csv`` with one row per point.
    """
    if len(points) == 0:
        raise ConfigError("Sweep grid is empty.")
    base = load_config(config_path, overrides)
    print(base)

    records: List[Dict[str, Any]] = []
    metric_fields: List[str] = []
    for delta_s, delta_c in points:
        config = load_config(config_path, list(overrides) + _delta_overrides(delta_s, delta_c))
        point_dir = os.path.join(out_dir, f"ds{delta_s:g}_dc{delta_c:g}")
        report = _run_once(config, point_dir, dump_packets=False, tensorboard=False)

        record: Dict[str, Any] = {
            "delta_s": delta_s,
            "delta_c": delta_c,
            "comm_volume": _comm_volume(report),
            "selected_fraction": report.selected_fraction,
            "mean_feature_scalars": report.mean_feature_scalars,
        }
        for row in report.metric_rows(config.EVAL.IOU_THRESHOLDS):
            name = f"{row.metric}@{row.iou:g}"
            record[name] = row.value
            if name not in metric_fields:
                metric_fields.append(name)
        records.append(record)
        logger.info(
            f"Sweep point ({delta_s:g}, {delta_c:g}): selected fraction "
            f"{report.selected_fraction:.4f}, comm volume {record['comm_volume']}."
        )

    write_table_csv(os.path.join(out_dir, "sweep.csv"), SWEEP_FIELDS + metric_fields, records)
    return EXIT_OK


def cmd_eval(
    detections_path: str,
    gt_path: str,
    output_path: str,
    iou_thresholds: Sequence[float] = (0.5, 0.7),
    taus: Sequence[int] = (4,),
) -> int:
    r"""Score a detection dump against typed ground truth, one block of rows per ``tau``."""
    detections = DetectionsReader(detections_path)
    ground_truth = GroundTruthReader(gt_path)
    keys = sorted(set(detections.keys()) | set(ground_truth.keys()))

    rows = []
    for tau in taus:
        frames = [typed_frame(detections[key], ground_truth[key], tau) for key in keys]
        rows.extend(evaluate_frames(frames, iou_thresholds, tau))
    write_metrics_csv(output_path, rows)
    for row in rows:
        logger.info(f"tau={row.tau} {row.metric}@{row.iou:g}: {row.value:.4f}")
    return EXIT_OK


def cmd_inspect_packet(packet_path: str, max_entries: int = 10) -> int:
    r"""Pretty-print the header and the first entries of a ``.umcw`` file."""
    with open(packet_path, "rb") as packet_file:
        packet = decode(packet_file.read())

    print(f"{'sender':<12}: {packet.sender_id}")
    print(f"{'receiver':<12}: {packet.receiver_id}")
    print(f"{'timestep':<12}: {packet.timestep}")
    print(f"{'level':<12}: {packet.level}")
    print(f"{'grid':<12}: {packet.channels} x {packet.height} x {packet.width}")
    print(f"{'entries':<12}: {packet.count} ({packet.count / (packet.height * packet.width):.2%})")
    print(f"{'scalars':<12}: {packet.scalar_count}")
    print(f"{'bytes':<12}: {packet.nbytes}")
    for index, (row, col, values) in enumerate(packet.entries()):
        if index >= max_entries:
            print(f"... {packet.count - max_entries} more")
            break
        preview = ", ".join(f"{value:.4g}" for value in values[:4])
        suffix = ", ..." if len(values) > 4 else ""
        print(f"  ({row:>3}, {col:>3}): [{preview}{suffix}]")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser("umc", description="Collaborative perception simulation.")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    subparsers = parser.add_subparsers(dest="command")

    def add_config_arguments(subparser: argparse.ArgumentParser):
        subparser.add_argument("--config-yml", required=True, help="Path to a config file.")
        subparser.add_argument("--out-dir", required=True, help="Directory for all outputs.")
        subparser.add_argument(
            "--config-override",
            default=[],
            nargs="*",
            help="A sequence of key-value pairs specifying certain config arguments (with "
            "dict-like nesting) using a dot operator.",
        )

    run_parser = subparsers.add_parser("run", help="Run one episode.")
    add_config_arguments(run_parser)
    run_parser.add_argument("--delta-s", type=parse_delta, help="Self-select keep fraction.")
    run_parser.add_argument("--delta-c", type=parse_delta, help="Cross-select keep fraction.")
    run_parser.add_argument(
        "--dump-packets", action="store_true", help="Write every packet under out-dir/packets."
    )
    run_parser.add_argument(
        "--tensorboard", action="store_true", help="Log per-timestep scalars to tensorboard."
    )

    sweep_parser = subparsers.add_parser("sweep", help="Run one episode per (delta_s, delta_c).")
    add_config_arguments(sweep_parser)
    sweep_parser.add_argument(
        "--grid", default=[], nargs="*", type=parse_delta_pair, help="Points as DS,DC."
    )
    sweep_parser.add_argument(
        "--deltas", default=[], nargs="*", type=parse_delta, help="Square grid over these values."
    )

    eval_parser = subparsers.add_parser("eval", help="Score a detection dump.")
    eval_parser.add_argument("--detections", required=True, help="Detections JSONL.")
    eval_parser.add_argument("--ground-truth", required=True, help="Typed ground-truth JSONL.")
    eval_parser.add_argument("--output", required=True, help="Metrics CSV to write.")
    eval_parser.add_argument("--iou", default=[0.5, 0.7], nargs="+", type=float)
    eval_parser.add_argument("--tau", default=[4], nargs="+", type=int)

    inspect_parser = subparsers.add_parser("inspect-packet", help="Pretty-print a .umcw file.")
    inspect_parser.add_argument("packet", help="Path to a .umcw file.")
    inspect_parser.add_argument("--max-entries", default=10, type=int)
    return parser


def _set_threads():
    threads = os.environ.get("UMC_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(int(threads), 1))
        except ValueError:
            raise ConfigError(f"UMC_THREADS must be an integer, found {threads!r}.")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    _A = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if _A.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if _A.command is None:
        parser.print_help()
        return EXIT_BAD_INPUT

    for arg in vars(_A):
        print("{:<20}: {}".format(arg, getattr(_A, arg)))

    try:
        _set_threads()
        if _A.command == "run":
            overrides = list(_A.config_override) + _delta_overrides(_A.delta_s, _A.delta_c)
            return cmd_run(_A.config_yml, _A.out_dir, overrides, _A.dump_packets, _A.tensorboard)
        if _A.command == "sweep":
            points = sweep_points(_A.grid, _A.deltas)
            return cmd_sweep(_A.config_yml, points, _A.out_dir, _A.config_override)
        if _A.command == "eval":
            return cmd_eval(_A.detections, _A.ground_truth, _A.output, _A.iou, _A.tau)
        return cmd_inspect_packet(_A.packet, _A.max_entries)
    except _BAD_INPUT_ERRORS as error:
        logger.error(str(error))
        return EXIT_BAD_INPUT
    except (UmcError, RuntimeError, ValueError, OSError) as error:
        logger.error(f"{type(error).__name__}: {error}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
