import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import torch
from tensorboardX import SummaryWriter

from umc.comm.ledger import CommLedger, communication_volume, record_transfer
from umc.comm.packet import decode, encode
from umc.config import Config
from umc.data.scenario import ScenarioConfig, SceneFrame, gen_scenario
from umc.models.collaborative_detector import CollaborativeDetector
from umc.modules.entropy_cs import gather_sparse
from umc.modules.gcgru import AgentState
from umc.modules.geometry import relative_pose, warp_grid
from umc.modules.interpolation import scatter_to_grid
from umc.utils.checkpointing import ParamSet
from umc.utils.metrics import EvalFrame, GtObject, MetricRow, Prediction, evaluate_frames, typed_frame
from ._evaluator import _Evaluator


logger: logging.Logger = logging.getLogger(__name__)

# Receiver id of a query broadcast.
BROADCAST = -1

FrameKey = Tuple[int, int]


def packet_filename(timestep: int, sender: int, receiver: int, level: int) -> str:
    return f"t{timestep}_s{sender}_r{receiver}_l{level}.umcw"


@dataclass
class EpisodeReport:
    r"""
    Everything an episode produced.

    Parameters
    ----------
    detections: List[Tuple[FrameKey, List[Prediction]]]
        Decoded boxes of every ``(frame, agent)`` pair, in the agent's frame.
    ground_truth: List[Tuple[FrameKey, List[GtObject]]]
        Ground truth of every ``(frame, agent)`` pair, in the agent's frame.
    ledger: CommLedger
        Every transfer of the episode.
    selected_fractions: List[float]
        Fraction of cells transmitted by every feature transfer, skipped ones included as 0.
    tau: int
        Visibility threshold the ground truth was labelled with.
    log_base: float
        Base of the logarithm in :attr:`comm_volume`.
    """

    detections: List[Tuple[FrameKey, List[Prediction]]] = field(default_factory=list)
    ground_truth: List[Tuple[FrameKey, List[GtObject]]] = field(default_factory=list)
    ledger: CommLedger = field(default_factory=CommLedger)
    selected_fractions: List[float] = field(default_factory=list)
    tau: int = 4
    log_base: float = math.e

    def eval_frames(self, tau: Optional[int] = None) -> List[EvalFrame]:
        tau = self.tau if tau is None else tau
        detections = dict(self.detections)
        return [typed_frame(detections.get(key, []), gts, tau) for key, gts in self.ground_truth]

    def metric_rows(self, iou_thresholds: Sequence[float], tau: Optional[int] = None) -> List[MetricRow]:
        tau = self.tau if tau is None else tau
        return evaluate_frames(self.eval_frames(tau), iou_thresholds, tau)

    @property
    def comm_volume(self) -> float:
        return communication_volume(self.ledger, self.log_base)

    @property
    def selected_fraction(self) -> float:
        r"""Mean fraction of cells per feature transfer."""
        if len(self.selected_fractions) == 0:
            return 0.0
        return sum(self.selected_fractions) / len(self.selected_fractions)

    @property
    def mean_feature_scalars(self) -> float:
        r"""Mean feature scalars per feature transfer."""
        transfers = self.ledger.feature_transfers()
        if len(transfers) == 0:
            return 0.0
        return sum(record.feature_scalars for record in transfers) / len(transfers)


class EpisodeEvaluator(_Evaluator):
    r"""
    Runs the collaborative pipeline over a simulated episode. At every timestep, every agent
    encodes its own point set and broadcasts one query per level; every collaborator selects,
    gathers and encodes the regions for every ego; the ego decodes, reconstructs and aligns
    them, advances its G-CGRU state and decodes boxes.

    Parameters
    ----------
    config: Config
        A :class:`~umc.Config` object with all the relevant configuration parameters.
    model: CollaborativeDetector, optional (default = None)
        Shared model of all agents, built with :meth:`CollaborativeDetector.from_config` if
        ``None``.
    serialization_dir: str, optional (default = None)
        Directory for packet dumps and tensorboard logs.
    dump_packets: bool, optional (default = False)
        Whether to write every transmitted packet to ``serialization_dir/packets``.
    tensorboard: bool, optional (default = False)
        Whether to log per-timestep scalars to ``serialization_dir/tensorboard``.

    Examples
    --------
    >>> config = Config("configs/desk_scale.yml", ["SCENARIO.TIMESTEPS", 5])
    >>> report = EpisodeEvaluator(config).evaluate()
    >>> report.metric_rows([0.5, 0.7])
    """

    def __init__(
        self,
        config: Config,
        model: Optional[CollaborativeDetector] = None,
        serialization_dir: Optional[str] = None,
        dump_packets: bool = False,
        tensorboard: bool = False,
    ):
        self._C = config
        self._scenario = ScenarioConfig.from_config(self._C)
        super().__init__(config=config, frames=gen_scenario(self._scenario))

        self._model = model or CollaborativeDetector.from_config(self._C)
        self._selection_enabled = bool(self._C.SELECTION.ENABLED)
        if not self._selection_enabled:
            logger.debug("Selection disabled, every region of every level is transmitted.")
        if not self._C.GCGRU.ENABLED:
            logger.debug("G-CGRU disabled, received features are exchanged but not fused.")
        if not self._C.MGFE.ENABLED:
            logger.debug("MGFE disabled, the head reads the finest collaborative map.")

        self._packets_dir: Optional[str] = None
        self._tensorboard_writer: Optional[SummaryWriter] = None
        if (dump_packets or tensorboard) and serialization_dir is None:
            raise ValueError("Packet dumps and tensorboard logs need a serialization_dir.")
        if dump_packets:
            self._packets_dir = os.path.join(serialization_dir, "packets")
            os.makedirs(self._packets_dir, exist_ok=True)
        if tensorboard:
            self._tensorboard_writer = SummaryWriter(
                log_dir=os.path.join(serialization_dir, "tensorboard")
            )

        first_poses = self._frames[0].agent_poses
        self._states: List[AgentState] = [
            self._model.initial_state(agent, first_poses[agent])
            for agent in range(self._scenario.num_agents)
        ]
        self._previous: Optional[SceneFrame] = None
        self._result = EpisodeReport(tau=self._scenario.tau, log_base=float(self._C.COMM.LOG_BASE))

    @property
    def model(self) -> CollaborativeDetector:
        return self._model

    @property
    def ledger(self) -> CommLedger:
        return self._result.ledger

    def evaluate(self, num_frames: Optional[int] = None) -> EpisodeReport:
        try:
            return super().evaluate(num_frames)
        finally:
            if self._tensorboard_writer is not None:
                self._tensorboard_writer.close()

    def _do_iteration(self, frame: SceneFrame) -> Dict[str, Any]:
        timestep = frame.timestep
        num_agents = len(frame.agent_poses)
        ledger = self._result.ledger

        features = [self._model.encode(frame.point_sets[agent]) for agent in range(num_agents)]
        queries: List[List[torch.Tensor]] = []
        if self._selection_enabled:
            queries = [self._model.query(agent_features) for agent_features in features]
            for ego in range(num_agents):
                for query in queries[ego]:
                    record_transfer(ledger, ego, BROADCAST, timestep, None, query.numel())

        fractions: List[float] = []
        skipped = 0
        for ego in range(num_agents):
            ego_pose = frame.agent_poses[ego]
            neighbors: List[List[Tuple[int, torch.Tensor]]] = [[] for _ in features[ego]]

            for sender in range(num_agents):
                if sender == ego:
                    continue
                sender_pose = frame.agent_poses[sender]
                for level in range(self._model.num_levels):
                    cell_size = self._model.level_cell_size(level)
                    if self._selection_enabled:
                        ego_query = warp_grid(
                            queries[ego][level].unsqueeze(0),
                            relative_pose(ego_pose, sender_pose),
                            cell_size,
                        )[0]
                        selection = self._model.select(ego_query, queries[sender][level])
                    else:
                        selection = self._model.full_selection(level)

                    packet = gather_sparse(
                        features[sender][level], selection.mask, sender, ego, timestep, level
                    )
                    record_transfer(ledger, sender, ego, timestep, packet, skipped=selection.skipped)
                    fractions.append(selection.mask.fraction)
                    if selection.skipped:
                        skipped += 1
                        continue

                    data = encode(packet)
                    if self._packets_dir is not None:
                        filename = packet_filename(timestep, sender, ego, level)
                        with open(os.path.join(self._packets_dir, filename), "wb") as packet_file:
                            packet_file.write(data)

                    received = decode(data)
                    ledger.record_receipt(ego, timestep, received.scalar_count)
                    dense = self._model.reconstruct(scatter_to_grid(received), level)
                    aligned = warp_grid(dense, relative_pose(sender_pose, ego_pose), cell_size)
                    neighbors[level].append((sender, aligned))

            collab_maps, self._states[ego] = self._model.fuse(
                self._states[ego], features[ego], neighbors, ego_pose, timestep
            )
            output = self._model.detect(features[ego], collab_maps)

            key = (timestep, ego)
            self._result.detections.append((key, output.decoded))
            self._result.ground_truth.append(
                (
                    key,
                    frame.ground_truth(ego, self._scenario.bev, self._scenario.tau, self._previous),
                )
            )

        self._previous = frame
        self._result.selected_fractions.extend(fractions)

        stats = {
            "comm/feature_scalars": sum(
                counter.feature_scalars for (_, t), counter in ledger if t == timestep
            ),
            "comm/query_scalars": sum(
                counter.query_scalars for (_, t), counter in ledger if t == timestep
            ),
            "selection/fraction": sum(fractions) / len(fractions) if fractions else 0.0,
            "selection/skipped": skipped,
        }
        if self._tensorboard_writer is not None:
            for name, value in stats.items():
                self._tensorboard_writer.add_scalar(name, value, timestep)
        return stats

    def _report(self) -> EpisodeReport:
        logger.info(
            f"Episode done: {len(self._result.ledger)} transfers, mean selected fraction "
            f"{self._result.selected_fraction:.4f}."
        )
        return self._result


def run_episode(
    config: Config,
    params: Optional[ParamSet] = None,
    serialization_dir: Optional[str] = None,
    dump_packets: bool = False,
    tensorboard: bool = False,
) -> EpisodeReport:
    r"""
    Simulate the episode described by ``config`` and run the collaborative pipeline on it.

    Parameters
    ----------
    config: Config
        Scenario, model and evaluation settings.
    params: ParamSet, optional (default = None)
        Shared parameters, see :meth:`CollaborativeDetector.from_config` for the fallback.
    """
    model = CollaborativeDetector.from_config(config, params)
    evaluator = EpisodeEvaluator(
        config,
        model,
        serialization_dir=serialization_dir,
        dump_packets=dump_packets,
        tensorboard=tensorboard,
    )
    return evaluator.evaluate()
