import logging
from collections import OrderedDict
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from umc.config import Config
from umc.data.bev import BevGrid, rasterize_bev
from umc.errors import ParamError
from umc.models.encoder import conv_specs, encoder_forward, encoder_specs
from umc.modules.entropy_cs import SelectionMask, SelectionResult, make_query, select_regions
from umc.modules.gcgru import AgentState, collab_step
from umc.modules.geometry import Pose2, relative_pose
from umc.modules.interpolation import MaskedGrid, rbf_interpolate
from umc.modules.mgfe import DetectionOutput, detect_head, mgfe_forward
from umc.utils.checkpointing import ParamSet, ParamSpec


logger: logging.Logger = logging.getLogger(__name__)

# L2Norm scales and the RBF decay start from these constants.
L2NORM_SCALE = 10.0
INTERPOLATION_LAMBDA = 1.0

# Keeps untrained query maps away from zero.
QUERY_BIAS_FILL = 1.0


def build_param_specs(
    bev_channels: int,
    bev_height: int,
    ladder: Sequence[Sequence[int]],
    stem_channels: int = 16,
    query_channels: int = 64,
    edge_channels: Sequence[int] = (128, 32, 8),
) -> Dict[str, ParamSpec]:
    r"""
    Name and shape of every parameter of a :class:`CollaborativeDetector`.

    Parameters
    ----------
    bev_channels: int
        Number of height slabs of the BEV input.
    bev_height: int
        BEV grid height in cells, it fixes the number of encoder blocks.
    ladder: Sequence[Sequence[int]]
        Resolution ladder as ``(channels, height, width)``, coarse to fine.
    stem_channels: int, optional (default = 16)
    query_channels: int, optional (default = 64)
        Hidden channels of the query generator.
    edge_channels: Sequence[int], optional (default = (128, 32, 8))
        Hidden channels of the edge encoder, the output always has one channel.

    Returns
    -------
    Dict[str, ParamSpec]
        Specs keyed by the full dotted name, e.g. ``"level1.gcgru.reset.weight"``.
    """
    specs: Dict[str, ParamSpec] = OrderedDict()
    for name, spec in encoder_specs(bev_channels, stem_channels, ladder, bev_height).items():
        specs[f"encoder.{name}"] = spec

    for level, (channels, _, _) in enumerate(ladder):
        prefix = f"level{level}"

        specs.update(conv_specs(f"{prefix}.query.conv1", query_channels, channels))
        specs.update(conv_specs(f"{prefix}.query.conv2", 1, query_channels))
        specs[f"{prefix}.query.conv2.bias"] = ParamSpec((1,), query_channels, QUERY_BIAS_FILL)

        for gate in ("reset", "update"):
            specs.update(conv_specs(f"{prefix}.gcgru.{gate}", channels, 2 * channels, 3))
        edge_widths = [3 * channels] + list(edge_channels) + [1]
        for index, (in_width, out_width) in enumerate(zip(edge_widths[:-1], edge_widths[1:])):
            specs.update(conv_specs(f"{prefix}.gcgru.edge.conv{index + 1}", out_width, in_width))
        specs.update(conv_specs(f"{prefix}.gcgru.hidden", channels, channels, 3))

        specs.update(conv_specs(f"{prefix}.mgfe.guide", channels, channels))
        if level > 0:
            coarse_channels = ladder[level - 1][0]
            specs.update(
                conv_specs(f"{prefix}.mgfe.fuse", channels, coarse_channels + 2 * channels, 3)
            )
            specs[f"{prefix}.mgfe.norm_coarse"] = ParamSpec((coarse_channels,), 0, L2NORM_SCALE)
            specs[f"{prefix}.mgfe.norm_guided"] = ParamSpec((channels,), 0, L2NORM_SCALE)
            specs[f"{prefix}.mgfe.norm_collab"] = ParamSpec((channels,), 0, L2NORM_SCALE)

        specs[f"{prefix}.interp.lambda"] = ParamSpec((1,), 0, INTERPOLATION_LAMBDA)

    finest_channels = ladder[-1][0]
    specs.update(conv_specs("head.cls", 1, finest_channels, 3))
    specs.update(conv_specs("head.reg", 4, finest_channels, 3))
    return specs


class CollaborativeDetector(object):
    r"""
    The per-agent half of the collaborative pipeline, sharing one :class:`ParamSet` between all
    agents. It encodes a point set into the resolution ladder, produces queries, selects the
    regions a collaborator sends, reconstructs received sparse features, fuses them with the
    recurrent state and decodes boxes. Moving packets between agents (and the bandwidth
    ledger) is the job of :class:`~umc.evaluators.episode_evaluator.EpisodeEvaluator`.

    Parameters
    ----------
    params: ParamSet
        Every parameter named by :func:`build_param_specs`.
    bev: BevGrid
        BEV rasterization settings.
    ladder: Sequence[Sequence[int]]
        Resolution ladder as ``(channels, height, width)``, coarse to fine.
    selection_mode: str, optional (default = "topk")
    delta_s: float, optional (default = 0.5)
    delta_c: float, optional (default = 0.5)
    min_cells: int, optional (default = 1)
    cross_index_base: str, optional (default = "candidates")
    interpolation_radius: int, optional (default = 7)
    include_unobserved: bool, optional (default = True)
    score_threshold: float, optional (default = 0.5)
    nms_iou: float, optional (default = 0.5)
    gcgru_enabled: bool, optional (default = True)
        Fuse received features with the G-CGRU, otherwise the ego features stand in for the
        collaborative maps.
    mgfe_enabled: bool, optional (default = True)
        Enhance coarse to fine before the head, otherwise the head reads the finest
        collaborative map.
    """

    def __init__(
        self,
        params: ParamSet,
        bev: BevGrid,
        ladder: Sequence[Sequence[int]],
        selection_mode: str = "topk",
        delta_s: float = 0.5,
        delta_c: float = 0.5,
        min_cells: int = 1,
        cross_index_base: str = "candidates",
        interpolation_radius: int = 7,
        include_unobserved: bool = True,
        score_threshold: float = 0.5,
        nms_iou: float = 0.5,
        gcgru_enabled: bool = True,
        mgfe_enabled: bool = True,
    ):
        self._params = params
        self._bev = bev
        self._ladder = [tuple(int(size) for size in level) for level in ladder]

        self._selection_mode = selection_mode
        self._delta_s = delta_s
        self._delta_c = delta_c
        self._min_cells = min_cells
        self._cross_index_base = cross_index_base
        self._interpolation_radius = interpolation_radius
        self._include_unobserved = include_unobserved
        self._score_threshold = score_threshold
        self._nms_iou = nms_iou
        self._gcgru_enabled = gcgru_enabled
        self._mgfe_enabled = mgfe_enabled

    @classmethod
    def from_config(cls, config: Config, params: Optional[ParamSet] = None):
        r"""
        Instantiate this class directly from a :class:`~umc.config.Config`. Without explicit
        ``params`` they are read from ``PARAMS.PATH`` (batch norm folded, then validated), or
        initialized from ``RANDOM_SEED`` when the path is empty.
        """
        _C = config
        bev = BevGrid.from_config(_C)
        bev.check()
        specs = build_param_specs(
            bev_channels=bev.channels,
            bev_height=bev.height,
            ladder=_C.LADDER,
            stem_channels=_C.ENCODER.STEM_CHANNELS,
            query_channels=_C.QUERY.CHANNELS,
            edge_channels=_C.EDGE.CHANNELS,
        )
        if params is None:
            if _C.PARAMS.PATH:
                logger.info(f"Loading parameters from {_C.PARAMS.PATH}")
                params = ParamSet.load(_C.PARAMS.PATH).fold_batch_norm()
            else:
                params = ParamSet.random(specs, seed=_C.RANDOM_SEED)
        params.validate(specs)

        return cls(
            params=params,
            bev=bev,
            ladder=_C.LADDER,
            selection_mode=_C.SELECTION.MODE,
            delta_s=_C.SELECTION.DELTA_S,
            delta_c=_C.SELECTION.DELTA_C,
            min_cells=_C.SELECTION.MIN_CELLS,
            cross_index_base=_C.SELECTION.CROSS_INDEX_BASE,
            interpolation_radius=_C.INTERPOLATION.RADIUS,
            include_unobserved=_C.INTERPOLATION.INCLUDE_UNOBSERVED,
            score_threshold=_C.HEAD.SCORE_THRESHOLD,
            nms_iou=_C.HEAD.NMS_IOU,
            gcgru_enabled=_C.GCGRU.ENABLED,
            mgfe_enabled=_C.MGFE.ENABLED,
        )

    @property
    def params(self) -> ParamSet:
        return self._params

    @property
    def ladder(self) -> List[Tuple[int, int, int]]:
        return list(self._ladder)

    @property
    def num_levels(self) -> int:
        return len(self._ladder)

    def level_cell_size(self, level: int) -> float:
        return self._bev.extent / self._ladder[level][1]

    def initial_state(self, agent_id: int, pose: Pose2) -> AgentState:
        return AgentState.initial(agent_id, self._ladder, pose)

    def encode(self, points) -> List[torch.Tensor]:
        r"""Rasterize an agent's own point set and encode it, coarse to fine."""
        bev = rasterize_bev(points, self._bev)
        features = encoder_forward(bev, self._params.scope("encoder"), self.num_levels)
        for level, feature in enumerate(features):
            if tuple(feature.shape) != self._ladder[level]:
                raise ParamError(
                    f"Encoder level {level} has shape {tuple(feature.shape)}, "
                    f"ladder expects {self._ladder[level]}."
                )
        return features

    def query(self, features: Sequence[torch.Tensor]) -> List[torch.Tensor]:
        return [
            make_query(feature, self._params.scope(f"level{level}.query"))
            for level, feature in enumerate(features)
        ]

    def select(self, ego_query: torch.Tensor, own_query: torch.Tensor) -> SelectionResult:
        r"""Regions a collaborator sends, given the ego query aligned to its frame."""
        return select_regions(
            ego_query,
            own_query,
            self._delta_s,
            self._delta_c,
            min_cells=self._min_cells,
            mode=self._selection_mode,
            index_base=self._cross_index_base,
        )

    def full_selection(self, level: int) -> SelectionResult:
        _, height, width = self._ladder[level]
        full = SelectionMask.full(height, width)
        return SelectionResult(full, full, False)

    def reconstruct(self, masked: MaskedGrid, level: int) -> torch.Tensor:
        lam = self._params.get_scalar(f"level{level}.interp.lambda", INTERPOLATION_LAMBDA)
        return rbf_interpolate(
            masked,
            radius=self._interpolation_radius,
            lam=lam,
            include_unobserved=self._include_unobserved,
        )

    def fuse(
        self,
        state: AgentState,
        features: Sequence[torch.Tensor],
        neighbors: Sequence[Sequence[Tuple[int, torch.Tensor]]],
        pose: Pose2,
        timestep: int,
    ) -> Tuple[List[torch.Tensor], AgentState]:
        r"""
        One G-CGRU step on every level.

        Parameters
        ----------
        state: AgentState
            State of the ego after the previous timestep.
        features: Sequence[torch.Tensor]
            Ego features, coarse to fine.
        neighbors: Sequence[Sequence[Tuple[int, torch.Tensor]]]
            Per level, ``(agent_id, feature)`` of every collaborator in the ego frame.
        pose: Pose2
            Current world pose of the ego.
        timestep: int

        Returns
        -------
        Tuple[List[torch.Tensor], AgentState]
            Collaborative maps coarse to fine, and the advanced state.
        """
        state.check_next(timestep)
        if not self._gcgru_enabled:
            # Hidden grids stay as they were, only pose and time advance.
            return list(features), state.advanced(list(state.hidden), pose, timestep)
        pose_delta = relative_pose(state.pose, pose)

        collab_maps: List[torch.Tensor] = []
        hidden: List[torch.Tensor] = []
        for level in range(self.num_levels):
            collab_map, new_hidden = collab_step(
                state,
                features[level],
                neighbors[level],
                pose_delta,
                self._params.scope(f"level{level}.gcgru"),
                level,
                cell_size=self.level_cell_size(level),
            )
            collab_maps.append(collab_map)
            hidden.append(new_hidden)
        return collab_maps, state.advanced(hidden, pose, timestep)

    def detect(
        self, features: Sequence[torch.Tensor], collab_maps: Sequence[torch.Tensor]
    ) -> DetectionOutput:
        if self._mgfe_enabled:
            enhanced = mgfe_forward(features, collab_maps, self._params)
        else:
            enhanced = collab_maps[-1]
        return detect_head(
            enhanced,
            self._params.scope("head"),
            score_threshold=self._score_threshold,
            nms_iou=self._nms_iou,
            cell_size=self.level_cell_size(self.num_levels - 1),
        )
