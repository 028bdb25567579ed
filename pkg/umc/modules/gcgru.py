r"""
Graph-based collaborative GRU, one forward step per resolution level.

The ego agent keeps a hidden grid per level. At every timestep the hidden grid is aligned to
the current ego pose, two gates are computed from it and the ego feature, neighbour features are
weighted per cell by a softmax over learned edge maps, and the aggregate is blended with the
aligned hidden grid into the collaborative map ``E``.
"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import torch

from umc.errors import ShapeError, StaleStateError
from umc.modules import functional as UF
from umc.modules.geometry import Pose2, warp_grid
from umc.utils.checkpointing import ParamSet


GATE_NAMES = ("reset", "update")
EDGE_LAYERS = ("conv1", "conv2", "conv3", "conv4")


@dataclass
class AgentState:
    r"""
    Recurrent state of one ego agent.

    Parameters
    ----------
    agent_id: int
    hidden: List[torch.Tensor]
        One hidden grid per ladder level, coarse to fine.
    pose: Pose2
        World pose at ``timestep``.
    timestep: int, optional (default = None)
        Last timestep the state was advanced to, ``None`` before the first step.
    """

    agent_id: int
    hidden: List[torch.Tensor]
    pose: Pose2 = field(default_factory=Pose2)
    timestep: Optional[int] = None

    @classmethod
    def initial(
        cls, agent_id: int, ladder: Sequence[Sequence[int]], pose: Optional[Pose2] = None
    ) -> "AgentState":
        r"""Zero hidden grids for every ``(channels, height, width)`` entry of the ladder."""
        hidden = [torch.zeros(*level, dtype=torch.float64) for level in ladder]
        return cls(agent_id=agent_id, hidden=hidden, pose=pose or Pose2())

    def check_next(self, timestep: int):
        r"""Raise :class:`~umc.errors.StaleStateError` unless ``timestep`` directly follows."""
        if self.timestep is not None and timestep - self.timestep != 1:
            raise StaleStateError(
                f"Agent {self.agent_id} is at timestep {self.timestep}, cannot step to {timestep}."
            )

    def advanced(self, hidden: List[torch.Tensor], pose: Pose2, timestep: int) -> "AgentState":
        self.check_next(timestep)
        return AgentState(agent_id=self.agent_id, hidden=hidden, pose=pose, timestep=timestep)


def _check_same(grids: Sequence[torch.Tensor], what: str):
    for grid in grids:
        UF.check_grid(grid, what)
        if grid.shape != grids[0].shape:
            raise ShapeError(
                f"{what} dimensions disagree: {tuple(grid.shape)} vs {tuple(grids[0].shape)}."
            )


def gate_forward(
    h: torch.Tensor, f: torch.Tensor, params: ParamSet, gate_name: str
) -> torch.Tensor:
    r"""
    Reset or update gate. A 3x3 convolution over ``[h; f]`` yields blend weights ``W``, and the
    gate is ``sigmoid(W * h + (1 - W) * f)``.

    Parameters
    ----------
    h: torch.Tensor
        Aligned hidden grid of shape (C, H, W).
    f: torch.Tensor
        Ego feature of the same shape.
    params: ParamSet
        G-CGRU parameters holding ``<gate_name>.weight`` (C, 2C, 3, 3) and
        ``<gate_name>.bias`` (C, ).
    gate_name: str
        ``"reset"`` or ``"update"``, the gates share structure but not weights.
    """
    _check_same([h, f], "gate input")
    # shape: (channels, height, width)
    blend = UF.sigmoid(
        UF.conv2d(
            torch.cat([h, f], dim=0),
            params[f"{gate_name}.weight"],
            params[f"{gate_name}.bias"],
            padding=1,
        )
    )
    return UF.sigmoid(blend * h + (1 - blend) * f)


def edge_weight(
    h_reset: torch.Tensor, f_neighbor: torch.Tensor, f_ego: torch.Tensor, params: ParamSet
) -> torch.Tensor:
    r"""
    Unnormalized edge map from one agent to the ego: four pointwise convolutions reduce
    ``[h_reset; f_neighbor; f_ego]`` from 3C channels to one, each followed by a ReLU.

    Returns
    -------
    torch.Tensor
        Non-negative map of shape (height, width).
    """
    _check_same([h_reset, f_neighbor, f_ego], "edge input")
    output = torch.cat([h_reset, f_neighbor, f_ego], dim=0)
    for layer in EDGE_LAYERS:
        output = UF.relu(
            UF.conv2d(output, params[f"edge.{layer}.weight"], params[f"edge.{layer}.bias"])
        )
    if output.size(0) != 1:
        raise ShapeError(f"Edge encoder must output one channel, found {output.size(0)}.")
    return output[0]


def collab_forward(
    hidden: torch.Tensor,
    f_ego: torch.Tensor,
    neighbors: Sequence[Tuple[int, torch.Tensor]],
    pose_delta: Pose2,
    params: ParamSet,
    cell_size: float = 1.0,
    ego_id: int = 0,
) -> Dict[str, Any]:
    r"""
    One G-CGRU step with every intermediate exposed.

    Parameters
    ----------
    hidden: torch.Tensor
        Hidden grid of the previous timestep, in the previous ego frame.
    f_ego: torch.Tensor
        Current ego feature.
    neighbors: Sequence[Tuple[int, torch.Tensor]]
        ``(agent_id, feature)`` of every collaborator, already aligned to the ego frame and
        reconstructed to a dense grid. May be empty.
    pose_delta: Pose2
        Transform from the previous ego frame to the current one.
    params: ParamSet
        Parameters of this level's G-CGRU.
    cell_size: float, optional (default = 1.0)
        Metric cell size of this level.
    ego_id: int, optional (default = 0)
        Agent id of the ego, it must not appear among the neighbours.

    Returns
    -------
    Dict[str, Any]
        ``aligned_hidden``, ``reset``, ``update``, ``reset_hidden``, ``edge_weights`` (list of
        ``(agent_id, normalized (H, W) map)`` with the ego first), ``aggregated`` (C),
        ``collaborative`` (E) and ``hidden`` (the new hidden grid).
    """
    _check_same([hidden, f_ego] + [feature for _, feature in neighbors], "G-CGRU input")
    neighbor_ids = [agent_id for agent_id, _ in neighbors]
    if len(set(neighbor_ids)) != len(neighbor_ids) or ego_id in neighbor_ids:
        raise ValueError(f"Neighbour ids must be unique and differ from the ego: {neighbor_ids}")

    aligned_hidden = warp_grid(hidden, pose_delta, cell_size)
    reset = gate_forward(aligned_hidden, f_ego, params, "reset")
    update = gate_forward(aligned_hidden, f_ego, params, "update")
    reset_hidden = aligned_hidden * reset

    edge_weights: List[Tuple[int, torch.Tensor]] = []
    if len(neighbors) == 0:
        # An isolated ego has nothing to aggregate.
        aggregated = torch.zeros_like(f_ego)
    else:
        # Ego self-edge first, neighbours in id order.
        stack = [(ego_id, f_ego)] + sorted(neighbors, key=lambda item: item[0])
        raw = [edge_weight(reset_hidden, feature, f_ego, params) for _, feature in stack]
        normalized = UF.softmax_over_stack([edge.unsqueeze(0) for edge in raw])

        aggregated = torch.zeros_like(f_ego)
        for (agent_id, feature), weight in zip(stack, normalized):
            # Broadcast along the channel dimension.
            aggregated = aggregated + weight * feature
            edge_weights.append((agent_id, weight[0]))

    collaborative = update * aggregated + (1 - update) * aligned_hidden
    new_hidden = UF.conv2d(
        collaborative, params["hidden.weight"], params["hidden.bias"], padding=1
    )
    return {
        "aligned_hidden": aligned_hidden,
        "reset": reset,
        "update": update,
        "reset_hidden": reset_hidden,
        "edge_weights": edge_weights,
        "aggregated": aggregated,
        "collaborative": collaborative,
        "hidden": new_hidden,
    }


def collab_step(
    state: AgentState,
    f_ego: torch.Tensor,
    neighbors: Sequence[Tuple[int, torch.Tensor]],
    pose_delta: Pose2,
    params: ParamSet,
    level: int,
    cell_size: float = 1.0,
    timestep: Optional[int] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    r"""
    Advance one level of an agent's state.

    Returns
    -------
    Tuple[torch.Tensor, torch.Tensor]
        The collaborative map ``E`` and the new hidden grid of ``level``. ``state`` itself is
        not modified.

    Raises
    ------
    umc.errors.StaleStateError
        If ``timestep`` is given and does not directly follow ``state.timestep``.
    """
    if timestep is not None:
        state.check_next(timestep)
    if not 0 <= level < len(state.hidden):
        raise ShapeError(f"Level {level} is outside the state's {len(state.hidden)} levels.")

    output = collab_forward(
        state.hidden[level],
        f_ego,
        neighbors,
        pose_delta,
        params,
        cell_size=cell_size,
        ego_id=state.agent_id,
    )
    return output["collaborative"], output["hidden"]
