import math

import pytest
import torch

from umc.errors import ShapeError, StaleStateError
from umc.models.encoder import conv_specs
from umc.modules.gcgru import (
    AgentState,
    collab_forward,
    collab_step,
    edge_weight,
    gate_forward,
)
from umc.modules.geometry import Pose2
from umc.utils.checkpointing import ParamSet


CHANNELS = 2


def _gcgru_params(seed: int, channels: int = CHANNELS) -> ParamSet:
    specs = {}
    for gate in ("reset", "update"):
        specs.update(conv_specs(gate, channels, 2 * channels, 3))
    widths = [3 * channels, 4, 3, 2, 1]
    for index, (in_width, out_width) in enumerate(zip(widths[:-1], widths[1:])):
        specs.update(conv_specs(f"edge.conv{index + 1}", out_width, in_width))
    specs.update(conv_specs("hidden", channels, channels, 3))
    return ParamSet.random(specs, seed=seed)


def _grid(generator, height=4, width=4, scale=1.0):
    return torch.randn(CHANNELS, height, width, generator=generator, dtype=torch.float64) * scale


def test_gates_lie_in_unit_interval(generator):
    params = _gcgru_params(0)
    for gate in ("reset", "update"):
        output = gate_forward(_grid(generator), _grid(generator), params, gate)
        assert output.shape == (CHANNELS, 4, 4)
        assert bool(((output > 0) & (output < 1)).all())


def test_edge_weight_is_non_negative_map(generator):
    output = edge_weight(_grid(generator), _grid(generator), _grid(generator), _gcgru_params(1))
    assert output.shape == (4, 4)
    assert bool((output >= 0).all())


def test_edge_weights_normalize_and_collaborative_map_is_bounded(generator):
    for trial in range(1000):
        params = _gcgru_params(trial % 10)
        num_neighbors = 1 + trial % 5
        hidden = _grid(generator, scale=3.0)
        f_ego = _grid(generator, scale=3.0)
        neighbors = [(agent_id, _grid(generator, scale=3.0)) for agent_id in range(1, num_neighbors + 1)]
        pose_delta = Pose2(0.0, 0.0, 0.0) if trial % 2 == 0 else Pose2(1.0, -1.0, 0.0)

        output = collab_forward(hidden, f_ego, neighbors, pose_delta, params)
        aligned = output["aligned_hidden"]
        collaborative = output["collaborative"]

        assert len(output["edge_weights"]) == num_neighbors + 1
        total = sum(weight for _, weight in output["edge_weights"])
        assert torch.allclose(total, torch.ones(4, 4, dtype=torch.float64), atol=1e-9, rtol=0)
        stack = torch.stack([f_ego] + [feature for _, feature in neighbors])
        low = torch.minimum(stack.min(dim=0).values, aligned)
        high = torch.maximum(stack.max(dim=0).values, aligned)
        assert bool((collaborative >= low - 1e-12).all())
        assert bool((collaborative <= high + 1e-12).all())


def test_without_neighbors_aggregate_is_zero(generator):
    for trial in range(100):
        params = _gcgru_params(trial % 10)
        hidden = _grid(generator, scale=3.0)
        f_ego = _grid(generator, scale=3.0)
        pose_delta = Pose2(0.0, 0.0, 0.0) if trial % 2 == 0 else Pose2(1.0, -1.0, 0.0)

        output = collab_forward(hidden, f_ego, [], pose_delta, params)
        aligned = output["aligned_hidden"]
        assert output["edge_weights"] == []
        assert torch.equal(output["aggregated"], torch.zeros_like(f_ego))
        low = torch.minimum(aligned, torch.zeros_like(aligned))
        high = torch.maximum(aligned, torch.zeros_like(aligned))
        assert bool((output["collaborative"] >= low - 1e-12).all())
        assert bool((output["collaborative"] <= high + 1e-12).all())


def test_neighbor_order_does_not_matter(generator):
    for case in range(100):
        params = _gcgru_params(case % 10)
        hidden, f_ego = _grid(generator), _grid(generator)
        num_neighbors = 1 + case % 5
        agent_ids = (torch.randperm(9, generator=generator)[:num_neighbors] + 1).tolist()
        neighbors = [(agent_id, _grid(generator)) for agent_id in agent_ids]
        order = torch.randperm(num_neighbors, generator=generator).tolist()
        shuffled = [neighbors[index] for index in order]

        forward = collab_forward(hidden, f_ego, neighbors, Pose2(), params)
        permuted = collab_forward(hidden, f_ego, shuffled, Pose2(), params)
        assert torch.equal(forward["collaborative"], permuted["collaborative"])
        assert torch.equal(forward["hidden"], permuted["hidden"])
        # The ego self-edge comes first, then neighbours by id.
        assert [agent_id for agent_id, _ in forward["edge_weights"]] == [0] + sorted(agent_ids)


def test_saturated_update_gate_passes_aggregate_through(generator):
    tensors = dict(_gcgru_params(4))
    tensors["update.weight"] = torch.zeros_like(tensors["update.weight"])
    tensors["update.bias"] = torch.zeros_like(tensors["update.bias"])
    params = ParamSet(tensors)

    hidden = _grid(generator)
    f_ego = torch.full((CHANNELS, 4, 4), 1000.0, dtype=torch.float64)
    output = collab_forward(hidden, f_ego, [(1, _grid(generator))], Pose2(), params)

    assert torch.equal(output["update"], torch.ones_like(f_ego))
    assert torch.allclose(output["collaborative"], output["aggregated"], atol=1e-12, rtol=0)


def test_isolated_ego_keeps_a_fraction_of_its_history(generator):
    hidden, f_ego = _grid(generator), _grid(generator)
    output = collab_forward(hidden, f_ego, [], Pose2(), _gcgru_params(5))
    expected = (1 - output["update"]) * hidden
    assert torch.allclose(output["collaborative"], expected, atol=1e-12, rtol=0)


def test_hidden_grid_is_aligned_to_current_pose(generator):
    hidden = _grid(generator)
    output = collab_forward(hidden, _grid(generator), [], Pose2(1.0, 0.0, 0.0), _gcgru_params(6))
    assert torch.equal(output["aligned_hidden"][:, :, 1:], hidden[:, :, :-1])


def test_rejects_bad_neighbors(generator):
    params = _gcgru_params(7)
    hidden, f_ego = _grid(generator), _grid(generator)
    with pytest.raises(ValueError):
        collab_forward(hidden, f_ego, [(1, _grid(generator)), (1, _grid(generator))], Pose2(), params)
    with pytest.raises(ValueError):
        collab_forward(hidden, f_ego, [(0, _grid(generator))], Pose2(), params)
    with pytest.raises(ShapeError):
        collab_forward(hidden, f_ego, [(1, _grid(generator, 3, 3))], Pose2(), params)


def test_agent_state_steps_one_timestep_at_a_time():
    state = AgentState.initial(2, [(CHANNELS, 2, 2), (1, 4, 4)])
    assert [tuple(hidden.shape) for hidden in state.hidden] == [(CHANNELS, 2, 2), (1, 4, 4)]
    assert all(bool((hidden == 0).all()) for hidden in state.hidden)
    assert state.timestep is None

    state.check_next(5)
    advanced = state.advanced(state.hidden, Pose2(1.0, 0.0, 0.0), 5)
    assert advanced.timestep == 5 and state.timestep is None
    advanced.check_next(6)
    with pytest.raises(StaleStateError):
        advanced.check_next(7)
    with pytest.raises(StaleStateError):
        advanced.advanced(advanced.hidden, Pose2(), 5)


def test_collab_step_matches_forward(generator):
    params = _gcgru_params(8)
    state = AgentState(agent_id=3, hidden=[_grid(generator)], pose=Pose2(), timestep=0)
    f_ego = _grid(generator)
    neighbors = [(1, _grid(generator))]
    pose_delta = Pose2(0.0, 1.0, math.pi / 2)

    collaborative, hidden = collab_step(state, f_ego, neighbors, pose_delta, params, level=0, timestep=1)
    output = collab_forward(state.hidden[0], f_ego, neighbors, pose_delta, params, ego_id=3)
    assert torch.equal(collaborative, output["collaborative"])
    assert torch.equal(hidden, output["hidden"])

    with pytest.raises(StaleStateError):
        collab_step(state, f_ego, neighbors, pose_delta, params, level=0, timestep=2)
    with pytest.raises(ShapeError):
        collab_step(state, f_ego, neighbors, pose_delta, params, level=1)
