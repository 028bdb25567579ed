import dataclasses
import math

import numpy as np
import pytest

from umc.config import Config
from umc.data.scenario import (
    SceneObject,
    ScenarioConfig,
    _stage_occlusion,
    check_ladder,
    exposed_fraction,
    gen_scenario,
    segment_hits_box,
    visible_points,
)
from umc.errors import ConfigError
from umc.modules.geometry import BevBox, Pose2
from umc.utils.metrics import EvalFrame, ObjectType, classify_object, recall_by_type


@pytest.fixture
def pinned_scenario():
    # Two parked agents facing each other across two parked cars, a dark car off to the side,
    # and a car driving down into the gap between the parked ones.
    return ScenarioConfig(
        num_agents=2,
        num_objects=4,
        num_dark_objects=1,
        timesteps=2,
        agent_speed=0.0,
        agent_poses=((-10.0, 0.0, 0.0), (10.0, 0.0, 0.0)),
        object_states=(
            (-10.0, 8.0, 0.0, 0.0),
            (-4.0, 0.0, 0.0, 0.0),
            (4.0, 0.0, 0.0, 0.0),
            (0.0, 6.0, -math.pi / 2, 6.0),
        ),
    )


def _types(frames, ego, timestep, cfg):
    previous = frames[timestep - 1] if timestep > 0 else None
    gts = frames[timestep].ground_truth(ego, cfg.bev, cfg.tau, previous)
    return [classify_object(gt, cfg.tau) for gt in gts]


def test_pinned_scenario_visibility_types(pinned_scenario):
    frames = gen_scenario(pinned_scenario)
    A = ObjectType
    assert _types(frames, 0, 0, pinned_scenario) == [A.ARCI, A.ARSV, A.ARCV, A.ARSV]
    assert _types(frames, 0, 1, pinned_scenario) == [A.ARCI, A.ARSV, A.ARCV, A.ARTC]
    # The dark car is out of range of the second agent.
    assert _types(frames, 1, 1, pinned_scenario) == [A.ARCV, A.ARSV, A.ARTC]


def test_single_view_detector_misses_collaborative_objects(pinned_scenario):
    frames = gen_scenario(pinned_scenario)
    tau = pinned_scenario.tau
    eval_frames = []
    for timestep, frame in enumerate(frames):
        previous = frames[timestep - 1] if timestep > 0 else None
        gts = frame.ground_truth(0, pinned_scenario.bev, tau, previous)
        preds = [(gt.box, 1.0) for gt in gts if gt.points_single_view > tau]
        eval_frames.append(EvalFrame(preds, [(gt.box, classify_object(gt, tau)) for gt in gts]))

    recalls = recall_by_type(eval_frames, 0.5)
    assert recalls[ObjectType.ARSV] == 1.0
    assert recalls[ObjectType.ARCV] == 0.0
    assert recalls[ObjectType.ARCI] == 0.0


def test_dark_objects_return_nothing(pinned_scenario):
    frames = gen_scenario(pinned_scenario)
    for frame in frames:
        assert frame.objects[0].dark
        assert int(frame.points[:, 0].sum()) == 0
        assert frame.points.shape == (2, 4)


def test_pinned_objects_move_and_agents_stay(pinned_scenario):
    first, second = gen_scenario(pinned_scenario)
    assert second.objects[3].box.cy == pytest.approx(0.0)
    assert (second.objects[3].box.w, second.objects[3].box.h) == (2.0, 4.0)
    assert second.agent_poses[0] == first.agent_poses[0]


def test_scenario_is_deterministic():
    cfg = ScenarioConfig(num_agents=3, num_objects=5, timesteps=3, seed=11)
    first, second = gen_scenario(cfg), gen_scenario(cfg)
    for a, b in zip(first, second):
        assert np.array_equal(a.points, b.points)
        assert all(np.array_equal(p, q) for p, q in zip(a.point_sets, b.point_sets))

    other = gen_scenario(dataclasses.replace(cfg, seed=12))
    assert not np.array_equal(first[0].point_sets[0], other[0].point_sets[0])


def test_point_sets_hold_clutter_and_object_returns():
    cfg = ScenarioConfig(num_agents=2, num_objects=3, timesteps=1, seed=3)
    (frame,) = gen_scenario(cfg)
    for agent in range(2):
        point_set = frame.point_sets[agent]
        assert point_set.shape[1] == 3
        assert point_set.shape[0] > int(frame.points[agent].sum())
        assert float(point_set[:, 2].min()) >= 0.0


def test_agents_bounce_at_the_border():
    half = 24.0
    cfg = ScenarioConfig(
        num_agents=1,
        num_objects=1,
        num_dark_objects=0,
        timesteps=4,
        agent_speed=2.0,
        agent_poses=((23.0, 0.0, 0.0),),
        object_states=((-10.0, -10.0, 0.0, 0.0),),
    )
    xs = [frame.agent_poses[0].x for frame in gen_scenario(cfg)]
    assert xs == pytest.approx([23.0, 2 * half - 25.0, 21.0, 19.0])
    assert all(abs(x) <= half for x in xs)


def test_segment_hits_box():
    box = BevBox(0.0, 0.0, 2.0, 2.0)
    assert segment_hits_box(np.array([-5.0, 0.0]), np.array([5.0, 0.0]), box)
    assert not segment_hits_box(np.array([-5.0, 2.0]), np.array([5.0, 2.0]), box)
    assert not segment_hits_box(np.array([-5.0, 0.0]), np.array([-3.0, 0.0]), box)
    assert segment_hits_box(np.array([0.0, -5.0]), np.array([0.0, 5.0]), box)


def test_exposed_fraction():
    target = BevBox(10.0, 0.0, 2.0, 2.0)
    assert exposed_fraction((0.0, 0.0), target, [], 16) == 1.0
    wall = BevBox(5.0, 0.0, 1.0, 20.0)
    assert exposed_fraction((0.0, 0.0), target, [wall], 16) == 0.0
    # A low wall hides the lower half of the lattice.
    half_wall = BevBox(5.0, -5.0, 1.0, 10.0)
    assert exposed_fraction((0.0, 0.0), target, [half_wall], 16) == 0.5


def test_visible_points_decay_with_range():
    cfg = ScenarioConfig()
    near = SceneObject(0, BevBox(5.0, 0.0, 4.0, 2.0), 0.0)
    far = SceneObject(1, BevBox(30.0, 10.0, 4.0, 2.0), 0.0)
    agent = Pose2()
    assert visible_points(agent, near, [], cfg) == math.floor(200 * math.exp(-0.5))
    assert visible_points(agent, far, [], cfg) < visible_points(agent, near, [], cfg)
    dark = SceneObject(2, BevBox(5.0, 0.0, 4.0, 2.0), 0.0, dark=True)
    assert visible_points(agent, dark, [], cfg) == 0


def test_from_config_reads_overrides():
    config = Config(
        None,
        [
            "SCENARIO.NUM_AGENTS", 2,
            "SCENARIO.AGENT_POSES", [[0.0, 0.0, 0.0], [5.0, 5.0, math.pi]],
            "SELECTION.DELTA_S", 0.2,
        ],
    )
    cfg = ScenarioConfig.from_config(config)
    assert cfg.num_agents == 2
    assert cfg.agent_poses[1] == (5.0, 5.0, math.pi)
    assert cfg.delta_s == 0.2
    assert cfg.level_cell_size(0) == 4.0
    assert cfg.level_cell_size(1) == 2.0


@pytest.mark.parametrize(
    "changes",
    [
        {"num_agents": 0},
        {"num_dark_objects": 13},
        {"agent_headings": (0.3,)},
        {"delta_c": 0.0},
        {"tau": -1},
        {"agent_poses": ((0.0, 0.0, 0.0),)},
        {"object_states": ((0.0, 0.0, 0.0),) * 12},
        {"ladder": ((64, 8, 8), (64, 16, 16))},
    ],
)
def test_invalid_scenarios_raise(changes):
    with pytest.raises(ConfigError):
        gen_scenario(dataclasses.replace(ScenarioConfig(), **changes))


def test_check_ladder():
    bev = ScenarioConfig().bev
    check_ladder(((64, 8, 8), (32, 16, 16)), bev)
    check_ladder(((32, 16, 16),), bev)
    with pytest.raises(ConfigError):
        check_ladder(((32, 64, 64),), bev)
    with pytest.raises(ConfigError):
        check_ladder(((32, 24, 24),), bev)
    with pytest.raises(ConfigError):
        check_ladder((), bev)


def test_unplaceable_objects_raise():
    with pytest.raises(ConfigError):
        gen_scenario(ScenarioConfig(num_objects=500, num_dark_objects=0, world_extent=20.0))


def test_random_layouts_hold_a_collaboratively_visible_object():
    for seed in range(60):
        cfg = ScenarioConfig(timesteps=1, seed=seed)
        (frame,) = gen_scenario(cfg)
        counts = [frame.type_counts(ego, cfg.bev, cfg.tau) for ego in range(cfg.num_agents)]
        assert max(count[ObjectType.ARCV] for count in counts) > 0, seed


def test_small_random_layouts_hold_a_collaboratively_visible_object():
    for seed in range(20):
        cfg = ScenarioConfig(num_agents=2, num_objects=4, timesteps=1, seed=seed)
        (frame,) = gen_scenario(cfg)
        counts = [frame.type_counts(ego, cfg.bev, cfg.tau) for ego in range(cfg.num_agents)]
        assert max(count[ObjectType.ARCV] for count in counts) > 0, seed


def test_stage_occlusion_hides_target_from_the_ego_only():
    cfg = ScenarioConfig(num_agents=2, num_objects=3, timesteps=1)
    agents = [(-10.0, 0.0, 0.0), (0.0, 12.0, 0.0)]
    objects = [(20.0, 20.0, 0.0, 0.0), (-20.0, -20.0, 0.0, 0.0), (20.0, -20.0, 0.0, 0.0)]
    staged = _stage_occlusion(cfg, agents, objects)

    assert staged[0] == objects[0]
    # Blocker broadside-on half way, target end-on at 14 m ahead of the first agent.
    assert staged[1][:2] == pytest.approx((-3.0, 0.0))
    assert staged[2][:2] == pytest.approx((4.0, 0.0))
    assert math.cos(staged[1][2]) == pytest.approx(0.0, abs=1e-12)
    assert staged[2][2] == pytest.approx(0.0)

    poses = [Pose2(x, y, yaw) for x, y, yaw in agents]
    # The ego is blind to the target, the collaborator above it has a clear line of sight.
    target = SceneObject(2, BevBox(4.0, 0.0, 4.0, 2.0), 0.0, False)
    blocker = SceneObject(1, BevBox(-3.0, 0.0, 2.0, 4.0), math.pi / 2, False)
    assert visible_points(poses[0], target, [blocker], cfg) == 0
    assert visible_points(poses[1], target, [blocker], cfg) > cfg.tau


def test_stage_occlusion_needs_room():
    cfg = ScenarioConfig(num_agents=2, num_objects=3, timesteps=1, world_extent=20.0)
    agents = [(0.0, 0.0, 0.0), (6.0, 0.0, 0.0)]
    objects = [(5.0, 5.0, 0.0, 0.0)] * 3
    assert _stage_occlusion(cfg, agents, objects) is None
