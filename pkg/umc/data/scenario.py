r"""
Synthetic multi-agent driving scenarios.

Agents and objects move on a square world with constant velocity along axis-aligned headings,
bouncing at the border. Every agent receives LiDAR returns from every object according to a
point budget which decays with range and is scaled by the fraction of the object not hidden
behind other objects (2D ray casting). Static clutter returns fill the background. Random
layouts with several agents hold an object which some agent sees only through the others.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from umc.config import Config
from umc.data.bev import BevGrid
from umc.errors import ConfigError
from umc.modules.geometry import BevBox, Pose2, relative_pose
from umc.utils.metrics import GtObject, ObjectType, classify_object


logger: logging.Logger = logging.getLogger(__name__)

# Clearance (meters) kept between objects, and between objects and agents, at placement.
PLACEMENT_MARGIN = 1.0
AGENT_CLEARANCE = 3.0
MAX_PLACEMENT_ATTEMPTS = 1000
# Random layouts tried before giving up on an object only visible collaboratively.
MAX_STAGING_ATTEMPTS = 20

# Clutter returns are low (vegetation, curbs, poles).
CLUTTER_MAX_HEIGHT = 1.5


@dataclass(frozen=True)
class ScenarioConfig:
    r"""
    Everything :func:`gen_scenario` and the episode evaluator need, validated.

    Use :meth:`from_config` to build one from a :class:`~umc.config.Config`. Agent and object
    initial states may be pinned with ``agent_poses`` (``(x, y, yaw)``) and ``object_states``
    (``(x, y, heading, speed)``); empty sequences mean random placement.
    """

    num_agents: int = 4
    num_objects: int = 12
    num_dark_objects: int = 1
    world_extent: float = 48.0
    timesteps: int = 20
    agent_speed: float = 1.0
    object_speed: float = 1.0
    object_size: Tuple[float, float] = (4.0, 2.0)
    agent_headings: Tuple[float, ...] = (0.0, math.pi / 2, math.pi, -math.pi / 2)
    clutter_density: float = 0.08
    base_points: float = 200.0
    range_decay: float = 10.0
    num_rays: int = 16
    object_height: float = 1.6
    bev: BevGrid = BevGrid(0.5, 64, 64, 0.0, 5.0, 0.625)
    ladder: Tuple[Tuple[int, int, int], ...] = ((64, 8, 8), (32, 16, 16))
    seed: int = 0
    delta_s: float = 0.5
    delta_c: float = 0.5
    tau: int = 4
    agent_poses: Tuple[Tuple[float, float, float], ...] = ()
    object_states: Tuple[Tuple[float, float, float, float], ...] = ()

    @classmethod
    def from_config(cls, config: Config) -> "ScenarioConfig":
        _C = config
        scenario = cls(
            num_agents=int(_C.SCENARIO.NUM_AGENTS),
            num_objects=int(_C.SCENARIO.NUM_OBJECTS),
            num_dark_objects=int(_C.SCENARIO.NUM_DARK_OBJECTS),
            world_extent=float(_C.SCENARIO.WORLD_EXTENT),
            timesteps=int(_C.SCENARIO.TIMESTEPS),
            agent_speed=float(_C.SCENARIO.AGENT_SPEED),
            object_speed=float(_C.SCENARIO.OBJECT_SPEED),
            object_size=tuple(float(size) for size in _C.SCENARIO.OBJECT_SIZE),
            agent_headings=tuple(float(heading) for heading in _C.SCENARIO.AGENT_HEADINGS),
            clutter_density=float(_C.SCENARIO.CLUTTER_DENSITY),
            base_points=float(_C.SCENARIO.OCCLUSION.BASE_POINTS),
            range_decay=float(_C.SCENARIO.OCCLUSION.RANGE_DECAY),
            num_rays=int(_C.SCENARIO.OCCLUSION.NUM_RAYS),
            object_height=float(_C.SCENARIO.OCCLUSION.OBJECT_HEIGHT),
            bev=BevGrid.from_config(_C),
            ladder=tuple(tuple(int(size) for size in level) for level in _C.LADDER),
            seed=int(_C.RANDOM_SEED),
            delta_s=float(_C.SELECTION.DELTA_S),
            delta_c=float(_C.SELECTION.DELTA_C),
            tau=int(_C.EVAL.TAU),
            agent_poses=tuple(tuple(float(v) for v in pose) for pose in _C.SCENARIO.AGENT_POSES),
            object_states=tuple(
                tuple(float(v) for v in state) for state in _C.SCENARIO.OBJECT_STATES
            ),
        )
        scenario.check()
        return scenario

    def check(self):
        r"""Raise :class:`~umc.errors.ConfigError` on any inconsistency."""
        if min(self.num_agents, self.num_objects, self.timesteps) < 1:
            raise ConfigError("Agents, objects and timesteps must all be at least 1.")
        if not 0 <= self.num_dark_objects <= self.num_objects:
            raise ConfigError("NUM_DARK_OBJECTS must lie in [0, NUM_OBJECTS].")
        if self.world_extent <= 0 or self.range_decay <= 0 or self.num_rays < 1:
            raise ConfigError("World extent, range decay and ray count must be positive.")
        if len(self.object_size) != 2 or min(self.object_size) <= 0:
            raise ConfigError(f"OBJECT_SIZE must be two positive lengths: {self.object_size}")
        if len(self.agent_headings) == 0:
            raise ConfigError("AGENT_HEADINGS must not be empty.")
        pinned_headings = [pose[2] for pose in self.agent_poses if len(pose) == 3] + [
            state[2] for state in self.object_states if len(state) == 4
        ]
        for heading in list(self.agent_headings) + pinned_headings:
            quarter_turns = heading / (math.pi / 2)
            if abs(quarter_turns - round(quarter_turns)) > 1e-9:
                raise ConfigError(f"Headings must be multiples of pi/2, found {heading}.")
        if any(len(pose) != 3 for pose in self.agent_poses):
            raise ConfigError("AGENT_POSES entries must be (x, y, yaw).")
        if any(len(state) != 4 for state in self.object_states):
            raise ConfigError("OBJECT_STATES entries must be (x, y, heading, speed).")
        for name, delta in (("DELTA_S", self.delta_s), ("DELTA_C", self.delta_c)):
            if not 0.0 < delta <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1], found {delta}.")
        if self.tau < 0:
            raise ConfigError(f"TAU must be non-negative, found {self.tau}.")
        if self.agent_poses and len(self.agent_poses) != self.num_agents:
            raise ConfigError("AGENT_POSES must list one (x, y, yaw) per agent.")
        if self.object_states and len(self.object_states) != self.num_objects:
            raise ConfigError("OBJECT_STATES must list one (x, y, heading, speed) per object.")
        self.bev.check()
        check_ladder(self.ladder, self.bev)

    def level_cell_size(self, level: int) -> float:
        r"""Metric cell size of a ladder level, the BEV extent divided by the level height."""
        return self.bev.extent / self.ladder[level][1]


def check_ladder(ladder: Sequence[Sequence[int]], bev: BevGrid):
    r"""
    A ladder lists ``(channels, height, width)`` coarse to fine. Every finer level doubles the
    spatial size and halves the channels, and the BEV size is a power-of-two multiple (at
    least 2) of the finest level.
    """
    if len(ladder) < 1:
        raise ConfigError("LADDER must have at least one level.")
    for level in ladder:
        if len(level) != 3 or min(level) < 1:
            raise ConfigError(f"Ladder levels must be positive (C, H, W), found {level}.")
    for coarse, fine in zip(ladder[:-1], ladder[1:]):
        if fine[1] != 2 * coarse[1] or fine[2] != 2 * coarse[2] or 2 * fine[0] != coarse[0]:
            raise ConfigError(f"Ladder levels {coarse} -> {fine} do not halve channels and double size.")
    finest = ladder[-1]
    ratio = bev.height // finest[1]
    if (
        bev.height % finest[1] != 0
        or bev.width != ratio * finest[2]
        or ratio < 2
        or ratio & (ratio - 1) != 0
    ):
        raise ConfigError(
            f"BEV size {bev.height}x{bev.width} is not a power-of-two multiple of the finest "
            f"level {finest[1]}x{finest[2]}."
        )


@dataclass(frozen=True)
class SceneObject:
    r"""A vehicle in world coordinates. Dark objects return no points at all."""

    object_id: int
    box: BevBox
    heading: float
    dark: bool = False


@dataclass
class SceneFrame:
    r"""
    One simulator tick.

    Parameters
    ----------
    timestep: int
    agent_poses: List[Pose2]
        World pose of every agent.
    objects: List[SceneObject]
        Ground-truth objects in world coordinates.
    points: np.ndarray
        Points received by every agent from every object, shape (num_agents, num_objects).
    point_sets: List[np.ndarray]
        Raw returns of every agent in its own frame, shape (N, 3) each.
    """

    timestep: int
    agent_poses: List[Pose2]
    objects: List[SceneObject]
    points: np.ndarray
    point_sets: List[np.ndarray] = field(default_factory=list)

    @property
    def points_collab_view(self) -> np.ndarray:
        r"""Points of every object summed over all agents, shape (num_objects, )."""
        return self.points.sum(axis=0)

    def ground_truth(
        self, ego: int, bev: BevGrid, tau: int, previous: Optional["SceneFrame"] = None
    ) -> List[GtObject]:
        r"""
        Objects inside the ego's BEV extent, in the ego frame. Objects invisible now which were
        visible to the agents together at the previous frame are labelled ``ARTC``.
        """
        to_ego = relative_pose(Pose2(), self.agent_poses[ego])
        collab_now = self.points_collab_view
        collab_before = previous.points_collab_view if previous is not None else None

        objects: List[GtObject] = []
        for index, scene_object in enumerate(self.objects):
            box = scene_object.box.transformed(to_ego)
            if not bev.contains(box.cx, box.cy):
                continue
            label = None
            if collab_before is not None and collab_now[index] <= tau < collab_before[index]:
                label = ObjectType.ARTC
            objects.append(
                GtObject(
                    box=box,
                    points_single_view=int(self.points[ego, index]),
                    points_collab_view=int(collab_now[index]),
                    manual_label=label,
                )
            )
        return objects

    def type_counts(self, ego: int, bev: BevGrid, tau: int, previous=None) -> dict:
        counts = {object_type: 0 for object_type in ObjectType}
        for gt in self.ground_truth(ego, bev, tau, previous):
            counts[classify_object(gt, tau)] += 1
        return counts


def _direction(heading: float) -> Tuple[float, float]:
    # Headings are multiples of pi/2, keep unit steps exact.
    return float(round(math.cos(heading))), float(round(math.sin(heading)))


def _object_box(x: float, y: float, heading: float, size: Tuple[float, float]) -> BevBox:
    length, width = size
    dx, _ = _direction(heading)
    if dx != 0.0:
        return BevBox(x, y, length, width)
    return BevBox(x, y, width, length)


def _overlaps(a: BevBox, b: BevBox, margin: float) -> bool:
    return (
        abs(a.cx - b.cx) < (a.w + b.w) / 2 + margin and abs(a.cy - b.cy) < (a.h + b.h) / 2 + margin
    )


def _move(x: float, y: float, heading: float, speed: float, half: float):
    r"""Advance one tick, reflecting position and heading at the world border."""
    dx, dy = _direction(heading)
    x, y = x + speed * dx, y + speed * dy
    if abs(x) > half:
        x = math.copysign(2 * half, x) - x
        heading = math.pi - heading
    if abs(y) > half:
        y = math.copysign(2 * half, y) - y
        heading = -heading
    return x, y, Pose2(0.0, 0.0, heading).yaw


def segment_hits_box(start: np.ndarray, end: np.ndarray, box: BevBox) -> bool:
    r"""Whether the segment from ``start`` to ``end`` crosses ``box`` (Liang-Barsky clipping)."""
    x_min, y_min, x_max, y_max = box.bounds()
    t_enter, t_exit = 0.0, 1.0
    delta = end - start
    for axis, low, high in ((0, x_min, x_max), (1, y_min, y_max)):
        if abs(delta[axis]) < 1e-12:
            if start[axis] < low or start[axis] > high:
                return False
            continue
        t_low = (low - start[axis]) / delta[axis]
        t_high = (high - start[axis]) / delta[axis]
        t_enter = max(t_enter, min(t_low, t_high))
        t_exit = min(t_exit, max(t_low, t_high))
        if t_enter > t_exit:
            return False
    return True


def exposed_fraction(
    origin: Tuple[float, float], target: BevBox, occluders: Sequence[BevBox], num_rays: int
) -> float:
    r"""
    Fraction of rays from ``origin`` to a lattice of ``num_rays`` points inside ``target`` which
    reach their point without crossing any occluder.
    """
    side = int(math.ceil(math.sqrt(num_rays)))
    x_min, y_min, _, _ = target.bounds()
    start = np.asarray(origin, dtype=np.float64)
    reached = 0
    total = 0
    for i in range(side):
        for j in range(side):
            if total == num_rays:
                break
            end = np.array([x_min + (i + 0.5) / side * target.w, y_min + (j + 0.5) / side * target.h])
            total += 1
            if not any(segment_hits_box(start, end, occluder) for occluder in occluders):
                reached += 1
    return reached / total


def visible_points(
    agent: Pose2, target: SceneObject, others: Sequence[SceneObject], cfg: ScenarioConfig
) -> int:
    r"""Points an agent receives from an object: ``floor(budget(range) * exposed fraction)``."""
    if target.dark:
        return 0
    distance = math.hypot(target.box.cx - agent.x, target.box.cy - agent.y)
    budget = cfg.base_points * math.exp(-distance / cfg.range_decay)
    fraction = exposed_fraction(
        (agent.x, agent.y), target.box, [other.box for other in others], cfg.num_rays
    )
    return int(math.floor(budget * fraction))


def _place_agents(cfg: ScenarioConfig, rng: np.random.Generator) -> List[Tuple[float, float, float]]:
    if cfg.agent_poses:
        return [tuple(pose) for pose in cfg.agent_poses]
    half = 0.4 * cfg.world_extent
    states: List[Tuple[float, float, float]] = []
    for _ in range(cfg.num_agents):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            x, y = rng.uniform(-half, half, size=2)
            heading = cfg.agent_headings[int(rng.integers(len(cfg.agent_headings)))]
            if all(math.hypot(x - ox, y - oy) >= 2 * AGENT_CLEARANCE for ox, oy, _ in states):
                states.append((float(x), float(y), heading))
                break
        else:
            raise ConfigError(f"Could not place {cfg.num_agents} agents in the world.")
    return states


def _place_objects(
    cfg: ScenarioConfig, rng: np.random.Generator, agents: Sequence[Tuple[float, float, float]]
) -> List[Tuple[float, float, float, float]]:
    if cfg.object_states:
        return [tuple(state) for state in cfg.object_states]
    half = cfg.world_extent / 2 - max(cfg.object_size)
    if half <= 0:
        raise ConfigError("World extent is too small for a single object.")
    states: List[Tuple[float, float, float, float]] = []
    boxes: List[BevBox] = []
    for _ in range(cfg.num_objects):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            x, y = rng.uniform(-half, half, size=2)
            heading = cfg.agent_headings[int(rng.integers(len(cfg.agent_headings)))]
            box = _object_box(float(x), float(y), heading, cfg.object_size)
            clear_of_agents = all(
                math.hypot(x - ax, y - ay) >= AGENT_CLEARANCE + max(cfg.object_size)
                for ax, ay, _ in agents
            )
            if clear_of_agents and not any(_overlaps(box, other, PLACEMENT_MARGIN) for other in boxes):
                states.append((float(x), float(y), heading, cfg.object_speed))
                boxes.append(box)
                break
        else:
            raise ConfigError(
                f"Could not place {cfg.num_objects} objects of size {cfg.object_size} in a "
                f"{cfg.world_extent} m world."
            )
    return states


def _object_returns(box: BevBox, count: int, height: float, rng: np.random.Generator) -> np.ndarray:
    x_min, y_min, x_max, y_max = box.bounds()
    return np.stack(
        [
            rng.uniform(x_min, x_max, size=count),
            rng.uniform(y_min, y_max, size=count),
            rng.uniform(0.0, height, size=count),
        ],
        axis=1,
    )


def _scene_objects(
    cfg: ScenarioConfig, objects: Sequence[Tuple[float, float, float, float]]
) -> List[SceneObject]:
    return [
        SceneObject(
            object_id=index,
            box=_object_box(x, y, heading, cfg.object_size),
            heading=heading,
            dark=index < cfg.num_dark_objects,
        )
        for index, (x, y, heading, _) in enumerate(objects)
    ]


def _points_of(
    cfg: ScenarioConfig, poses: Sequence[Pose2], scene_objects: Sequence[SceneObject], index: int
) -> List[int]:
    others = list(scene_objects[:index]) + list(scene_objects[index + 1:])
    return [visible_points(pose, scene_objects[index], others, cfg) for pose in poses]


def _has_collab_only_object(
    cfg: ScenarioConfig,
    agents: Sequence[Tuple[float, float, float]],
    objects: Sequence[Tuple[float, float, float, float]],
) -> bool:
    poses = [Pose2(x, y, yaw) for x, y, yaw in agents]
    scene_objects = _scene_objects(cfg, objects)
    points = np.array(
        [_points_of(cfg, poses, scene_objects, index) for index in range(len(scene_objects))],
        dtype=np.int64,
    ).T
    frame = SceneFrame(timestep=0, agent_poses=poses, objects=scene_objects, points=points)
    return any(
        frame.type_counts(ego, cfg.bev, cfg.tau)[ObjectType.ARCV] > 0 for ego in range(len(poses))
    )


def _stage_occlusion(
    cfg: ScenarioConfig,
    agents: Sequence[Tuple[float, float, float]],
    objects: Sequence[Tuple[float, float, float, float]],
) -> Optional[List[Tuple[float, float, float, float]]]:
    r"""
    Move the last two objects in front of an agent, a target end-on at a range the agent
    covers and a blocker broadside-on half way to it, such that the agent sees nothing of the
    target while the others together do. ``None`` when no agent, axis and range works.
    """
    long_side = max(cfg.object_size)
    clearance = AGENT_CLEARANCE + long_side
    half = cfg.world_extent / 2 - long_side
    reach = min(cfg.bev.height, cfg.bev.width) * cfg.bev.cell_size / 2
    # The target turns its narrow face to the agent, the blocker its broad face.
    narrow = 0.0 if cfg.object_size[1] <= cfg.object_size[0] else math.pi / 2

    kept = list(objects[:-2])
    kept_boxes = [_object_box(x, y, heading, cfg.object_size) for x, y, heading, _ in kept]
    poses = [Pose2(x, y, yaw) for x, y, yaw in agents]

    for ego, (ego_x, ego_y, _) in enumerate(agents):
        for axis in (0.0, math.pi / 2, math.pi, -math.pi / 2):
            dx, dy = _direction(axis)
            for distance in np.arange(2 * clearance, reach, 0.5):
                staged = [
                    (
                        ego_x + distance / 2 * dx,
                        ego_y + distance / 2 * dy,
                        Pose2(0.0, 0.0, axis + narrow + math.pi / 2).yaw,
                        cfg.object_speed,
                    ),
                    (
                        ego_x + distance * dx,
                        ego_y + distance * dy,
                        Pose2(0.0, 0.0, axis + narrow).yaw,
                        cfg.object_speed,
                    ),
                ]
                if any(max(abs(x), abs(y)) > half for x, y, _, _ in staged):
                    continue
                if any(
                    math.hypot(x - agent_x, y - agent_y) < clearance
                    for x, y, _, _ in staged
                    for agent_x, agent_y, _ in agents
                ):
                    continue
                boxes = [_object_box(x, y, heading, cfg.object_size) for x, y, heading, _ in staged]
                if any(_overlaps(box, other, PLACEMENT_MARGIN) for box in boxes for other in kept_boxes):
                    continue

                candidate = kept + [(float(x), float(y), h, s) for x, y, h, s in staged]
                points = _points_of(cfg, poses, _scene_objects(cfg, candidate), len(candidate) - 1)
                if points[ego] <= cfg.tau < sum(points):
                    return candidate
    return None


def _ensure_collab_only_object(
    cfg: ScenarioConfig,
    rng: np.random.Generator,
    agents: List[Tuple[float, float, float]],
    objects: List[Tuple[float, float, float, float]],
) -> Tuple[List[Tuple[float, float, float]], List[Tuple[float, float, float, float]]]:
    r"""
    Make sure that at the first frame some object is hidden from an agent but visible to the
    agents together. A random layout without one gets an occluded pair staged in front of an
    agent, and failing that the layout is drawn anew from ``rng``.
    """
    for attempt in range(MAX_STAGING_ATTEMPTS):
        if attempt > 0:
            agents = _place_agents(cfg, rng)
            objects = _place_objects(cfg, rng, agents)
        if _has_collab_only_object(cfg, agents, objects):
            return agents, objects
        staged = _stage_occlusion(cfg, agents, objects)
        if staged is not None:
            logger.debug(f"Staged an occluded object pair after {attempt + 1} layouts.")
            return agents, staged
    logger.warning(
        f"No object visible to the agents only together after {MAX_STAGING_ATTEMPTS} layouts."
    )
    return agents, objects


def gen_scenario(cfg: ScenarioConfig) -> List[SceneFrame]:
    r"""
    Simulate an episode. The result is a deterministic function of ``cfg`` (including its
    seed).

    Raises
    ------
    umc.errors.ConfigError
        If the configuration is inconsistent, or agents or objects cannot be placed.
    """
    cfg.check()
    rng = np.random.default_rng(cfg.seed)
    half = cfg.world_extent / 2

    agents = _place_agents(cfg, rng)
    objects = _place_objects(cfg, rng, agents)
    collaborative = cfg.num_agents >= 2 and cfg.num_objects - cfg.num_dark_objects >= 2
    if collaborative and not cfg.object_states:
        agents, objects = _ensure_collab_only_object(cfg, rng, agents, objects)

    # Clutter covers everything an agent anywhere in the world can perceive.
    clutter_half = half + max(cfg.bev.height, cfg.bev.width) * cfg.bev.cell_size / 2
    num_clutter = int(rng.poisson(cfg.clutter_density * (2 * clutter_half) ** 2))
    clutter = np.stack(
        [
            rng.uniform(-clutter_half, clutter_half, size=num_clutter),
            rng.uniform(-clutter_half, clutter_half, size=num_clutter),
            rng.uniform(0.0, CLUTTER_MAX_HEIGHT, size=num_clutter),
        ],
        axis=1,
    )

    frames: List[SceneFrame] = []
    for timestep in range(cfg.timesteps):
        poses = [Pose2(x, y, yaw) for x, y, yaw in agents]
        scene_objects = _scene_objects(cfg, objects)
        points = np.zeros((cfg.num_agents, cfg.num_objects), dtype=np.int64)
        for object_index in range(len(scene_objects)):
            points[:, object_index] = _points_of(cfg, poses, scene_objects, object_index)

        point_sets: List[np.ndarray] = []
        for agent_index, pose in enumerate(poses):
            world_points = [clutter]
            for object_index, scene_object in enumerate(scene_objects):
                world_points.append(
                    _object_returns(
                        scene_object.box,
                        int(points[agent_index, object_index]),
                        cfg.object_height,
                        rng,
                    )
                )
            stacked = np.concatenate(world_points, axis=0)
            to_agent = relative_pose(Pose2(), pose)
            local = np.concatenate([to_agent.apply(stacked[:, :2]), stacked[:, 2:]], axis=1)
            point_sets.append(local)

        frames.append(
            SceneFrame(
                timestep=timestep,
                agent_poses=poses,
                objects=scene_objects,
                points=points,
                point_sets=point_sets,
            )
        )

        agents = [_move(x, y, yaw, cfg.agent_speed, half) for x, y, yaw in agents]
        objects = [
            _move(x, y, heading, speed, half - max(cfg.object_size) / 2) + (speed,)
            for x, y, heading, speed in objects
        ]

    logger.debug(f"Generated {len(frames)} frames with {len(clutter)} clutter returns.")
    return frames
