r"""This module provides package-wide configuration management."""
import math
from typing import Any, List, Optional

from yacs.config import CfgNode as CN


class Config(object):
    r"""
    A collection of all the required configuration parameters. This class is a nested dict-like
    structure, with nested keys accessible as attributes. It contains sensible default values for
    all the parameters, which may be overriden by (first) through a YAML file and (second) through
    a list of attributes and values.

    Extended Summary
    ----------------
    Default values correspond to the desk-scale setting: four agents, a 64 x 64 x 8 BEV map and
    a two-level resolution ladder (64 x 8 x 8, 32 x 16 x 16). Modification of any parameter after
    instantiating this class is not possible, so you must override required parameter values in
    either through ``config_yaml`` file or ``config_override`` list.

    Parameters
    ----------
    config_yaml: str, optional (default = None)
        Path to a YAML file containing configuration parameters to override.
    config_override: List[Any], optional (default= [])
        A list of sequential attributes and values of parameters to override. This happens after
        overriding from YAML file.

    Examples
    --------
    Let a YAML file named "config.yaml" specify these parameters to override::

        SELECTION:
          DELTA_S: 0.2

    >>> _C = Config("config.yaml", ["SELECTION.DELTA_C", 0.1])
    >>> _C.SELECTION.DELTA_S  # default: 0.5
    0.2
    >>> _C.SELECTION.DELTA_C  # default: 0.5
    0.1

    Attributes
    ----------
    RANDOM_SEED: 0
        Seed for scenario generation and for random parameter initialization.
    __________

    SCENARIO:
        Synthetic multi-agent world, stands in for a recorded V2V dataset.

    SCENARIO.NUM_AGENTS: 4
        Number of connected agents, each of them acts as an ego agent in turn.

    SCENARIO.NUM_OBJECTS: 12
        Number of ground-truth vehicles moving in the world.

    SCENARIO.NUM_DARK_OBJECTS: 1
        How many of ``NUM_OBJECTS`` return no LiDAR points at all (completely invisible).

    SCENARIO.WORLD_EXTENT: 48.0
        Side length (meters) of the square world, centered at the origin.

    SCENARIO.TIMESTEPS: 20
        Number of simulator ticks in an episode.

    SCENARIO.AGENT_SPEED: 1.0
        Distance (meters) an agent travels along its heading per tick.

    SCENARIO.OBJECT_SPEED: 1.0
        Distance (meters) an object travels per tick, objects bounce at the world border.

    SCENARIO.OBJECT_SIZE: [4.0, 2.0]
        Length and width (meters) of every object.

    SCENARIO.AGENT_HEADINGS: [0.0, pi/2, pi, -pi/2]
        Headings agents are drawn from. Multiples of pi/2 keep boxes axis-aligned in every
        agent frame.

    SCENARIO.CLUTTER_DENSITY: 0.08
        Static background returns (vegetation, poles) per square meter.

    SCENARIO.AGENT_POSES: []
        Optional initial ``[x, y, yaw]`` of every agent, random placement when empty.

    SCENARIO.OBJECT_STATES: []
        Optional initial ``[x, y, heading, speed]`` of every object, random when empty.

    SCENARIO.OCCLUSION.BASE_POINTS: 200
        Points returned by a fully exposed object at zero range.

    SCENARIO.OCCLUSION.RANGE_DECAY: 10.0
        Range (meters) over which the point budget decays by a factor of e.

    SCENARIO.OCCLUSION.NUM_RAYS: 16
        Rays cast per object face to estimate its exposed fraction.

    SCENARIO.OCCLUSION.OBJECT_HEIGHT: 1.6
        Height (meters) of object returns.
    __________

    BEV:
        Rasterization of per-agent point sets.

    BEV.CELL_SIZE: 0.5
        Side length of a BEV cell in meters.

    BEV.SIZE: [64, 64]
        BEV grid (height, width) in cells. Together with ``CELL_SIZE`` it fixes the perceived
        extent, 32 m here.

    BEV.Z_RANGE: [0.0, 5.0]
        Vertical crop in meters.

    BEV.SLAB_HEIGHT: 0.625
        Height of one occupancy slab, number of channels is ``ceil(z extent / slab height)``.
    __________

    LADDER: [[64, 8, 8], [32, 16, 16]]
        Resolution ladder as (channels, height, width), coarse to fine.

    ENCODER.STEM_CHANNELS: 16
        Channels of the two full-resolution convolutions of the shared encoder.

    QUERY.CHANNELS: 64
        Hidden channels of the query generator.

    EDGE.CHANNELS: [128, 32, 8]
        Hidden channels of the edge encoder.
    __________

    SELECTION:
        Entropy-based communication selection.

    SELECTION.ENABLED: True
        Whether to select regions at all. ``False`` transmits every cell (all-region baseline).

    SELECTION.MODE: "topk"
        ``topk`` keeps the top-delta fraction, ``mean`` keeps values above the mean.

    SELECTION.DELTA_S: 0.5
        Self-select keep fraction, in (0, 1].

    SELECTION.DELTA_C: 0.5
        Cross-select keep fraction, in (0, 1].

    SELECTION.MIN_CELLS: 1
        A collaborator whose self-selection keeps fewer cells is skipped.

    SELECTION.CROSS_INDEX_BASE: "candidates"
        Population the cross-select threshold index is taken over, ``candidates`` or ``grid``.
    __________

    INTERPOLATION.RADIUS: 7
        Chebyshev radius of the RBF neighborhood.

    INTERPOLATION.INCLUDE_UNOBSERVED: True
        Whether unobserved neighbors participate in the weighted average (as zeros).

    GCGRU.ENABLED: True
        Whether received features are fused by the graph-based collaborative GRU. ``False``
        hands the plain ego features on as collaborative maps.

    MGFE.ENABLED: True
        Whether the coarse-to-fine enhancement runs. ``False`` puts the detection head on the
        finest collaborative map directly.

    HEAD.SCORE_THRESHOLD: 0.5
        Minimum foreground score of a decoded box.

    HEAD.NMS_IOU: 0.5
        IoU above which lower scored boxes are suppressed.

    EVAL.TAU: 4
        Visibility threshold on LiDAR points.

    EVAL.IOU_THRESHOLDS: [0.5, 0.7]
        IoU thresholds for AP and per-type recall.

    COMM.LOG_BASE: e
        Base of the logarithm in the communication volume.

    PARAMS.PATH: ""
        Path to a parameter file, empty string means seeded random initialization.
    """

    def __init__(self, config_yaml: Optional[str] = None, config_override: List[Any] = []):

        self._C = CN()
        self._C.RANDOM_SEED = 0

        self._C.SCENARIO = CN()
        self._C.SCENARIO.NUM_AGENTS = 4
        self._C.SCENARIO.NUM_OBJECTS = 12
        self._C.SCENARIO.NUM_DARK_OBJECTS = 1
        self._C.SCENARIO.WORLD_EXTENT = 48.0
        self._C.SCENARIO.TIMESTEPS = 20
        self._C.SCENARIO.AGENT_SPEED = 1.0
        self._C.SCENARIO.OBJECT_SPEED = 1.0
        self._C.SCENARIO.OBJECT_SIZE = [4.0, 2.0]
        self._C.SCENARIO.AGENT_HEADINGS = [0.0, math.pi / 2, math.pi, -math.pi / 2]
        self._C.SCENARIO.CLUTTER_DENSITY = 0.08
        self._C.SCENARIO.AGENT_POSES = []
        self._C.SCENARIO.OBJECT_STATES = []

        self._C.SCENARIO.OCCLUSION = CN()
        self._C.SCENARIO.OCCLUSION.BASE_POINTS = 200
        self._C.SCENARIO.OCCLUSION.RANGE_DECAY = 10.0
        self._C.SCENARIO.OCCLUSION.NUM_RAYS = 16
        self._C.SCENARIO.OCCLUSION.OBJECT_HEIGHT = 1.6

        self._C.BEV = CN()
        self._C.BEV.CELL_SIZE = 0.5
        self._C.BEV.SIZE = [64, 64]
        self._C.BEV.Z_RANGE = [0.0, 5.0]
        self._C.BEV.SLAB_HEIGHT = 0.625

        self._C.LADDER = [[64, 8, 8], [32, 16, 16]]

        self._C.ENCODER = CN()
        self._C.ENCODER.STEM_CHANNELS = 16

        self._C.QUERY = CN()
        self._C.QUERY.CHANNELS = 64

        self._C.EDGE = CN()
        self._C.EDGE.CHANNELS = [128, 32, 8]

        self._C.SELECTION = CN()
        self._C.SELECTION.ENABLED = True
        self._C.SELECTION.MODE = "topk"
        self._C.SELECTION.DELTA_S = 0.5
        self._C.SELECTION.DELTA_C = 0.5
        self._C.SELECTION.MIN_CELLS = 1
        self._C.SELECTION.CROSS_INDEX_BASE = "candidates"

        self._C.INTERPOLATION = CN()
        self._C.INTERPOLATION.RADIUS = 7
        self._C.INTERPOLATION.INCLUDE_UNOBSERVED = True

        self._C.GCGRU = CN()
        self._C.GCGRU.ENABLED = True

        self._C.MGFE = CN()
        self._C.MGFE.ENABLED = True

        self._C.HEAD = CN()
        self._C.HEAD.SCORE_THRESHOLD = 0.5
        self._C.HEAD.NMS_IOU = 0.5

        self._C.EVAL = CN()
        self._C.EVAL.TAU = 4
        self._C.EVAL.IOU_THRESHOLDS = [0.5, 0.7]

        self._C.COMM = CN()
        self._C.COMM.LOG_BASE = math.e

        self._C.PARAMS = CN()
        self._C.PARAMS.PATH = ""

        # Override parameter values from YAML file first, then from override list.
        if config_yaml is not None:
            self._C.merge_from_file(config_yaml)
        self._C.merge_from_list(config_override)

        # Make an instantiated object of this class immutable.
        self._C.freeze()

    def dump(self, file_path: str):
        r"""Save config at the specified file path.

        Parameters
        ----------
        file_path: str
            (YAML) path to save config at.
        """
        with open(file_path, "w") as config_file:
            self._C.dump(stream=config_file)

    def dumps(self) -> str:
        r"""Return the YAML text :meth:`dump` would write."""
        return self._C.dump()

    def __getattr__(self, attr: str):
        return self._C.__getattr__(attr)

    def __str__(self):
        return _config_str(self)

    def __repr__(self):
        return self._C.__repr__()


def _config_str(config: Config) -> str:
    r"""
    Collect a subset of config in sensible order (not alphabetical). Used by
    :func:`Config.__str__()`.

    Parameters
    ----------
    config: Config
        A :class:`Config` object which is to be printed.
    """
    _C = config

    __C: CN = CN({"RANDOM_SEED": _C.RANDOM_SEED, "LADDER": _C.LADDER})
    common_string: str = str(__C) + "\n"

    common_string += str(CN({"SCENARIO": _C.SCENARIO})) + "\n"
    common_string += str(CN({"BEV": _C.BEV})) + "\n"
    common_string += str(CN({"SELECTION": _C.SELECTION})) + "\n"

    # Interpolation only matters when some regions are dropped.
    if _C.SELECTION.ENABLED:
        common_string += str(CN({"INTERPOLATION": _C.INTERPOLATION})) + "\n"

    common_string += str(CN({"GCGRU": _C.GCGRU})) + "\n"
    common_string += str(CN({"MGFE": _C.MGFE})) + "\n"
    common_string += str(CN({"HEAD": _C.HEAD})) + "\n"
    common_string += str(CN({"EVAL": _C.EVAL})) + "\n"
    common_string += str(CN({"PARAMS": _C.PARAMS})) + "\n"
    return common_string
