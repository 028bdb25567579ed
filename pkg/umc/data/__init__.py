from .bev import BevGrid, rasterize_bev
from .readers import DetectionsReader, GroundTruthReader
from .scenario import ScenarioConfig, SceneFrame, gen_scenario


__all__ = [
    "BevGrid",
    "rasterize_bev",
    "ScenarioConfig",
    "SceneFrame",
    "gen_scenario",
    "DetectionsReader",
    "GroundTruthReader",
]
