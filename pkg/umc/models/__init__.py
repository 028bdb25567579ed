from .collaborative_detector import CollaborativeDetector, build_param_specs
from .encoder import encoder_forward, encoder_specs


__all__ = ["CollaborativeDetector", "build_param_specs", "encoder_forward", "encoder_specs"]
