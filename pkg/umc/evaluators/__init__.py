from .episode_evaluator import EpisodeEvaluator, EpisodeReport, run_episode


__all__ = ["EpisodeEvaluator", "EpisodeReport", "run_episode"]
