from typing import Any, Dict, Optional, Sequence

import torch
from tqdm import tqdm

from umc.config import Config
from umc.data.scenario import SceneFrame


class _Evaluator(object):
    r"""
    A base class for forward-only evaluation over the frames of an episode. Frames are processed
    strictly in order, since agents carry recurrent state from one timestep to the next.

    Extended Summary
    ----------------
    Extend this class and override :meth:`_do_iteration` method, with core evaluation loop - what
    happens every timestep, given a ``frame`` of the episode this class holds. Override
    :meth:`_report` to assemble the final result from whatever the iterations accumulated.

    Parameters
    ----------
    config: Config
        A :class:`~umc.Config` object with all the relevant configuration parameters.
    frames: Sequence[SceneFrame]
        Frames of the episode, in timestep order.
    """

    def __init__(self, config: Config, frames: Sequence[SceneFrame]):
        self._C = config
        self._frames = list(frames)

    @property
    def frames(self):
        return self._frames

    def evaluate(self, num_frames: Optional[int] = None) -> Any:
        r"""
        Run the first ``num_frames`` frames (all of them if ``None``) and return the report.
        """
        frames = self._frames if num_frames is None else self._frames[:num_frames]
        with torch.no_grad():
            for frame in tqdm(frames, desc="timesteps"):
                _ = self._do_iteration(frame)
        return self._report()

    def _do_iteration(self, frame: SceneFrame) -> Dict[str, Any]:
        r"""
        Core evaluation logic for one timestep.

        Returns
        -------
        Dict[str, Any]
            Per-timestep statistics.
        """
        raise NotImplementedError

    def _report(self) -> Any:
        raise NotImplementedError
