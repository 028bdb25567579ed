r"""
Shared BEV encoder, one set of weights used by every agent.

Two 3x3 convolutions at full resolution (the stem) are followed by stride-2 blocks, each a
downsampling 3x3 convolution and a 3x3 convolution, every convolution followed by a ReLU. The
outputs of the last blocks form the resolution ladder.
"""
import math
from collections import OrderedDict
from typing import Dict, List, Sequence

import torch

from umc.errors import ConfigError, ParamError
from umc.modules import functional as UF
from umc.utils.checkpointing import ParamSet, ParamSpec


def conv_specs(
    prefix: str, out_channels: int, in_channels: int, kernel_size: int = 1, bias: bool = True
) -> Dict[str, ParamSpec]:
    r"""Weight (and bias) specs of one convolution, uniformly initialized by fan-in."""
    fan_in = in_channels * kernel_size * kernel_size
    specs = {
        f"{prefix}.weight": ParamSpec((out_channels, in_channels, kernel_size, kernel_size), fan_in)
    }
    if bias:
        specs[f"{prefix}.bias"] = ParamSpec((out_channels,), fan_in)
    return specs


def block_channels(ladder: Sequence[Sequence[int]], bev_height: int) -> List[int]:
    r"""
    Output channels of every stride-2 block. The last ``len(ladder)`` blocks produce the ladder
    levels (the very last one the coarsest level), earlier blocks use the finest channel count.
    """
    num_blocks = int(round(math.log2(bev_height / ladder[0][1])))
    if num_blocks < len(ladder) or bev_height != ladder[0][1] * 2 ** num_blocks:
        raise ConfigError(f"BEV height {bev_height} does not reach ladder {list(ladder)}.")
    finest_channels = ladder[-1][0]
    channels = [finest_channels] * (num_blocks - len(ladder))
    channels += [level[0] for level in reversed(ladder)]
    return channels


def encoder_specs(
    bev_channels: int, stem_channels: int, ladder: Sequence[Sequence[int]], bev_height: int
) -> Dict[str, ParamSpec]:
    r"""Parameter specs of the encoder, names relative to the ``encoder`` scope."""
    specs: Dict[str, ParamSpec] = OrderedDict()
    specs.update(conv_specs("stem.0", stem_channels, bev_channels, 3))
    specs.update(conv_specs("stem.1", stem_channels, stem_channels, 3))
    in_channels = stem_channels
    for index, out_channels in enumerate(block_channels(ladder, bev_height), start=1):
        specs.update(conv_specs(f"block{index}.down", out_channels, in_channels, 3))
        specs.update(conv_specs(f"block{index}.conv", out_channels, out_channels, 3))
        in_channels = out_channels
    return specs


def _conv_relu(input: torch.Tensor, params: ParamSet, name: str, stride: int = 1) -> torch.Tensor:
    return UF.relu(
        UF.conv2d(input, params[f"{name}.weight"], params.get(f"{name}.bias"), stride=stride, padding=1)
    )


def encoder_forward(bev: torch.Tensor, params: ParamSet, num_levels: int = 2) -> List[torch.Tensor]:
    r"""
    Encode a BEV occupancy grid into one feature per ladder level.

    Parameters
    ----------
    bev: torch.Tensor
        Occupancy of shape (slabs, height, width).
    params: ParamSet
        Parameters scoped to ``encoder``. The number of blocks is read off the present
        ``block<b>.down.weight`` names.
    num_levels: int, optional (default = 2)
        Ladder length, the outputs of the last ``num_levels`` blocks are returned.

    Returns
    -------
    List[torch.Tensor]
        Features ordered coarse to fine.
    """
    UF.check_grid(bev, "bev")
    output = _conv_relu(bev, params, "stem.0")
    output = _conv_relu(output, params, "stem.1")

    block_outputs: List[torch.Tensor] = []
    index = 1
    while f"block{index}.down.weight" in params:
        output = _conv_relu(output, params, f"block{index}.down", stride=2)
        output = _conv_relu(output, params, f"block{index}.conv")
        block_outputs.append(output)
        index += 1

    if len(block_outputs) < num_levels:
        raise ParamError(
            f"Encoder has {len(block_outputs)} blocks, {num_levels} ladder levels requested."
        )
    return list(reversed(block_outputs[-num_levels:]))
