r"""
Named weight tensors and their on-disk container.

A :class:`ParamSet` plays the role a ``state_dict`` plays for a PyTorch module: every trainable
symbol of the pipeline (query generator, gates, edge encoder, MGFE, detection head, RBF lambda,
L2Norm scales) is addressed by a dotted name. Since the pipeline is forward-only, weights are
either read from a ``.umcp`` file or initialized from a seed.

File layout (all integers little-endian)::

    b"UMCP" | version: u32 | entry count: u32 | entries...
    entry = name length: u16 | UTF-8 name | rank: u8 | dims: u32 * rank | payload: f64 * numel
"""
import hashlib
import logging
import math
import struct
from collections import OrderedDict
from typing import Dict, Iterator, Mapping, NamedTuple, Optional, Tuple

import numpy as np
import torch

from umc.errors import ParamError


logger: logging.Logger = logging.getLogger(__name__)

PARAMS_MAGIC = b"UMCP"
PARAMS_VERSION = 1

# Batch norm statistics are folded with the epsilon PyTorch uses by default.
BATCH_NORM_EPS = 1e-5
_BATCH_NORM_KEYS = ("weight", "bias", "running_mean", "running_var")


class ParamSpec(NamedTuple):
    r"""
    Expected shape of one named parameter, and how to initialize it without a file.

    Parameters
    ----------
    shape: Tuple[int, ...]
        Tensor shape, rank at most 4.
    fan_in: int, optional (default = 0)
        Fan-in of the layer this parameter belongs to, bounds of uniform initialization are
        ``+/- 1 / sqrt(fan_in)``.
    fill: float, optional (default = None)
        If given, initialize with this constant instead (L2Norm scales, RBF lambda).
    """

    shape: Tuple[int, ...]
    fan_in: int = 0
    fill: Optional[float] = None


class ParamSet(Mapping):
    r"""
    An immutable mapping from parameter names to ``torch.float64`` tensors. Looking up a name
    which does not exist raises :class:`~umc.errors.ParamError`, never a silent zero.

    Extended Summary
    ----------------
    :meth:`scope` returns a view which prepends a prefix to every lookup. Components receive
    a scoped view, so a gate only needs to know its local name (``"reset.weight"``) and not
    where in the pipeline it lives (``"level0.gcgru.reset.weight"``).

    Parameters
    ----------
    tensors: Dict[str, torch.Tensor]
        Named tensors. They are converted to float64 and must be finite.

    Examples
    --------
    >>> params = ParamSet({"level0.query.conv1.weight": torch.ones(64, 32, 1, 1)})
    >>> params.scope("level0.query")["conv1.weight"].shape
    torch.Size([64, 32, 1, 1])
    >>> params["missing"]
    Traceback (most recent call last):
    ...
    umc.errors.ParamError: Missing parameter: missing
    """

    def __init__(self, tensors: Mapping[str, torch.Tensor], _prefix: str = ""):
        if _prefix:
            # Views share storage with their parent, it was validated already.
            self._tensors = tensors
        else:
            self._tensors = OrderedDict()
            for name in sorted(tensors):
                tensor = torch.as_tensor(tensors[name]).detach().to(torch.float64).clone()
                if tensor.dim() > 4:
                    raise ParamError(f"Parameter {name} has rank {tensor.dim()} > 4.")
                if not bool(torch.isfinite(tensor).all()):
                    raise ParamError(f"Parameter {name} has non-finite entries.")
                self._tensors[name] = tensor
        self._prefix = _prefix

    def __getitem__(self, name: str) -> torch.Tensor:
        full_name = self._prefix + name
        if full_name not in self._tensors:
            raise ParamError(f"Missing parameter: {full_name}")
        return self._tensors[full_name]

    def __iter__(self) -> Iterator[str]:
        for name in self._tensors:
            if name.startswith(self._prefix):
                yield name[len(self._prefix):]

    def __len__(self) -> int:
        return sum(1 for _ in self)

    def __contains__(self, name: object) -> bool:
        return isinstance(name, str) and (self._prefix + name) in self._tensors

    def scope(self, prefix: str) -> "ParamSet":
        r"""Return a view where every name is looked up under ``prefix + "."``."""
        return ParamSet(self._tensors, _prefix=f"{self._prefix}{prefix}.")

    def get_scalar(self, name: str, default: Optional[float] = None) -> float:
        r"""
        Read a one-element parameter as a Python float. ``default`` is returned only if it is
        given explicitly and the name is absent.
        """
        if name not in self and default is not None:
            return default
        tensor = self[name]
        if tensor.numel() != 1:
            raise ParamError(f"Parameter {self._prefix + name} is not a scalar.")
        return float(tensor.reshape(-1)[0])

    # --------------------------------------------------------------------------------------------
    #   CONSTRUCTION AND VALIDATION
    # --------------------------------------------------------------------------------------------

    @classmethod
    def random(cls, specs: Mapping[str, ParamSpec], seed: int) -> "ParamSet":
        r"""
        Initialize every parameter of ``specs`` from one seeded generator, in name-sorted order.
        Weights and biases are uniform in ``[-1/sqrt(fan_in), +1/sqrt(fan_in)]``.
        """
        generator = torch.Generator().manual_seed(seed)
        tensors: Dict[str, torch.Tensor] = {}
        for name in sorted(specs):
            spec = specs[name]
            if spec.fill is not None:
                tensors[name] = torch.full(spec.shape, spec.fill, dtype=torch.float64)
            else:
                bound = 1.0 / math.sqrt(max(spec.fan_in, 1))
                uniform = torch.rand(spec.shape, generator=generator, dtype=torch.float64)
                tensors[name] = uniform * 2.0 * bound - bound
        return cls(tensors)

    def validate(self, specs: Mapping[str, ParamSpec]):
        r"""Raise :class:`~umc.errors.ParamError` unless names and shapes match ``specs``."""
        missing = sorted(set(specs) - set(self))
        extra = sorted(set(self) - set(specs))
        if missing:
            raise ParamError(f"Missing parameters: {', '.join(missing)}")
        if extra:
            raise ParamError(f"Unexpected parameters: {', '.join(extra)}")
        for name, spec in specs.items():
            if tuple(self[name].shape) != tuple(spec.shape):
                raise ParamError(
                    f"Parameter {name} has shape {tuple(self[name].shape)}, "
                    f"expected {tuple(spec.shape)}."
                )

    def fold_batch_norm(self) -> "ParamSet":
        r"""
        Fold inference-mode batch normalization into the preceding convolution. For every
        complete quadruple ``<layer>.bn.{weight, bias, running_mean, running_var}`` the conv
        ``<layer>.weight`` is rescaled per output channel and ``<layer>.bias`` is created (or
        shifted). Batch norm entries do not survive folding.
        """
        tensors = OrderedDict(self._tensors)
        layers = sorted(
            name[: -len(".bn.running_var")]
            for name in tensors
            if name.endswith(".bn.running_var")
        )
        for layer in layers:
            bn_names = [f"{layer}.bn.{key}" for key in _BATCH_NORM_KEYS]
            if not all(name in tensors for name in bn_names):
                raise ParamError(f"Incomplete batch norm parameters for layer {layer}.")
            gamma, beta, mean, var = (tensors.pop(name) for name in bn_names)

            weight = tensors.get(f"{layer}.weight")
            if weight is None:
                raise ParamError(f"Batch norm {layer}.bn follows no convolution {layer}.weight.")
            bias = tensors.get(f"{layer}.bias", torch.zeros_like(mean))

            factor = gamma / torch.sqrt(var + BATCH_NORM_EPS)
            tensors[f"{layer}.weight"] = weight * factor.view(-1, *([1] * (weight.dim() - 1)))
            tensors[f"{layer}.bias"] = (bias - mean) * factor + beta
            logger.debug(f"Folded batch norm into {layer}.")
        return ParamSet(tensors)

    # --------------------------------------------------------------------------------------------
    #   SERIALIZATION
    # --------------------------------------------------------------------------------------------

    def to_bytes(self) -> bytes:
        if self._prefix:
            raise ParamError("Serialize the root ParamSet, not a scoped view.")
        chunks = [PARAMS_MAGIC, struct.pack("<II", PARAMS_VERSION, len(self._tensors))]
        for name, tensor in self._tensors.items():
            encoded_name = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(encoded_name)))
            chunks.append(encoded_name)
            chunks.append(struct.pack("<B", tensor.dim()))
            chunks.append(struct.pack(f"<{tensor.dim()}I", *tensor.shape))
            chunks.append(tensor.numpy().astype("<f8").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamSet":
        r"""Parse a ``.umcp`` byte string. The total length must be consumed exactly."""
        reader = _ByteReader(data)
        if reader.take(4) != PARAMS_MAGIC:
            raise ParamError("Not a parameter file: bad magic bytes.")
        version, count = reader.unpack("<II")
        if version != PARAMS_VERSION:
            raise ParamError(f"Unsupported parameter file version {version}.")

        tensors: Dict[str, torch.Tensor] = {}
        for _ in range(count):
            (name_length,) = reader.unpack("<H")
            try:
                name = reader.take(name_length).decode("utf-8")
            except UnicodeDecodeError:
                raise ParamError("Parameter name is not valid UTF-8.")
            if name in tensors:
                raise ParamError(f"Duplicate parameter name: {name}")

            (rank,) = reader.unpack("<B")
            if rank > 4:
                raise ParamError(f"Parameter {name} has rank {rank} > 4.")
            shape = reader.unpack(f"<{rank}I")
            numel = int(np.prod(shape, dtype=np.int64)) if rank > 0 else 1
            payload = np.frombuffer(reader.take(8 * numel), dtype="<f8")
            tensors[name] = torch.from_numpy(payload.astype(np.float64).reshape(shape))

        if not reader.exhausted:
            raise ParamError(f"Parameter file has {reader.remaining} trailing bytes.")
        return cls(tensors)

    def save(self, path: str):
        with open(path, "wb") as params_file:
            params_file.write(self.to_bytes())

    @classmethod
    def load(cls, path: str) -> "ParamSet":
        with open(path, "rb") as params_file:
            return cls.from_bytes(params_file.read())

    def digest(self) -> str:
        r"""SHA-256 of the serialized parameters, recorded in run manifests."""
        return hashlib.sha256(self.to_bytes()).hexdigest()


class _ByteReader(object):
    r"""Sequential reader which raises :class:`~umc.errors.ParamError` on short reads."""

    def __init__(self, data: bytes):
        self._data = data
        self._offset = 0

    def take(self, num_bytes: int) -> bytes:
        if self._offset + num_bytes > len(self._data):
            raise ParamError("Parameter file is truncated.")
        chunk = self._data[self._offset: self._offset + num_bytes]
        self._offset += num_bytes
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def remaining(self) -> int:
        return len(self._data) - self._offset

    @property
    def exhausted(self) -> bool:
        return self.remaining == 0
