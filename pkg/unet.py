"""
Federated sCT Simulator - Residual U-Net

Builds the encoder/decoder network from the layers in :mod:`autograd`:

* a 7x7 stem convolution, then residual blocks at full resolution
* per descent level: 2x2 max-pool, a 3x3 transition convolution doubling the
  filters, residual blocks
* per ascent level: x2 upsampling, concatenation with the matching encoder
  output, a 3x3 fusing convolution halving the filters, residual blocks
* a final 1x1 projection to one output channel (linear, no batch norm)

Every convolution except the projection is followed by batch normalization and
ReLU. A residual block is two such convolutions with an identity shortcut.

Parameters are exchanged with the outside world as a :class:`NamedParameterSet`:
an ordered, name-unique collection of arrays with their :class:`LayerTag`.
"""

import math
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

import autograd as ag
import utils
from autograd import LayerTag, Parameter, ParamKind
from schemas import UNetConfig

logger = utils.logger

__all__ = [
    "NamedParameterSet",
    "Conv2d",
    "BatchNorm2d",
    "ConvBNReLU",
    "ResidualBlock",
    "UNet",
    "build_unet",
]


# ============================================================================
# Named Parameter Set
# ============================================================================


class NamedParameterSet:
    """Ordered ``name -> (array, LayerTag)`` mapping with unique names.

    Values are stored as read-only copies, so a set can be handed between
    threads without sharing mutable buffers.
    """

    def __init__(self, entries: Iterable[Tuple[str, np.ndarray, LayerTag]] = ()):
        self._values: Dict[str, np.ndarray] = {}
        self._tags: Dict[str, LayerTag] = {}
        for name, value, tag in entries:
            if name in self._values:
                raise ValueError(f"duplicate parameter name {name!r}")
            frozen = np.array(value, copy=True)
            frozen.setflags(write=False)
            self._values[name] = frozen
            self._tags[name] = tag

    def __len__(self) -> int:
        return len(self._values)

    def __contains__(self, name: object) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[Tuple[str, np.ndarray, LayerTag]]:
        for name, value in self._values.items():
            yield name, value, self._tags[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __repr__(self) -> str:
        return f"NamedParameterSet({len(self)} entries)"

    def names(self) -> List[str]:
        return list(self._values)

    def tag(self, name: str) -> LayerTag:
        return self._tags[name]

    def filter(self, predicate: Callable[[str, LayerTag], bool]) -> "NamedParameterSet":
        return NamedParameterSet((n, v, t) for n, v, t in self if predicate(n, t))

    def without_batchnorm(self) -> "NamedParameterSet":
        return self.filter(lambda _name, tag: not tag.is_batchnorm)

    def with_values(self, values: Dict[str, np.ndarray]) -> "NamedParameterSet":
        """Same names and tags with the given arrays swapped in (missing names keep their value)."""
        unknown = [name for name in values if name not in self._values]
        if unknown:
            raise ValueError(f"unknown parameter name {unknown[0]!r}")
        return NamedParameterSet((n, values.get(n, v), t) for n, v, t in self)

    def check_same_schema(self, other: "NamedParameterSet") -> None:
        """Raise ``ValueError`` naming the first entry whose name, shape or tag differs."""
        for (name_a, value_a, tag_a), (name_b, value_b, tag_b) in zip(self, other):
            if name_a != name_b:
                raise ValueError(f"parameter name mismatch: {name_a!r} vs {name_b!r}")
            if value_a.shape != value_b.shape:
                raise ValueError(f"shape mismatch for {name_a!r}: {value_a.shape} vs {value_b.shape}")
            if tag_a != tag_b:
                raise ValueError(f"tag mismatch for {name_a!r}: {tag_a} vs {tag_b}")
        if len(self) != len(other):
            longer = self if len(self) > len(other) else other
            extra = longer.names()[min(len(self), len(other))]
            raise ValueError(f"parameter count mismatch ({len(self)} vs {len(other)}), first unmatched {extra!r}")

    def equals(self, other: "NamedParameterSet") -> bool:
        """Bit-exact equality of names, tags, dtypes and values."""
        if self.names() != other.names():
            return False
        for name, value, tag in self:
            theirs = other[name]
            if other.tag(name) != tag or value.dtype != theirs.dtype or value.shape != theirs.shape:
                return False
            if value.tobytes() != theirs.tobytes():
                return False
        return True


# ============================================================================
# Layers
# ============================================================================


class Conv2d:
    """Same-padded stride-1 convolution with Kaiming-uniform initialisation."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        layer_index: int,
        rng: np.random.Generator,
        dtype: np.dtype = np.float32,
    ):
        fan_in = in_channels * kernel * kernel
        bound = math.sqrt(6.0 / fan_in)
        weight = rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel, kernel)).astype(dtype)
        self.weight = Parameter(weight, LayerTag(ParamKind.CONV_WEIGHT, layer_index))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype), LayerTag(ParamKind.CONV_BIAS, layer_index))
        self._cache: Optional[ag.ConvCache] = None

    def named_parameters(self) -> List[Tuple[str, Parameter]]:
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        out, cache = ag.conv2d(x, self.weight.value, self.bias.value)
        self._cache = cache if train else None
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("Conv2d.backward called without a train-mode forward")
        dx, dweight, dbias = ag.conv2d_backward(dout, self._cache)
        self.weight.accumulate(dweight.astype(self.weight.value.dtype, copy=False))
        self.bias.accumulate(dbias.astype(self.bias.value.dtype, copy=False))
        self._cache = None
        return dx


class BatchNorm2d:
    def __init__(self, channels: int, layer_index: int, momentum: float, eps: float, dtype: np.dtype = np.float32):
        self.gamma = Parameter(np.ones(channels, dtype=dtype), LayerTag(ParamKind.BN_GAMMA, layer_index))
        self.beta = Parameter(np.zeros(channels, dtype=dtype), LayerTag(ParamKind.BN_BETA, layer_index))
        self.running_mean = Parameter(
            np.zeros(channels, dtype=dtype), LayerTag(ParamKind.BN_RUNNING_MEAN, layer_index)
        )
        self.running_var = Parameter(np.ones(channels, dtype=dtype), LayerTag(ParamKind.BN_RUNNING_VAR, layer_index))
        self.momentum = momentum
        self.eps = eps
        self._cache: Optional[ag.BatchNormCache] = None

    def named_parameters(self) -> List[Tuple[str, Parameter]]:
        return [
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("running_mean", self.running_mean),
            ("running_var", self.running_var),
        ]

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        out, cache = ag.batchnorm2d(
            x,
            self.gamma.value,
            self.beta.value,
            self.running_mean.value,
            self.running_var.value,
            train=train,
            momentum=self.momentum,
            eps=self.eps,
        )
        self._cache = cache if train else None
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("BatchNorm2d.backward called without a train-mode forward")
        dx, dgamma, dbeta = ag.batchnorm2d_backward(dout, self._cache)
        self.gamma.accumulate(dgamma.astype(self.gamma.value.dtype, copy=False))
        self.beta.accumulate(dbeta.astype(self.beta.value.dtype, copy=False))
        self._cache = None
        return dx.astype(dout.dtype, copy=False)


class ConvBNReLU:
    """Convolution, batch normalization and ReLU sharing one layer ordinal."""

    def __init__(self, in_channels, out_channels, kernel, layer_index, rng, momentum, eps, dtype=np.float32):
        self.conv = Conv2d(in_channels, out_channels, kernel, layer_index, rng, dtype)
        self.bn = BatchNorm2d(out_channels, layer_index, momentum, eps, dtype)
        self._mask: Optional[np.ndarray] = None

    def named_parameters(self) -> List[Tuple[str, Parameter]]:
        return [(f"conv.{n}", p) for n, p in self.conv.named_parameters()] + [
            (f"bn.{n}", p) for n, p in self.bn.named_parameters()
        ]

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        out, mask = ag.relu(self.bn.forward(self.conv.forward(x, train), train))
        self._mask = mask if train else None
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise RuntimeError("ConvBNReLU.backward called without a train-mode forward")
        d = ag.relu_backward(dout, self._mask)
        self._mask = None
        return self.conv.backward(self.bn.backward(d))


class ResidualBlock:
    """Two 3x3 ConvBNReLU units with an identity shortcut."""

    def __init__(self, channels, first_index, rng, momentum, eps, dtype=np.float32):
        self.unit1 = ConvBNReLU(channels, channels, 3, first_index, rng, momentum, eps, dtype)
        self.unit2 = ConvBNReLU(channels, channels, 3, first_index + 1, rng, momentum, eps, dtype)

    def named_parameters(self) -> List[Tuple[str, Parameter]]:
        return [(f"unit1.{n}", p) for n, p in self.unit1.named_parameters()] + [
            (f"unit2.{n}", p) for n, p in self.unit2.named_parameters()
        ]

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        return self.unit2.forward(self.unit1.forward(x, train), train) + x

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return self.unit1.backward(self.unit2.backward(dout)) + dout


# ============================================================================
# U-Net
# ============================================================================


class _Stage:
    """An entry unit (stem, transition or fuse convolution) followed by residual blocks."""

    def __init__(self, entry: ConvBNReLU, blocks: List[ResidualBlock]):
        self.entry = entry
        self.blocks = blocks

    def named_parameters(self) -> List[Tuple[str, Parameter]]:
        params = [(f"entry.{n}", p) for n, p in self.entry.named_parameters()]
        for i, block in enumerate(self.blocks):
            params.extend((f"block{i}.{n}", p) for n, p in block.named_parameters())
        return params

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        x = self.entry.forward(x, train)
        for block in self.blocks:
            x = block.forward(x, train)
        return x

    def backward(self, dout: np.ndarray) -> np.ndarray:
        for block in reversed(self.blocks):
            dout = block.backward(dout)
        return self.entry.backward(dout)

    def convs(self) -> List[Conv2d]:
        units = [self.entry] + [u for b in self.blocks for u in (b.unit1, b.unit2)]
        return [u.conv for u in units]


class UNet:
    """Residual U-Net mapping ``[N, 1, S, S]`` MRI slices to ``[N, 1, S, S]`` CT slices."""

    def __init__(
        self,
        config: UNetConfig,
        seed: int = 0,
        dtype: np.dtype = np.float32,
        bn_momentum: float = 0.1,
        bn_eps: float = 1e-5,
    ):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        counter = [0]

        def unit(cin: int, cout: int, kernel: int) -> ConvBNReLU:
            layer = ConvBNReLU(cin, cout, kernel, counter[0], rng, bn_momentum, bn_eps, self.dtype)
            counter[0] += 1
            return layer

        def blocks(channels: int) -> List[ResidualBlock]:
            out = []
            for _ in range(config.blocks_per_level):
                out.append(ResidualBlock(channels, counter[0], rng, bn_momentum, bn_eps, self.dtype))
                counter[0] += 2
            return out

        channels = [config.base_channels * 2**level for level in range(config.depth + 1)]
        self.channels = channels
        self.encoder: List[_Stage] = [_Stage(unit(1, channels[0], config.stem_kernel), blocks(channels[0]))]
        for level in range(1, config.depth + 1):
            self.encoder.append(_Stage(unit(channels[level - 1], channels[level], 3), blocks(channels[level])))
        # decoder[level] produces channels[level]; built bottom-up so ordinals follow execution order
        decoder: Dict[int, _Stage] = {}
        for level in reversed(range(config.depth)):
            fuse = unit(channels[level + 1] + channels[level], channels[level], 3)
            decoder[level] = _Stage(fuse, blocks(channels[level]))
        self.decoder: List[_Stage] = [decoder[level] for level in range(config.depth)]
        self.head = Conv2d(channels[0], 1, 1, counter[0], rng, self.dtype)
        counter[0] += 1

        self._pool_caches: List[ag.PoolCache] = []
        self._split_channels: List[int] = []
        self._trained_forward = False

    # ------------------------------------------------------------------
    # Structure
    # ------------------------------------------------------------------

    def named_parameters(self) -> List[Tuple[str, Parameter]]:
        params: List[Tuple[str, Parameter]] = []
        for level, stage in enumerate(self.encoder):
            name = "stem" if level == 0 else f"enc{level}"
            params.extend((f"{name}.{n}", p) for n, p in stage.named_parameters())
        for level in reversed(range(self.config.depth)):
            params.extend((f"dec{level}.{n}", p) for n, p in self.decoder[level].named_parameters())
        params.extend((f"head.{n}", p) for n, p in self.head.named_parameters())
        return params

    def conv_layers(self) -> List[Conv2d]:
        convs = [c for stage in self.encoder for c in stage.convs()]
        convs += [c for level in reversed(range(self.config.depth)) for c in self.decoder[level].convs()]
        return convs + [self.head]

    def conv_census(self) -> int:
        """Number of convolutional layers in the built graph, projection included."""
        return len(self.conv_layers())

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    # ------------------------------------------------------------------
    # Forward / backward
    # ------------------------------------------------------------------

    def forward(self, batch: np.ndarray, train: bool) -> np.ndarray:
        """
        Run the network.

        Args:
            batch: ``[N, 1, S, S]`` with ``S == config.input_size``
            train: Batch statistics and activation caching when True

        Returns:
            ``[N, 1, S, S]`` prediction in normalized intensity space
        """
        size = self.config.input_size
        if batch.ndim != 4 or batch.shape[1] != 1 or batch.shape[2:] != (size, size):
            raise ValueError(f"expected input of shape [N, 1, {size}, {size}], got {list(batch.shape)}")
        x = batch.astype(self.dtype, copy=False)
        pool_caches: List[ag.PoolCache] = []
        skips: List[np.ndarray] = []

        x = self.encoder[0].forward(x, train)
        for level in range(1, self.config.depth + 1):
            skips.append(x)
            x, pool_cache = ag.maxpool2d(x)
            pool_caches.append(pool_cache)
            x = self.encoder[level].forward(x, train)

        split_channels: List[int] = []
        for level in reversed(range(self.config.depth)):
            up = ag.upsample2d_nearest(x)
            split_channels.append(up.shape[1])
            x = self.decoder[level].forward(np.concatenate([up, skips[level]], axis=1), train)

        out = self.head.forward(x, train)
        if train:
            self._pool_caches = pool_caches
            self._split_channels = split_channels
            self._trained_forward = True
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients for the last train-mode forward and return the input gradient."""
        if not self._trained_forward:
            raise RuntimeError("UNet.backward called without a train-mode forward")
        depth = self.config.depth
        d = self.head.backward(dout.astype(self.dtype, copy=False))

        dskips: Dict[int, np.ndarray] = {}
        for level in range(depth):
            dcat = self.decoder[level].backward(d)
            up_channels = self._split_channels[depth - 1 - level]
            dskips[level] = dcat[:, up_channels:]
            d = ag.upsample2d_nearest_backward(dcat[:, :up_channels])

        for level in reversed(range(1, depth + 1)):
            d = self.encoder[level].backward(d)
            d = ag.maxpool2d_backward(d, self._pool_caches[level - 1]) + dskips[level - 1]
        dx = self.encoder[0].backward(d)

        self._pool_caches = []
        self._split_channels = []
        self._trained_forward = False
        return dx

    # ------------------------------------------------------------------
    # Parameter exchange
    # ------------------------------------------------------------------

    def flatten(self) -> NamedParameterSet:
        return NamedParameterSet((name, p.value, p.tag) for name, p in self.named_parameters())

    def unflatten(self, pset: NamedParameterSet, partial: bool = False) -> "UNet":
        """
        Load values from ``pset`` into this model in place.

        Args:
            pset: Parameter set with this model's names, shapes and tags
            partial: Accept a subset of names (entries absent from ``pset`` keep
                their current value)

        Raises:
            ValueError: naming the first missing, unknown or mismatched entry
        """
        own = dict(self.named_parameters())
        for name, value, tag in pset:
            if name not in own:
                raise ValueError(f"unknown parameter name {name!r}")
            param = own[name]
            if value.shape != param.value.shape:
                raise ValueError(f"shape mismatch for {name!r}: {value.shape} vs model {param.value.shape}")
            if tag != param.tag:
                raise ValueError(f"tag mismatch for {name!r}: {tag} vs model {param.tag}")
        if not partial:
            for name in own:
                if name not in pset:
                    raise ValueError(f"missing parameter {name!r}")
        for name, value, _ in pset:
            np.copyto(own[name].value, value, casting="same_kind")
        return self


def build_unet(
    config: UNetConfig,
    seed: int = 0,
    dtype: np.dtype = np.float32,
    bn_momentum: float = 0.1,
    bn_eps: float = 1e-5,
) -> UNet:
    """Build a freshly initialised U-Net; identical ``(config, seed)`` gives identical weights."""
    model = UNet(config, seed=seed, dtype=dtype, bn_momentum=bn_momentum, bn_eps=bn_eps)
    logger.debug(
        "Built U-Net: input %d, depth %d, base %d, %d convolutions",
        config.input_size,
        config.depth,
        config.base_channels,
        model.conv_census(),
    )
    return model
