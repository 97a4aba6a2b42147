"""Small module system on top of the autodiff engine.

Modules register child modules and parameters through attribute assignment,
so every parameter gets a stable dotted name derived from its attribute
path.  Initialisation draws each parameter's values from a generator seeded
by (seed, name): two model variants that both contain a parameter of the
same name therefore start from bit-identical values, which is what makes
single-toggle comparisons meaningful.

Parameters are stored to disk in a flat little-endian container:

    magic "SALF" | version u32 | repeated records
    record: name_len u32 | name bytes (utf-8) | rank u32 | dims u32 * rank
            | payload float32 * prod(dims)

Payloads are float32 regardless of the runtime precision mode.
"""

from __future__ import annotations

import struct
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .errors import ValidationError

CONTAINER_MAGIC = b"SALF"
CONTAINER_VERSION = 1

# init rules per parameter kind
KIND_CONV_WEIGHT = "conv_weight"
KIND_ZERO = "zero"
KIND_ONE = "one"


class Parameter:
    """A named trainable leaf.

    ``name`` is assigned when the owning model is initialised; ``fan_in`` is
    the product in_c * kh * kw for convolution weights and drives the uniform
    init bound sqrt(1 / fan_in).
    """

    def __init__(self, shape: tuple[int, ...], kind: str, fan_in: int = 0):
        self.shape = tuple(int(s) for s in shape)
        self.kind = kind
        self.fan_in = int(fan_in)
        self.name: str | None = None
        self.tensor = ad.Tensor(np.zeros(self.shape, dtype=ad.default_dtype()), requires_grad=True)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        if value.shape != self.shape:
            raise ValidationError(f"parameter {self.name}: shape {value.shape} != {self.shape}")
        self.tensor.data = value.astype(self.tensor.data.dtype)

    def grad_value(self) -> np.ndarray:
        return self.tensor.grad_value()

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def initialize(self, seed: int) -> None:
        rng = _named_rng(seed, self.name or "")
        if self.kind == KIND_CONV_WEIGHT:
            bound = float(np.sqrt(1.0 / self.fan_in))
            values = rng.uniform(-bound, bound, size=self.shape)
        elif self.kind == KIND_ZERO:
            values = np.zeros(self.shape)
        elif self.kind == KIND_ONE:
            values = np.ones(self.shape)
        else:
            raise ValidationError(f"unknown parameter kind {self.kind!r}")
        self.tensor.data = values.astype(ad.default_dtype())


def _named_rng(seed: int, name: str) -> np.random.Generator:
    # entropy mixes the run seed with the parameter's dotted name, so equal
    # names get equal draws no matter which model variant they sit in
    entropy = [int(seed)] + list(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy))


class Module:
    """Base class; child modules and parameters register on assignment."""

    def __init__(self):
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name: str, value) -> None:
        if isinstance(value, (Module, Parameter)):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, child in self._children.items():
            path = f"{prefix}.{name}" if prefix else name
            if isinstance(child, Parameter):
                yield path, child
            else:
                yield from child.named_parameters(path)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def initialize(self, seed: int) -> None:
        """Name every parameter by its attribute path and draw its values."""
        if seed < 0:
            raise ValidationError(f"seed must be non-negative, got {seed}")
        for name, param in self.named_parameters():
            param.name = name
            param.initialize(seed)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ValidationError(f"parameter set mismatch: missing={missing[:4]} extra={extra[:4]}")
        for name, param in own.items():
            arr = state[name]
            if tuple(arr.shape) != param.shape:
                raise ValidationError(f"parameter {name}: stored shape {arr.shape} != {param.shape}")
            param.data = np.asarray(arr)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


class Conv2d(Module):
    def __init__(self, in_c: int, out_c: int, k: int, stride: int = 1, padding: int = 0,
                 dilation: int = 1, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.weight = Parameter((out_c, in_c, k, k), KIND_CONV_WEIGHT, fan_in=in_c * k * k)
        self.bias = Parameter((1, out_c, 1, 1), KIND_ZERO) if bias else None

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        b = self.bias.tensor if self.bias is not None else None
        return ad.conv2d(x, self.weight.tensor, b, stride=self.stride,
                         padding=self.padding, dilation=self.dilation)

    __call__ = forward


class BatchNorm2d(Module):
    def __init__(self, c: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter((1, c, 1, 1), KIND_ONE)
        self.beta = Parameter((1, c, 1, 1), KIND_ZERO)

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        return ad.batchnorm(x, self.gamma.tensor, self.beta.tensor, eps=self.eps)

    __call__ = forward


class BConv(Module):
    """conv -> per-batch norm -> ReLU, the workhorse block of the network."""

    def __init__(self, in_c: int, out_c: int, k: int = 3, stride: int = 1,
                 padding: int | None = None, dilation: int = 1):
        super().__init__()
        if padding is None:
            padding = dilation * (k - 1) // 2
        self.conv = Conv2d(in_c, out_c, k, stride=stride, padding=padding, dilation=dilation, bias=False)
        self.bn = BatchNorm2d(out_c)

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        return ad.relu(self.bn(self.conv(x)))

    __call__ = forward


# ---------------------------------------------------------------------------
# parameter container i/o


def save_params(path, state: dict[str, np.ndarray]) -> None:
    """Write named arrays to the flat binary container (float32 payloads)."""
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<I", CONTAINER_VERSION))
        for name, arr in state.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    """Read a container written by save_params; strict about structure."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CONTAINER_MAGIC:
        raise ValidationError(f"{path}: bad magic {blob[:4]!r}")
    offset = 4

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise ValidationError(f"{path}: truncated container at byte {offset}")
        chunk = blob[offset:offset + n]
        offset += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != CONTAINER_VERSION:
        raise ValidationError(f"{path}: unsupported container version {version}")
    state: dict[str, np.ndarray] = {}
    while offset < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = take(4 * count)
        state[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return state
