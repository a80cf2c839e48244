# app/nn.py - function approximators, gradients, optimizers and checkpoints
import hashlib
import logging
import math
import re
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from app.errors import DatasetError, NumericalAbort, PreconditionError

logger = logging.getLogger(__name__)

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
SQUASH_LIMIT = 1.0 - 1e-6

CHECKPOINT_MAGIC = b"LISP"
CHECKPOINT_VERSION = 1

_ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {"tanh": torch.tanh, "relu": F.relu}

_strict = False


@contextmanager
def strict_checks() -> Iterator[None]:
    """Check every intermediate of Mlp.forward for NaN/Inf while active."""
    global _strict
    previous, _strict = _strict, True
    try:
        yield
    finally:
        _strict = previous


def _check_finite(value: Tensor, primitive: str) -> Tensor:
    if not torch.isfinite(value).all():
        raise NumericalAbort(f"Non-finite value produced by {primitive}")
    return value


class Mlp(nn.Module):
    def __init__(self, widths: Sequence[int], activation: Union[str, Sequence[str]] = "relu"):
        super().__init__()
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise PreconditionError(f"Invalid layer widths {list(widths)}")
        self.widths = [int(w) for w in widths]
        hidden = len(self.widths) - 2
        if isinstance(activation, str):
            activation = [activation] * hidden
        if len(activation) != hidden:
            raise PreconditionError(f"Expected {hidden} activation tags, got {len(activation)}")
        self.activations = list(activation)
        self.layers = nn.ModuleList(nn.Linear(i, o) for i, o in zip(self.widths[:-1], self.widths[1:]))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        # uniform fan-in scaling
        for layer in self.layers:
            bound = 1.0 / math.sqrt(layer.in_features)
            nn.init.uniform_(layer.weight, -bound, bound)
            nn.init.uniform_(layer.bias, -bound, bound)

    @property
    def input_width(self) -> int:
        return self.widths[0]

    @property
    def output_width(self) -> int:
        return self.widths[-1]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.input_width:
            raise PreconditionError(f"Input width {x.shape[-1]} does not match network input {self.input_width}")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if _strict:
                _check_finite(x, f"affine layer {i}")
            if i < len(self.activations):
                x = _ACTIVATIONS[self.activations[i]](x)
                if _strict:
                    _check_finite(x, self.activations[i])
        return x


def _primitive_name(message: str) -> str:
    match = re.search(r"Function '(\w+?)Backward\d*'", message)
    return match.group(1).lower() if match else "unknown primitive"


def gradient(net: nn.Module, loss_fn: Callable[[nn.Module], Tensor]) -> Dict[str, Tensor]:
    """d loss / d theta for every named parameter of net."""
    params = dict(net.named_parameters())
    with strict_checks():
        loss = loss_fn(net)
    _check_finite(loss, "loss")
    if not loss.requires_grad:
        return {name: torch.zeros_like(p) for name, p in params.items()}
    try:
        with torch.autograd.detect_anomaly(check_nan=True):
            grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    except RuntimeError as e:
        raise NumericalAbort(f"Non-finite gradient in {_primitive_name(str(e))}: {e}")
    return {
        name: torch.zeros_like(p) if g is None else g
        for (name, p), g in zip(params.items(), grads)
    }


@dataclass
class OptimizerState:
    optimizer: torch.optim.Adam
    learning_rate: float
    step_count: int = 0

    @property
    def params(self) -> List[Tensor]:
        return [p for group in self.optimizer.param_groups for p in group["params"]]


def make_optimizer(params: Iterable[Tensor], learning_rate: float) -> OptimizerState:
    params = list(params)
    return OptimizerState(optimizer=torch.optim.Adam(params, lr=learning_rate), learning_rate=learning_rate)


def sgd_step(state: OptimizerState, params: Sequence[Tensor], grads: Sequence[Tensor]) -> Sequence[Tensor]:
    """One Adam update of params from grads."""
    for g in grads:
        _check_finite(g, "gradient")
    for p, g in zip(params, grads):
        p.grad = g.detach().clone()
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.step_count += 1
    for p in params:
        _check_finite(p.detach(), "parameter update")
    return params


def optimize(state: OptimizerState, loss: Tensor, name: str) -> float:
    """Backpropagate a scalar loss and take one sgd_step on the optimizer's parameters."""
    if not torch.isfinite(loss):
        raise NumericalAbort(f"Non-finite {name} loss: {loss.item()}")
    params = state.params
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    for g in grads:
        if not torch.isfinite(g).all():
            raise NumericalAbort(f"Non-finite gradient of {name} loss")
    sgd_step(state, params, grads)
    return float(loss.item())


@dataclass
class GaussianHead:
    mean: Tensor
    log_std: Tensor

    def __post_init__(self):
        self.log_std = self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)

    @classmethod
    def from_output(cls, output: Tensor) -> "GaussianHead":
        mean, log_std = output.chunk(2, dim=-1)
        return cls(mean, log_std)

    @property
    def std(self) -> Tensor:
        return self.log_std.exp()


def _gaussian_log_prob(u: Tensor, head: GaussianHead) -> Tensor:
    return -0.5 * ((u - head.mean) / head.std) ** 2 - head.log_std - 0.5 * math.log(2 * math.pi)


def _log_squash_jacobian(u: Tensor) -> Tensor:
    # log(1 - tanh(u)^2), stable for large |u|
    return 2.0 * (math.log(2.0) - u - F.softplus(-2.0 * u))


def squashed_sample(
    head: GaussianHead, generator: Optional[torch.Generator] = None, deterministic: bool = False
) -> Tuple[Tensor, Tensor]:
    if deterministic:
        u = head.mean
    else:
        eps = torch.randn(head.mean.shape, generator=generator, dtype=head.mean.dtype)
        u = head.mean + head.std * eps
    sample = torch.tanh(u).clamp(-SQUASH_LIMIT, SQUASH_LIMIT)
    log_prob = (_gaussian_log_prob(u, head) - _log_squash_jacobian(u)).sum(-1)
    return sample, log_prob


def squashed_log_prob(head: GaussianHead, y: Tensor) -> Tensor:
    y = y.clamp(-SQUASH_LIMIT, SQUASH_LIMIT)
    u = torch.atanh(y)
    return (_gaussian_log_prob(u, head) - _log_squash_jacobian(u)).sum(-1)


def parameter_digest(*modules: nn.Module) -> str:
    digest = hashlib.sha256()
    for module in modules:
        for name, p in module.state_dict().items():
            digest.update(name.encode())
            digest.update(p.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


# Checkpoint file: header (magic, u32 version, u32 record count), then per record
# u32 name length, name, u32 width count, u32 widths, u32 block count,
# per block u32 element count and little-endian float32 values.

@dataclass
class CheckpointRecord:
    name: str
    widths: List[int]
    blocks: List[np.ndarray] = field(default_factory=list)


def _record_for(name: str, value: Union[nn.Module, Tensor]) -> CheckpointRecord:
    if isinstance(value, Mlp):
        blocks = [p.detach().cpu().numpy().astype("<f4").ravel() for p in value.state_dict().values()]
        return CheckpointRecord(name, list(value.widths), blocks)
    if isinstance(value, Tensor):
        return CheckpointRecord(name, list(value.shape), [value.detach().cpu().numpy().astype("<f4").ravel()])
    raise PreconditionError(f"Cannot checkpoint {name}: unsupported type {type(value).__name__}")


def save_checkpoint(path: Union[str, Path], entries: Mapping[str, Union[nn.Module, Tensor]]) -> None:
    chunks = [struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(entries))]
    for name, value in entries.items():
        record = _record_for(name, value)
        encoded = record.name.encode()
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<I{len(record.widths)}I", len(record.widths), *record.widths))
        chunks.append(struct.pack("<I", len(record.blocks)))
        for block in record.blocks:
            chunks.append(struct.pack("<I", block.size) + block.tobytes())
    Path(path).write_bytes(b"".join(chunks))
    logger.info(f"Checkpoint written: {path} ({len(entries)} records)")


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data, self.path, self.offset = data, path, 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise DatasetError(f"Truncated checkpoint {self.path}", offset=self.offset)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: Union[str, Path]) -> Dict[str, CheckpointRecord]:
    reader = _Reader(Path(path).read_bytes(), str(path))
    magic = reader.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise DatasetError(f"Bad checkpoint magic {magic!r} in {path}", offset=0)
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise DatasetError(f"Unsupported checkpoint version {version} in {path}", offset=4)
    records: Dict[str, CheckpointRecord] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode()
        widths = [reader.u32() for _ in range(reader.u32())]
        blocks = []
        for _ in range(reader.u32()):
            count = reader.u32()
            blocks.append(np.frombuffer(reader.take(4 * count), dtype="<f4").copy())
        records[name] = CheckpointRecord(name, widths, blocks)
    if reader.offset != len(reader.data):
        raise DatasetError(f"Trailing bytes in checkpoint {path}", offset=reader.offset)
    return records


def restore(target: Union[nn.Module, Tensor], record: CheckpointRecord) -> None:
    """Copy a checkpoint record into a live network or tensor, in place."""
    if isinstance(target, Mlp):
        if target.widths != record.widths:
            raise DatasetError(f"Checkpoint record {record.name} has widths {record.widths}, expected {target.widths}")
        with torch.no_grad():
            for p, block in zip(target.state_dict().values(), record.blocks):
                p.copy_(torch.from_numpy(block.astype(np.float32)).view_as(p))
        return
    if list(target.shape) != record.widths:
        raise DatasetError(f"Checkpoint record {record.name} has shape {record.widths}, expected {list(target.shape)}")
    with torch.no_grad():
        target.copy_(torch.from_numpy(record.blocks[0].astype(np.float32)).view_as(target))
