"""
Dense differentiable networks: MLP specs and modules, parameter stores with
Adam moment state, a recording tape over torch autograd, and the flat tensor
container used for checkpoints.
"""
from dataclasses import dataclass
import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torch.optim as optim

from .base import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    MetadataBase,
    NumericError,
)

DTYPE = torch.float64

HIDDEN_ACTIVATIONS = ("relu",)
OUTPUT_ACTIVATIONS = {
    "identity": lambda x: x,
    "softmax": lambda x: torch.softmax(x, dim=-1),
    "softplus": F.softplus,
}

DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_EPS = 1e-8

MAGIC = b"DHIA"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<4sII")
_SHAPE = struct.Struct("<QQ")


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ConfigError(f"an MLP needs at least two widths, got {list(widths)}")
        if min(widths) < 1:
            raise ConfigError(f"MLP widths must be positive, got {list(widths)}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ConfigError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigError(f"unknown output activation {self.output_activation!r}")

    @property
    def in_width(self):
        return self.layer_widths[0]

    @property
    def out_width(self):
        return self.layer_widths[-1]

    def to_dict(self):
        return {
            "layer_widths": list(self.layer_widths),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
        }


class Mlp(nn.Module, MetadataBase):
    """
    Fully connected network built from an MlpSpec. Weights are Glorot-uniform,
    biases zero, everything float64.
    """
    def __init__(self, spec: MlpSpec):
        super().__init__()
        self.spec = spec
        widths = spec.layer_widths
        self.layers = nn.ModuleList(
            nn.Linear(fan_in, fan_out, dtype=DTYPE)
            for fan_in, fan_out in zip(widths[:-1], widths[1:])
        )
        self.apply(self._init_weights)

    def _init_weights(self, module):
        if isinstance(module, nn.Linear):
            nn.init.xavier_uniform_(module.weight)
            nn.init.zeros_(module.bias)

    def forward(self, x, tape=None):
        return mlp_forward(self.spec, self, x, tape)

    def get_metadata(self):
        return super().get_metadata() | self.spec.to_dict()


def mlp_forward(spec: MlpSpec, params: Mlp, input, tape=None):
    """
    Evaluates the network on a batch of rows. Raises DimensionError naming the
    first layer whose width does not match its input.
    """
    if input.dim() != 2 or input.shape[1] != spec.in_width:
        raise DimensionError(0, spec.in_width, input.shape[-1])
    if len(params.layers) != len(spec.layer_widths) - 1:
        raise DimensionError(len(params.layers), len(spec.layer_widths) - 1, len(params.layers))
    if tape is not None:
        tape.record(params)

    x = input
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        if layer.in_features != x.shape[1]:
            raise DimensionError(i, layer.in_features, x.shape[1])
        x = layer(x)
        if i < last:
            x = F.relu(x)
    return OUTPUT_ACTIVATIONS[spec.output_activation](x)


class ParamStore:
    """
    The parameters of a set of networks plus their Adam moments and step
    counter. Parameter order is the order of `modules`, then module order.
    """
    def __init__(self, *modules, lr=1e-4, betas=DEFAULT_BETAS, eps=DEFAULT_EPS):
        self.parameters = [p for module in modules for p in module.parameters()]
        self.optimizer = optim.Adam(self.parameters, lr=lr, betas=betas, eps=eps)
        self.step = 0

    def state_dict(self):
        return {"step": self.step, "optimizer": self.optimizer.state_dict()}

    def load_state_dict(self, state):
        self.step = state["step"]
        self.optimizer.load_state_dict(state["optimizer"])


class Tape:
    """
    Records which networks took part in a forward pass over a ParamStore.
    Gradients come from torch autograd, which replays the recorded graph in
    reverse topological order and sums contributions at fan-out.
    """
    def __init__(self, store: ParamStore):
        self.store = store
        self.networks = []
        self._grad_mode = None

    def __enter__(self):
        self._grad_mode = torch.enable_grad()
        self._grad_mode.__enter__()
        return self

    def __exit__(self, *exc):
        return self._grad_mode.__exit__(*exc)

    def record(self, network):
        if not any(network is seen for seen in self.networks):
            self.networks.append(network)

    def recorded_parameters(self):
        return {id(p) for network in self.networks for p in network.parameters()}


def backward(tape: Tape, loss):
    """
    Returns d(loss)/d(p) for every parameter of the tape's store, in store
    order. Parameters the loss does not depend on get zeros. A nonzero gradient
    reaching a network that never ran under the tape is a ContractError.
    """
    if not torch.is_tensor(loss) or loss.numel() != 1:
        shape = tuple(loss.shape) if torch.is_tensor(loss) else type(loss).__name__
        raise ContractError(f"backward needs a scalar loss, got {shape}")
    if not torch.isfinite(loss).all():
        raise NumericError(f"non-finite loss {loss.item()}")

    params = tape.store.parameters
    if not loss.requires_grad:
        return [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True)
    recorded = tape.recorded_parameters()
    for p, g in zip(params, grads):
        if g is not None and id(p) not in recorded and torch.count_nonzero(g) > 0:
            raise ContractError(
                f"parameter of shape {tuple(p.shape)} has a gradient but its network "
                "was not recorded on the tape"
            )
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def adam_step(params: ParamStore, grads, lr, betas=DEFAULT_BETAS, eps=DEFAULT_EPS):
    """
    One Adam update. Entries whose gradient is exactly zero keep their value;
    their moments still decay.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if len(grads) != len(params.parameters):
        raise ContractError(
            f"got {len(grads)} gradients for {len(params.parameters)} parameters"
        )
    for group in params.optimizer.param_groups:
        group.update(lr=lr, betas=tuple(betas), eps=eps)
    for p, g in zip(params.parameters, grads):
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        p.grad = g.detach().clone()
    frozen = [(p, p.grad == 0, p.detach().clone()) for p in params.parameters]
    params.optimizer.step()
    with torch.no_grad():
        for p, zero, before in frozen:
            p.copy_(torch.where(zero, before, p))
    params.optimizer.zero_grad(set_to_none=True)
    params.step += 1
    return params


def _as_matrix(tensor):
    array = tensor.detach().cpu().numpy() if torch.is_tensor(tensor) else np.asarray(tensor)
    if array.ndim < 2:
        array = array.reshape(1, -1)
    return np.ascontiguousarray(array, dtype="<f8")


def write_tensors(path, tensors):
    """
    Writes matrices to the flat container: header {magic, version u32,
    count u32}, then per tensor {rows u64, cols u64, little-endian f64}.
    Vectors are stored as single rows.
    """
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, CONTAINER_VERSION, len(tensors)))
        for tensor in tensors:
            array = _as_matrix(tensor)
            f.write(_SHAPE.pack(*array.shape))
            f.write(array.tobytes())


def read_tensors(path):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise DataError(f"{path}: truncated checkpoint header")
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DataError(f"{path}: not a checkpoint container (magic {magic!r})")
    if version != CONTAINER_VERSION:
        raise DataError(f"{path}: unsupported container version {version}")

    offset = _HEADER.size
    tensors = []
    for i in range(count):
        if offset + _SHAPE.size > len(data):
            raise DataError(f"{path}: truncated at tensor {i}")
        rows, cols = _SHAPE.unpack_from(data, offset)
        offset += _SHAPE.size
        size = rows * cols
        if offset + 8 * size > len(data):
            raise DataError(f"{path}: truncated payload at tensor {i}")
        array = np.frombuffer(data, dtype="<f8", count=size, offset=offset)
        tensors.append(array.reshape(rows, cols).copy())
        offset += 8 * size
    return tensors
