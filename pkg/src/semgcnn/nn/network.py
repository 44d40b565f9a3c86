"""The 9-layer 1d-CNN: Conv1, Conv2, LC1, LC2, FC1, FC2, FC3, 6-way FC, SoftMax."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .layers import (
    BatchNorm,
    Conv1d,
    Dropout,
    Flatten,
    Layer,
    Linear,
    LocallyConnected1d,
    ReLU,
    ShapeError,
    softmax,
)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    in_channels: int = 4
    window_length: int = 75
    n_classes: int = 6
    conv_channels: int = 64
    conv_kernel: int = 3
    n_conv: int = 2
    n_locally_connected: int = 2
    fc_units: tuple = (512, 512, 128)
    dropout: float = 0.5
    # number of leading FC layers whose *input* passes through dropout
    n_dropout_fc: int = 2
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "fc_units", tuple(int(u) for u in self.fc_units))
        if self.temporal_extent() < 1:
            raise ShapeError("window too short for the convolution stack")

    def temporal_extent(self):
        return self.window_length - self.n_conv * (self.conv_kernel - 1)

    def flat_features(self):
        return self.conv_channels * self.temporal_extent()

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


class Block:
    """One row of the layer table: a named sequence of primitive layers."""

    def __init__(self, name, layers):
        self.name = name
        self.layers: list[Layer] = list(layers)

    def __repr__(self):
        inner = ", ".join(type(layer).__name__ for layer in self.layers)
        return f"Block({self.name!r}: {inner})"


class Network:
    def __init__(self, spec: NetworkSpec, blocks):
        self.spec = spec
        self.blocks: list[Block] = list(blocks)

    # -- structure -----------------------------------------------------------

    @property
    def layers(self):
        return [layer for block in self.blocks for layer in block.layers]

    @property
    def layer_names(self):
        return [block.name for block in self.blocks]

    def named_params(self):
        """Ordered ``(qualified_name, ParamTensor)`` pairs."""
        out = []
        for layer in self.layers:
            for key, p in layer.params.items():
                out.append((f"{layer.name}.{key}", p))
        return out

    def parameters(self):
        return [p for _, p in self.named_params()]

    def n_parameters(self):
        return sum(p.size for p in self.parameters())

    def batchnorms(self):
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    def dropouts(self):
        return [layer for layer in self.layers if isinstance(layer, Dropout)]

    def shape_chain(self):
        """Per-layer output shapes (without batch axis) for one input window."""
        shape = (self.spec.in_channels, self.spec.window_length)
        chain = [("input", shape)]
        for layer in self.layers:
            shape = layer.output_shape(shape)
            chain.append((layer.name, shape))
        return chain

    @property
    def dtype(self):
        return self.parameters()[0].value.dtype

    # -- computation ---------------------------------------------------------

    def forward(self, x, train=False):
        """Logits for a batch ``x`` of shape (N, C, L); softmax is not applied."""
        x = np.asarray(x, dtype=self.dtype)
        if self.spec is not None and (x.ndim != 3 or x.shape[1:] != (self.spec.in_channels, self.spec.window_length)):
            raise ShapeError(
                f"expected input (N, {self.spec.in_channels}, {self.spec.window_length}), got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, grad_logits):
        g = grad_logits
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def predict_proba(self, x, batch_size=512):
        out = []
        for start in range(0, len(x), batch_size):
            out.append(softmax(self.forward(x[start:start + batch_size], train=False)))
        if not out:
            return np.zeros((0, self.spec.n_classes), dtype=self.dtype)
        return np.concatenate(out)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def clear_caches(self):
        for layer in self.layers:
            layer.clear_cache()

    def set_dropout_rng(self, rng):
        for d in self.dropouts():
            d.rng = rng

    # -- state ---------------------------------------------------------------

    def state_dict(self):
        state = {}
        for name, p in self.named_params():
            state[name] = p.value
        for bn in self.batchnorms():
            for key, arr in bn.state_arrays().items():
                state[f"{bn.name}.{key}"] = arr
        return state

    def load_state_dict(self, state):
        for name, p in self.named_params():
            arr = state[name]
            if arr.shape != p.value.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != {p.value.shape}")
            p.value = np.array(arr, dtype=arr.dtype, copy=True)
            p.grad = np.zeros_like(p.value)
        for bn in self.batchnorms():
            bn.running_mean = np.array(state[f"{bn.name}.running_mean"], copy=True)
            bn.running_var = np.array(state[f"{bn.name}.running_var"], copy=True)
            bn.num_batches_tracked = int(state[f"{bn.name}.num_batches_tracked"])

    def astype(self, dtype):
        """Cast parameters and running statistics in place; returns self."""
        for _, p in self.named_params():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        for bn in self.batchnorms():
            bn.running_mean = bn.running_mean.astype(dtype)
            bn.running_var = bn.running_var.astype(dtype)
        return self

    def copy(self):
        other = build_network(self.spec, seed=0, dtype=self.dtype)
        other.load_state_dict(self.state_dict())
        return other

    def __repr__(self):
        return f"Network({', '.join(self.layer_names)}; {self.n_parameters()} params)"


def build_network(spec: NetworkSpec | None = None, seed=0, dtype=np.float64, dropout_rng=None):
    """Instantiate the network with uniform(+-1/sqrt(fan_in)) weights and
    biases and BN scale/shift at 1/0."""
    spec = spec or NetworkSpec()
    rng = np.random.default_rng(seed)
    if dropout_rng is None:
        dropout_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    c = spec.conv_channels
    kw = dict(eps=spec.bn_eps, momentum=spec.bn_momentum, dtype=dtype)
    blocks = []
    in_ch = spec.in_channels
    length = spec.window_length
    for i in range(spec.n_conv):
        name = f"Conv{i + 1}"
        blocks.append(Block(name, [
            Conv1d(in_ch, c, spec.conv_kernel, rng, dtype, name=f"{name.lower()}"),
            BatchNorm(c, name=f"{name.lower()}_bn", **kw),
            ReLU(),
        ]))
        in_ch = c
        length -= spec.conv_kernel - 1
    for i in range(spec.n_locally_connected):
        name = f"LC{i + 1}"
        blocks.append(Block(name, [
            LocallyConnected1d(c, c, length, rng, dtype, name=name.lower()),
            BatchNorm(c, name=f"{name.lower()}_bn", **kw),
            ReLU(),
        ]))
    in_f = c * length
    for i, units in enumerate(spec.fc_units):
        name = f"FC{i + 1}"
        layers: list[Layer] = []
        if i == 0:
            layers.append(Flatten())
        if i < spec.n_dropout_fc and spec.dropout > 0:
            layers.append(Dropout(spec.dropout, rng=dropout_rng, name=f"{name.lower()}_dropout"))
        layers += [
            Linear(in_f, units, rng, dtype, name=name.lower()),
            BatchNorm(units, name=f"{name.lower()}_bn", **kw),
            ReLU(),
        ]
        blocks.append(Block(name, layers))
        in_f = units
    blocks.append(Block(f"{spec.n_classes}-Way FC", [Linear(in_f, spec.n_classes, rng, dtype, name="fc_out")]))
    # softmax lives in the loss during training and in predict_proba at inference
    blocks.append(Block("SoftMax", []))
    _name_anonymous(blocks)
    return Network(spec, blocks)


def _name_anonymous(blocks):
    for block in blocks:
        for layer in block.layers:
            if isinstance(layer, (ReLU, Flatten)):
                layer.name = f"{block.name.lower()}_{type(layer).__name__.lower()}"


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(network: Network, path):
    """Write parameters, BN running statistics and the NetworkSpec as one ``.npz``."""
    arrays = {f"param/{k}": v for k, v in network.state_dict().items()}
    arrays["meta/version"] = np.array(CHECKPOINT_VERSION, dtype=np.int64)
    arrays["meta/spec"] = np.frombuffer(network.spec.to_json().encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Network:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["meta/version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        spec = NetworkSpec.from_json(bytes(data["meta/spec"]).decode())
        state = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
    dtype = state["conv1.weight"].dtype if "conv1.weight" in state else np.float64
    net = build_network(spec, seed=0, dtype=dtype)
    net.load_state_dict(state)
    return net
