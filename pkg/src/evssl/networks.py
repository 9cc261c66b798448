"""Lightweight flow and reconstruction networks.

The flow network is a plain single-strided conv stack with residual
blocks and a tanh prediction head scaled to a configurable pixel range;
its output is forced to zero wherever the input partition has no events.
The reconstruction network shares the layout but swaps the second and
third encoders for ConvGRU cells and predicts one unbounded
log-brightness channel.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

DEFAULT_FLOW_SCALE = 40.0


class ConvLayer:
    """3x3 or 1x1 convolution with bias and optional activation."""

    def __init__(self, name: str, c_in: int, c_out: int, kernel: int = 3,
                 activation: str | None = "relu"):
        self.weight = Parameter(f"{name}.weight", np.zeros((c_out, c_in, kernel, kernel)))
        self.bias = Parameter(f"{name}.bias", np.zeros(c_out))
        self.activation = activation

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.conv2d(x, self.weight, self.bias)
        if self.activation == "relu":
            return ad.relu(out)
        if self.activation == "tanh":
            return ad.tanh(out)
        return out


class ResidualBlock:
    """Two same-channel 3x3 convolutions with an additive skip."""

    def __init__(self, name: str, channels: int):
        self.conv1 = ConvLayer(f"{name}.conv1", channels, channels, activation="relu")
        self.conv2 = ConvLayer(f"{name}.conv2", channels, channels, activation=None)

    def parameters(self) -> list[Parameter]:
        return self.conv1.parameters() + self.conv2.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        return ad.relu(ad.add(self.conv2(self.conv1(x)), x))


class ConvGRUCell:
    """Convolutional GRU; gates see [h, x], the candidate sees [r*h, x].

    h' = (1-z)*h + z*tanh(Wc*[r*h, x]); sigmoid gates keep the state
    bounded whenever the candidate is tanh-bounded.
    """

    def __init__(self, name: str, channels: int, input_channels: int | None = None):
        c_in = (input_channels or channels) + channels
        self.channels = channels
        self.update = ConvLayer(f"{name}.update", c_in, channels, activation=None)
        self.reset = ConvLayer(f"{name}.reset", c_in, channels, activation=None)
        self.candidate = ConvLayer(f"{name}.candidate", c_in, channels, activation=None)

    def parameters(self) -> list[Parameter]:
        return (self.update.parameters() + self.reset.parameters()
                + self.candidate.parameters())

    def initial_state(self, height: int, width: int) -> Tensor:
        return Tensor(np.zeros((self.channels, height, width)))

    def __call__(self, x: Tensor, h: Tensor | None) -> Tensor:
        if h is None:
            h = self.initial_state(x.shape[1], x.shape[2])
        if h.shape != (self.channels, x.shape[1], x.shape[2]):
            raise ValueError(f"hidden state shape {h.shape} does not match input {x.shape}")
        hx = ad.concat([h, x], axis=0)
        z = ad.sigmoid(self.update(hx))
        r = ad.sigmoid(self.reset(hx))
        cand = ad.tanh(self.candidate(ad.concat([ad.mul(r, h), x], axis=0)))
        return ad.add(ad.mul(ad.sub(1.0, z), h), ad.mul(z, cand))


class FireFlowNet:
    """Three single-strided encoders, two residual blocks, 1x1 tanh head."""

    def __init__(self, bins: int = 5, flow_scale: float = DEFAULT_FLOW_SCALE,
                 channels: int = 32):
        self.bins = bins
        self.flow_scale = flow_scale
        self.e1 = ConvLayer("e1", bins, channels)
        self.e2 = ConvLayer("e2", channels, channels)
        self.e3 = ConvLayer("e3", channels, channels)
        self.r1 = ResidualBlock("r1", channels)
        self.r2 = ResidualBlock("r2", channels)
        self.pred = ConvLayer("pred", channels, 2, kernel=1, activation="tanh")

    def parameters(self) -> list[Parameter]:
        params = []
        for block in (self.e1, self.e2, self.e3, self.r1, self.r2, self.pred):
            params.extend(block.parameters())
        return params

    def __call__(self, voxel: np.ndarray, mask: np.ndarray) -> Tensor:
        """Flow (2,H,W) in pixels per partition; exactly zero off-mask."""
        x = Tensor(voxel)
        if x.shape[0] != self.bins:
            raise ValueError(f"voxel has {x.shape[0]} bins, network expects {self.bins}")
        h = self.r2(self.r1(self.e3(self.e2(self.e1(x)))))
        flow = ad.mul(self.pred(h), self.flow_scale)
        gate = np.broadcast_to(mask, flow.shape).astype(np.float64)
        return ad.mul(flow, gate)


class ReconNet:
    """FireFlowNet layout with ConvGRU second/third encoders and a linear
    single-channel prediction head."""

    def __init__(self, bins: int = 5, channels: int = 16):
        self.bins = bins
        self.channels = channels
        self.head = ConvLayer("head", bins, channels)
        self.g1 = ConvGRUCell("g1", channels)
        self.g2 = ConvGRUCell("g2", channels)
        self.r1 = ResidualBlock("r1", channels)
        self.r2 = ResidualBlock("r2", channels)
        self.pred = ConvLayer("pred", channels, 1, kernel=1, activation=None)

    def parameters(self) -> list[Parameter]:
        params = []
        for block in (self.head, self.g1, self.g2, self.r1, self.r2, self.pred):
            params.extend(block.parameters())
        return params

    def initial_state(self, height: int, width: int) -> tuple[Tensor, Tensor]:
        return (self.g1.initial_state(height, width),
                self.g2.initial_state(height, width))

    def __call__(self, voxel: np.ndarray,
                 state: tuple[Tensor, Tensor] | None) -> tuple[Tensor, tuple[Tensor, Tensor]]:
        """Unbounded log-brightness image (H,W) plus the new hidden state."""
        x = Tensor(voxel)
        if x.shape[0] != self.bins:
            raise ValueError(f"voxel has {x.shape[0]} bins, network expects {self.bins}")
        s1, s2 = state if state is not None else (None, None)
        a = self.head(x)
        h1 = self.g1(a, s1)
        h2 = self.g2(h1, s2)
        out = self.pred(self.r2(self.r1(h2)))
        return ad.reshape(out, out.shape[1:]), (h1, h2)


def parameter_count(net) -> int:
    return sum(p.size for p in net.parameters())


def init_parameters(net, rng: np.random.Generator) -> None:
    """Glorot-uniform conv weights, zero biases; reproducible from the rng."""
    for p in net.parameters():
        if p.data.ndim == 4:
            c_out, c_in, k, _ = p.data.shape
            bound = np.sqrt(6.0 / (c_in * k * k + c_out * k * k))
            p.data = rng.uniform(-bound, bound, size=p.data.shape)
        else:
            p.data = np.zeros_like(p.data)
        p.grad = None


def detach_state(state):
    if state is None:
        return None
    return tuple(s.detach() for s in state)
