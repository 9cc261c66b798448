"""Adam optimizer, unrolled training loops, and CKP1 checkpoints.

The two networks only share values, never gradients: the reconstruction
loop always detaches the flow it consumes, whether that flow comes from a
frozen provider, a frozen network, or a jointly trained one.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from .autodiff import Parameter, Tensor
from .events import (AugmentConfig, EventPartition, apply_augmentation,
                     draw_augmentation)
from .geometry import build_voxel_grid, event_mask
from .losses import (LossReport, LossWeights, flow_total_loss,
                     photometric_loss, predicted_increment, recon_total_loss,
                     reference_increment, temporal_loss, tv_loss)
from .networks import FireFlowNet, ReconNet, detach_state, init_parameters

GRAD_CLIP_NORM = 100.0


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    epochs: int = 120
    unroll_steps: int = 20     # S: recurrent steps per reconstruction update
    tc_start_step: int = 10    # S0: first step the temporal term covers
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.05
    bins: int = 5
    events_per_pixel: float = 0.3
    flow_scale: float = 40.0
    seed: int = 0
    h_flip_prob: float = 0.5
    v_flip_prob: float = 0.5
    polarity_flip_prob: float = 0.5
    pause_prob: float = 0.0
    c_pos: float = 1.0
    c_neg: float = 1.0
    deblur_enabled: bool = True
    grad_clip_enabled: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.tc_start_step <= self.unroll_steps:
            raise ValueError(
                f"need 0 <= S0 <= S, got S0={self.tc_start_step}, S={self.unroll_steps}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda1=self.lambda1, lambda2=self.lambda2,
                           lambda3=self.lambda3, c_pos=self.c_pos, c_neg=self.c_neg,
                           deblur_enabled=self.deblur_enabled)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.h_flip_prob, self.v_flip_prob,
                             self.polarity_flip_prob, self.pause_prob)


class Adam:
    """Standard Adam with bias correction; moments keyed by parameter name."""

    def __init__(self, params: list[Parameter], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"missing gradient for parameter {p.name!r}")
            g = p.grad
            m = self.m[p.name] = self.beta1 * self.m[p.name] + (1.0 - self.beta1) * g
            v = self.v[p.name] = self.beta2 * self.v[p.name] + (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def global_gradient_norm(params: list[Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))


def clip_gradients(params: list[Parameter], max_norm: float) -> float:
    norm = global_gradient_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def _optimize(loss: Tensor, params: list[Parameter], opt: Adam,
              config: TrainConfig, context: str) -> None:
    value = loss.item()
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss at {context}: {value}")
    opt.zero_grad()
    if loss.requires_grad:
        loss.backward()
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    if config.grad_clip_enabled:
        clip_gradients(params, GRAD_CLIP_NORM)
    opt.step()


def _null_partition(geometry) -> EventPartition:
    return EventPartition(np.zeros(0, dtype=np.uint64), np.zeros(0, dtype=np.uint16),
                          np.zeros(0, dtype=np.uint16), np.zeros(0, dtype=np.int8),
                          geometry, t_star=np.zeros(0))


def _sequence_steps(seq: list[EventPartition], record, rng) -> list[EventPartition | None]:
    """Augmented partitions; a drawn pause inserts one null-voxel step."""
    steps: list[EventPartition | None] = [apply_augmentation(p, record) for p in seq]
    if record.pause:
        steps.insert(int(rng.integers(0, len(steps) + 1)), None)
    return steps


Curve = list[tuple[int, LossReport]]


def train_flow(sequences: list[list[EventPartition]], config: TrainConfig,
               net: FireFlowNet | None = None) -> tuple[FireFlowNet, Curve]:
    """Contrast-maximization training of the flow network."""
    if not sequences:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    if net is None:
        net = FireFlowNet(bins=config.bins, flow_scale=config.flow_scale)
        init_parameters(net, rng)
    opt = Adam(net.parameters(), config.lr, config.beta1, config.beta2, config.eps_adam)
    weights = config.loss_weights()
    aug = config.augment_config()
    curve: Curve = []
    step = 0
    for _ in range(config.epochs):
        for seq in sequences:
            record = draw_augmentation(rng, aug)
            geometry = seq[0].geometry
            for item in _sequence_steps(seq, record, rng):
                part = item if item is not None else _null_partition(geometry)
                voxel = build_voxel_grid(part, config.bins) if len(part) else \
                    np.zeros((config.bins, geometry.height, geometry.width))
                flow = net(voxel, event_mask(voxel))
                loss, report = flow_total_loss(part, flow, weights)
                _optimize(loss, net.parameters(), opt, config, f"flow step {step}")
                curve.append((step, report))
                step += 1
    return net, curve


@dataclass
class ReconTrainResult:
    recon_net: ReconNet
    flow_net: FireFlowNet | None
    curve: Curve = field(default_factory=list)
    flow_curve: Curve = field(default_factory=list)


def train_recon(sequences: list[list[EventPartition]], config: TrainConfig,
                flow_provider=None, flow_net: FireFlowNet | None = None,
                joint: bool = False,
                recon_net: ReconNet | None = None) -> ReconTrainResult:
    """Unrolled photometric-constancy training of the reconstruction network.

    Flow comes from `flow_provider(partition, voxel, mask) -> (2,H,W)`, a
    frozen `flow_net`, or, with `joint=True`, a flow network updated on
    each partition just before the reconstruction step consumes its
    (detached) output. The reconstruction update fires every S+1 steps;
    hidden state and the previous frame are truncated there and reset at
    sequence starts. Sequences shorter than one unroll window are skipped.
    """
    if not sequences:
        raise ValueError("empty dataset")
    if flow_provider is None and flow_net is None:
        raise ValueError("need a flow provider or a flow network")
    s_steps = config.unroll_steps
    rng = np.random.default_rng(config.seed)
    if recon_net is None:
        recon_net = ReconNet(bins=config.bins)
        init_parameters(recon_net, rng)
    if joint and flow_net is None:
        flow_net = FireFlowNet(bins=config.bins, flow_scale=config.flow_scale)
        init_parameters(flow_net, rng)
    opt_r = Adam(recon_net.parameters(), config.lr, config.beta1, config.beta2,
                 config.eps_adam)
    opt_f = Adam(flow_net.parameters(), config.lr, config.beta1, config.beta2,
                 config.eps_adam) if joint else None
    weights = config.loss_weights()
    aug = config.augment_config()
    result = ReconTrainResult(recon_net, flow_net)
    step = 0
    flow_step = 0
    for _ in range(config.epochs):
        for seq in sequences:
            if len(seq) < s_steps + 1:
                warnings.warn(f"sequence with {len(seq)} partitions is shorter than "
                              f"one unroll window (S+1={s_steps + 1}); skipped")
                continue
            record = draw_augmentation(rng, aug)
            geometry = seq[0].geometry
            h, w = geometry.height, geometry.width
            state = None
            l_prev: Tensor = Tensor(np.zeros((h, w)))
            pe_terms: list[Tensor] = []
            tc_terms: list[Tensor] = []
            tv_terms: list[Tensor] = []
            for item in _sequence_steps(seq, record, rng):
                if item is None:
                    voxel = np.zeros((config.bins, h, w))
                    mask = np.zeros((h, w), dtype=bool)
                    flow_values = np.zeros((2, h, w))
                    reference = Tensor(np.zeros((h, w)))
                else:
                    voxel = build_voxel_grid(item, config.bins)
                    mask = event_mask(voxel)
                    if joint:
                        flow_t = flow_net(voxel, mask)
                        f_loss, f_report = flow_total_loss(item, flow_t, weights)
                        _optimize(f_loss, flow_net.parameters(), opt_f, config,
                                  f"joint flow step {flow_step}")
                        result.flow_curve.append((flow_step, f_report))
                        flow_step += 1
                        flow_values = flow_t.data
                    elif flow_net is not None:
                        flow_values = flow_net(voxel, mask).data
                    else:
                        flow_values = np.asarray(flow_provider(item, voxel, mask))
                    reference = reference_increment(item, flow_values, weights)
                l_k, state = recon_net(voxel, state)
                pe_terms.append(photometric_loss(reference,
                                                 predicted_increment(l_prev, flow_values)))
                tc_terms.append(temporal_loss(l_k, l_prev, flow_values))
                tv_terms.append(tv_loss(l_k))
                l_prev = l_k
                if len(pe_terms) == s_steps + 1:
                    total, report = recon_total_loss(pe_terms, tc_terms, tv_terms,
                                                     weights, config.tc_start_step)
                    _optimize(total, recon_net.parameters(), opt_r, config,
                              f"recon step {step}")
                    result.curve.append((step, report))
                    step += 1
                    state = detach_state(state)
                    l_prev = l_prev.detach()
                    pe_terms, tc_terms, tv_terms = [], [], []
            # Trailing steps that do not fill a window are dropped, like the
            # trailing events that do not fill a partition.
    return result


class GroundTruthFlowProvider:
    """Frozen provider handing out the scene's analytic flow per partition."""

    def __init__(self, scene):
        from .synth import ground_truth_flow
        self._scene = scene
        self._gt = ground_truth_flow

    def __call__(self, partition, voxel, mask):
        return self._gt(self._scene, partition).as_array()


# ---------------------------------------------------------------------------
# CKP1 checkpoints
#
# Little-endian layout: magic 'CKP1'; u32 tensor count; per tensor
# u16 name length, name bytes, u8 rank, u32 dims, f64 data; then a
# u32-length-prefixed config text blob.

_CKP1_MAGIC = b"CKP1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], config_text: str = "") -> None:
    blob = config_text.encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKP1_MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, data in tensors.items():
            encoded = name.encode("utf-8")
            arr = np.ascontiguousarray(data, dtype="<f8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _CKP1_MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}")
    offset = 4

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(raw):
            raise CheckpointError("truncated checkpoint")
        chunk = raw[offset:offset + n]
        offset += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).copy()
        tensors[name] = data
    (blob_len,) = struct.unpack("<I", take(4))
    config_text = take(blob_len).decode("utf-8")
    if offset != len(raw):
        raise CheckpointError(f"{len(raw) - offset} trailing bytes after config blob")
    return tensors, config_text


def network_state(net) -> dict[str, np.ndarray]:
    return {p.name: p.data for p in net.parameters()}


def load_network_state(net, tensors: dict[str, np.ndarray]) -> None:
    """Strict load: names must match the network's parameter set exactly."""
    params = {p.name: p for p in net.parameters()}
    unknown = sorted(set(tensors) - set(params))
    if unknown:
        raise CheckpointError(f"unknown parameter names in checkpoint: {unknown}")
    missing = sorted(set(params) - set(tensors))
    if missing:
        raise CheckpointError(f"checkpoint is missing parameters: {missing}")
    for name, p in params.items():
        data = tensors[name]
        if data.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {data.shape}, "
                f"network {p.data.shape}")
        p.data = data
        p.grad = None


def checkpoint_config_text(config: TrainConfig, step: int) -> str:
    lines = [f"{f.name} = {getattr(config, f.name)}" for f in fields(config)]
    lines.append(f"step = {step}")
    return "\n".join(lines) + "\n"


def parse_checkpoint_step(config_text: str) -> int:
    for line in config_text.splitlines():
        key, _, value = line.partition("=")
        if key.strip() == "step":
            return int(value.strip())
    return 0
