"""Encoders, linear classifier, SGD with momentum, learning-rate schedules."""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numerics import (
    NumericError,
    Rng,
    Tensor,
    add_channel_bias,
    conv2d,
    flatten,
    linear,
    maxpool2,
    relu,
)


@dataclass(frozen=True)
class ModelSpec:
    """``encoder`` is ``"mlp"`` or ``"cnn_vis2d"``.

    For ``mlp`` the ``widths`` run from input width to feature width, e.g.
    ``(2, 64, 32, 2)``. For ``cnn_vis2d`` the input is ``in_shape`` (C, H, W)
    and ``channels`` gives the three block widths.
    """

    encoder: str = "mlp"
    widths: tuple[int, ...] = (2, 64, 32, 2)
    in_shape: tuple[int, ...] = (3, 32, 32)
    channels: tuple[int, ...] = (32, 64, 128)
    feature_dim: int = 2
    num_classes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "in_shape", tuple(int(w) for w in self.in_shape))
        object.__setattr__(self, "channels", tuple(int(w) for w in self.channels))
        if self.encoder not in ("mlp", "cnn_vis2d"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.encoder == "mlp":
            if len(self.widths) < 2:
                raise ValueError("mlp widths need at least input and feature width")
            if self.widths[-1] != self.feature_dim:
                raise ValueError(f"mlp output width {self.widths[-1]} != feature_dim {self.feature_dim}")
        else:
            c, h, w = self.in_shape
            if h % 8 or w % 8:
                raise ValueError("cnn_vis2d needs H and W divisible by 8 (three 2x2 pools)")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


def kaiming_uniform(rng: Rng, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return (rng.random(shape) * 2.0 - 1.0) * bound


class Model:
    """Encoder stages followed by one dense classifier layer.

    Activations are indexed 0 (input) .. ``num_stages`` (feature). Index
    ``num_stages`` is the last-layer feature; lower indices are the input and
    hidden block outputs that manifold mixup may interpolate.
    """

    def __init__(self, spec: ModelSpec, rng: Rng | None = None):
        self.spec = spec
        rng = rng if rng is not None else Rng(0)
        self.encoder_params: list[Tensor] = []
        self._stages: list[Callable[[Tensor], Tensor]] = []
        if spec.encoder == "mlp":
            self._build_mlp(rng)
        else:
            self._build_cnn(rng)
        d = spec.feature_dim
        self.cls_w = Tensor(kaiming_uniform(rng, (d, spec.num_classes), d), requires_grad=True, name="classifier.weight")
        self.cls_b = Tensor(np.zeros(spec.num_classes), requires_grad=True, name="classifier.bias")

    def _build_mlp(self, rng: Rng) -> None:
        widths = self.spec.widths
        last = len(widths) - 2
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            w = Tensor(kaiming_uniform(rng, (a, b), a), requires_grad=True, name=f"encoder.{i}.weight")
            bias = Tensor(np.zeros(b), requires_grad=True, name=f"encoder.{i}.bias")
            self.encoder_params += [w, bias]
            self._stages.append(_dense_stage(w, bias, activate=i != last))

    def _build_cnn(self, rng: Rng) -> None:
        c, h, w = self.spec.in_shape
        for i, o in enumerate(self.spec.channels):
            k = Tensor(kaiming_uniform(rng, (o, c, 3, 3), c * 9), requires_grad=True, name=f"encoder.block{i}.kernel")
            bias = Tensor(np.zeros(o), requires_grad=True, name=f"encoder.block{i}.bias")
            self.encoder_params += [k, bias]
            self._stages.append(_conv_block(k, bias))
            c, h, w = o, h // 2, w // 2
        fan_in = c * h * w
        dw = Tensor(kaiming_uniform(rng, (fan_in, self.spec.feature_dim), fan_in), requires_grad=True, name="encoder.head.weight")
        db = Tensor(np.zeros(self.spec.feature_dim), requires_grad=True, name="encoder.head.bias")
        self.encoder_params += [dw, db]
        self._stages.append(lambda x: linear(flatten(x), dw, db))

    @property
    def num_stages(self) -> int:
        return len(self._stages)

    @property
    def classifier_params(self) -> list[Tensor]:
        return [self.cls_w, self.cls_b]

    @property
    def params(self) -> list[Tensor]:
        return self.encoder_params + self.classifier_params

    def hidden_layers(self) -> list[int]:
        """Activation indices eligible for manifold mixup: input and hidden blocks."""
        return list(range(self.num_stages))

    def forward_features(self, x: Tensor, mix_at: int | None = None,
                         mixer: Callable[[Tensor], Tensor] | None = None) -> Tensor:
        """Encoder output; if ``mix_at`` is set, ``mixer`` rewrites that activation."""
        expected = self._input_shape()
        if tuple(x.shape[1:]) != expected:
            raise ValueError(f"input shape {x.shape[1:]} does not match encoder input {expected}")
        h = x
        for i, stage in enumerate(self._stages):
            if mix_at == i:
                h = mixer(h)
            h = stage(h)
        if mix_at == self.num_stages:
            h = mixer(h)
        return h

    def forward_logits(self, z: Tensor) -> Tensor:
        if z.values.ndim != 2 or z.shape[1] != self.spec.feature_dim:
            raise ValueError(f"feature width {z.shape[1:]} != {self.spec.feature_dim}")
        return linear(z, self.cls_w, self.cls_b)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward_logits(self.forward_features(x))

    def _input_shape(self) -> tuple[int, ...]:
        if self.spec.encoder == "mlp":
            return (self.spec.widths[0],)
        return self.spec.in_shape

    def reset_classifier(self, num_classes: int, rng: Rng) -> None:
        """Swap in a fresh classifier head (coarse-to-fine transfer)."""
        self.spec = ModelSpec(**{**self.spec.to_dict(), "num_classes": num_classes})
        d = self.spec.feature_dim
        self.cls_w = Tensor(kaiming_uniform(rng, (d, num_classes), d), requires_grad=True, name="classifier.weight")
        self.cls_b = Tensor(np.zeros(num_classes), requires_grad=True, name="classifier.bias")

    def set_encoder_trainable(self, flag: bool) -> None:
        for p in self.encoder_params:
            p.requires_grad = flag
            p.grad = None

    def encoder_digest(self) -> str:
        h = hashlib.sha256()
        for p in self.encoder_params:
            h.update(p.values.astype("<f8").tobytes())
        return h.hexdigest()


def _dense_stage(w: Tensor, b: Tensor, activate: bool):
    if activate:
        return lambda x: relu(linear(x, w, b))
    return lambda x: linear(x, w, b)


def _conv_block(k: Tensor, b: Tensor):
    return lambda x: maxpool2(relu(add_channel_bias(conv2d(x, k), b)))


# ----------------------------------------------------------------------------
# checkpoint

CHECKPOINT_MAGIC = b"CLCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Model, path) -> None:
    spec_json = json.dumps(model.spec.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(model.spec.digest())
        f.write(struct.pack("<I", len(spec_json)))
        f.write(spec_json)
        for p in model.params:
            f.write(p.values.astype("<f8").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    try:
        (version,) = struct.unpack_from("<I", blob, 4)
        digest = blob[8:40]
        (n,) = struct.unpack_from("<I", blob, 40)
        spec = ModelSpec.from_dict(json.loads(blob[44:44 + n]))
    except (struct.error, ValueError, TypeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if spec.digest() != digest:
        raise CheckpointError("spec digest mismatch")
    model = Model(spec)
    off = 44 + n
    for p in model.params:
        nbytes = p.values.size * 8
        if off + nbytes > len(blob):
            raise CheckpointError("truncated checkpoint")
        p.values = np.frombuffer(blob, dtype="<f8", count=p.values.size, offset=off).reshape(p.shape).astype(np.float64)
        off += nbytes
    if off != len(blob):
        raise CheckpointError("trailing bytes in checkpoint")
    return model


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class SGD:
    """Classic momentum with L2 weight decay folded into the gradient."""

    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    buffers: dict[int, np.ndarray] = field(default_factory=dict)

    def step(self, params: Sequence[Tensor]) -> None:
        sgd_step(params, self)


def sgd_step(params: Sequence[Tensor], state: SGD) -> None:
    if not state.lr > 0:
        raise ValueError("learning rate must be positive")
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        if p.grad.shape != p.values.shape:
            raise ValueError(f"gradient shape {p.grad.shape} != parameter shape {p.values.shape}")
        if not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient for parameter {p.name or i}")
        g = p.grad + state.weight_decay * p.values
        v = state.buffers.get(i)
        v = g.copy() if v is None else state.momentum * v + g
        state.buffers[i] = v
        new = p.values - state.lr * v
        if not np.isfinite(new).all():
            raise NumericError(f"parameter {p.name or i} diverged (lr={state.lr})")
        p.values = new


# ----------------------------------------------------------------------------
# learning-rate schedules


@dataclass(frozen=True)
class StepDecay:
    initial_lr: float
    milestones: tuple[int, ...] = (30, 60, 80)
    factor: float = 0.2


@dataclass(frozen=True)
class WarmupStep:
    initial_lr: float
    warmup_epochs: int = 5
    warmup_start: float = 0.02
    milestones: tuple[int, ...] = (160, 180)
    factor: float = 0.1


@dataclass(frozen=True)
class Cosine:
    initial_lr: float
    t_max: int = 100


LrSchedule = StepDecay | WarmupStep | Cosine


def validate_schedule(s: LrSchedule) -> None:
    if not s.initial_lr > 0:
        raise ValueError("initial_lr must be > 0")
    if isinstance(s, (StepDecay, WarmupStep)):
        ms = list(s.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly increasing")
        if not 0 < s.factor < 1:
            raise ValueError("decay factor must be in (0, 1)")
    if isinstance(s, Cosine) and s.t_max <= 0:
        raise ValueError("t_max must be > 0")


def lr_at(s: LrSchedule, epoch: int) -> float:
    """Learning rate for 0-indexed ``epoch``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if isinstance(s, Cosine):
        e = min(epoch, s.t_max)
        return 0.5 * s.initial_lr * (1.0 + math.cos(math.pi * e / s.t_max))
    if isinstance(s, WarmupStep) and epoch < s.warmup_epochs:
        return s.warmup_start + (s.initial_lr - s.warmup_start) * epoch / s.warmup_epochs
    passed = sum(1 for m in s.milestones if epoch >= m)
    return s.initial_lr * s.factor ** passed
