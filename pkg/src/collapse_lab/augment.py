"""Mixup, manifold mixup and asymptotic midpoint mixup (AM-mixup).

AM-mixup interpolates last-layer features of random in-batch pairs with a
rate ``lam_am = exp(-beta * v_acc)`` that shrinks from 1 towards ~0.5 as the
previous epoch's training accuracy ``v_acc`` grows, and labels each
interpolated feature with the class of the dominant side only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .numerics import (
    Rng,
    Tensor,
    add,
    beta_sample,
    mix,
    no_grad,
    one_hot,
    scale,
    softmax_xent,
    take_rows,
)

SCHEDULED = "scheduled"
FIXED_BETA = "fixed_beta"
FIXED = "fixed"
RATE_MODES = (SCHEDULED, FIXED_BETA, FIXED)


@dataclass(frozen=True)
class NoAugment:
    kind: str = "none"


@dataclass(frozen=True)
class Mixup:
    alpha: float = 1.0
    kind: str = "mixup"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("mixup alpha must be > 0")


@dataclass(frozen=True)
class ManifoldMixup:
    """``eligible_layers=None`` means input plus every hidden block output."""

    alpha: float = 1.0
    eligible_layers: tuple[int, ...] | None = None
    kind: str = "manifold_mixup"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("mixup alpha must be > 0")
        if self.eligible_layers is not None:
            object.__setattr__(self, "eligible_layers", tuple(int(i) for i in self.eligible_layers))
            if not self.eligible_layers:
                raise ValueError("eligible_layers must be non-empty")


@dataclass(frozen=True)
class AMMixup:
    beta: float = 0.34
    rate_mode: str = SCHEDULED
    alpha: float = 1.0          # used by rate_mode="fixed_beta"
    fixed_value: float = 0.51   # used by rate_mode="fixed"
    one_sided: bool = True
    last_layer_only: bool = True
    kind: str = "am_mixup"

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")
        if self.rate_mode not in RATE_MODES:
            raise ValueError(f"rate_mode must be one of {RATE_MODES}")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not 0 < self.fixed_value < 1:
            raise ValueError("fixed_value must be in (0, 1)")


AugmentStrategy = Union[NoAugment, Mixup, ManifoldMixup, AMMixup]


@dataclass
class MixedBatch:
    inputs: Tensor
    target: np.ndarray
    lambda_used: float
    pairing: np.ndarray


def _check_pairing(pairing, n: int) -> np.ndarray:
    p = np.asarray(pairing, dtype=np.intp)
    if p.shape != (n,) or not np.array_equal(np.sort(p), np.arange(n)):
        raise ValueError("pairing must be a permutation of batch indices")
    return p


def draw_pairing(rng: Rng, n: int) -> np.ndarray:
    return rng.permutation(n)


def mixup_batch(x, y_onehot, lam: float, pairing) -> MixedBatch:
    """Interpolate samples (or activations) and their label vectors with partner ``pairing[i]``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup rate must be in [0, 1], got {lam}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = np.asarray(y_onehot, dtype=np.float64)
    if y.shape[0] != x.shape[0]:
        raise ValueError("label rows must match batch size")
    p = _check_pairing(pairing, x.shape[0])
    mixed = mix(x, take_rows(x, p), lam)
    return MixedBatch(mixed, lam * y + (1.0 - lam) * y[p], float(lam), p)


def manifold_mix_layer(rng: Rng, eligible_layers: Sequence[int]) -> int:
    if len(eligible_layers) == 0:
        raise ValueError("eligible layer set is empty")
    return int(eligible_layers[int(rng.integers(0, len(eligible_layers)))])


def am_lambda(v_acc: float, beta: float) -> float:
    if not 0.0 <= v_acc <= 1.0:
        raise ValueError(f"v_acc must be in [0, 1], got {v_acc}")
    if not beta >= 0:
        raise ValueError("beta must be >= 0")
    return math.exp(-beta * v_acc)


def one_sided_labels(labels, lam: float, pairing) -> np.ndarray:
    """Class of the dominant side; a tie at exactly 0.5 keeps the anchor's class."""
    labels = np.asarray(labels, dtype=np.intp)
    return labels.copy() if lam >= 0.5 else labels[np.asarray(pairing, dtype=np.intp)]


def am_mix_features(z, labels, lam_am: float, pairing, num_classes: int,
                    one_sided: bool = True) -> MixedBatch:
    """N augmented features ``lam_am * z_i + (1 - lam_am) * z_pairing[i]`` with their targets."""
    if not 0.0 < lam_am <= 1.0:
        raise ValueError(f"lam_am must be in (0, 1], got {lam_am}")
    z = z if isinstance(z, Tensor) else Tensor(z)
    labels = np.asarray(labels, dtype=np.intp)
    p = _check_pairing(pairing, z.shape[0])
    mixed = mix(z, take_rows(z, p), lam_am)
    if one_sided:
        target = one_hot(one_sided_labels(labels, lam_am, p), num_classes)
    else:
        y = one_hot(labels, num_classes)
        target = lam_am * y + (1.0 - lam_am) * y[p]
    return MixedBatch(mixed, target, float(lam_am), p)


def mixup_loss(logits: Tensor, y_i, y_j, lam: float) -> Tensor:
    """``lam * CE(logits, y_i) + (1 - lam) * CE(logits, y_j)``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup rate must be in [0, 1], got {lam}")
    return add(scale(softmax_xent(logits, y_i), lam), scale(softmax_xent(logits, y_j), 1.0 - lam))


def am_loss(logits: Tensor, target) -> Tensor:
    t = np.asarray(target, dtype=np.float64)
    if not (np.isin(t, (0.0, 1.0)).all() and np.array_equal(t.sum(axis=1), np.ones(t.shape[0]))):
        raise ValueError("am_loss expects one-hot targets")
    return softmax_xent(logits, t)


# ----------------------------------------------------------------------------
# per-batch training objective


@dataclass
class BatchLoss:
    loss: Tensor
    clean_logits: np.ndarray
    lambda_used: float | None
    layer: int | None = None


def batch_rate(strategy: AMMixup, lam_am: float, rng: Rng) -> float:
    if strategy.rate_mode == SCHEDULED:
        return lam_am
    if strategy.rate_mode == FIXED_BETA:
        return beta_sample(rng, strategy.alpha)
    return strategy.fixed_value


def compute_batch_loss(model, strategy: AugmentStrategy, x: Tensor, labels, rng: Rng,
                       lam_am: float = 1.0) -> BatchLoss:
    """Training loss of one batch under ``strategy``.

    Must run inside an active tape. ``lam_am`` is the epoch's scheduled AM
    rate. Random draws happen in a fixed order (pairing, rate, layer).
    """
    labels = np.asarray(labels, dtype=np.intp)
    c = model.spec.num_classes
    y = one_hot(labels, c)
    n = x.shape[0]

    if isinstance(strategy, NoAugment):
        logits = model(x)
        return BatchLoss(softmax_xent(logits, y), logits.values, None)

    if isinstance(strategy, (Mixup, ManifoldMixup)):
        pairing = draw_pairing(rng, n)
        lam = beta_sample(rng, strategy.alpha)
        if isinstance(strategy, Mixup):
            layer = 0
        else:
            eligible = strategy.eligible_layers or model.hidden_layers()
            layer = manifold_mix_layer(rng, eligible)
        mixer = lambda h: mixup_batch(h, y, lam, pairing).inputs  # noqa: E731
        logits = model.forward_logits(model.forward_features(x, mix_at=layer, mixer=mixer))
        loss = mixup_loss(logits, y, y[pairing], lam)
        with no_grad():
            clean = model(x).values
        return BatchLoss(loss, clean, lam, layer)

    if isinstance(strategy, AMMixup):
        pairing = draw_pairing(rng, n)
        lam = batch_rate(strategy, lam_am, rng)
        z = model.forward_features(x)
        logits = model.forward_logits(z)
        ce = softmax_xent(logits, y)
        top = model.num_stages
        if strategy.last_layer_only:
            layer = top
        else:
            layer = manifold_mix_layer(rng, model.hidden_layers() + [top])
        if layer == top:
            aug = am_mix_features(z, labels, lam, pairing, c, strategy.one_sided)
            z_aug, target = aug.inputs, aug.target
        else:
            holder = {}

            def mixer(h):
                holder["mb"] = am_mix_features(h, labels, lam, pairing, c, strategy.one_sided)
                return holder["mb"].inputs

            z_aug = model.forward_features(x, mix_at=layer, mixer=mixer)
            target = holder["mb"].target
        aug_logits = model.forward_logits(z_aug)
        aug_loss = am_loss(aug_logits, target) if strategy.one_sided else softmax_xent(aug_logits, target)
        return BatchLoss(add(ce, aug_loss), logits.values, lam, layer)

    raise TypeError(f"unknown strategy {strategy!r}")

