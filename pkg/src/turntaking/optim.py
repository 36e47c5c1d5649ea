"""RMSProp, the plateau learning-rate schedule and a finite-difference gradient check."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .net import LossWeights, ModelParams, batch_loss, forward_batch, init_params, loss_and_grads, pad_batch


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class RmspropState:
    learning_rate: float = 0.001
    rho: float = 0.9
    eps: float = 1e-8
    accum: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0

    def state_dict(self) -> bytes:
        buf = io.BytesIO()
        np.savez(buf, __hyper__=np.array([self.learning_rate, self.rho, self.eps, self.steps], dtype=np.float64),
                 **self.accum)
        return buf.getvalue()

    @classmethod
    def from_state_dict(cls, blob: bytes) -> RmspropState:
        with np.load(io.BytesIO(blob)) as data:
            lr, rho, eps, steps = data["__hyper__"]
            accum = {k: data[k].copy() for k in data.files if k != "__hyper__"}
        return cls(float(lr), float(rho), float(eps), accum, int(steps))


def rmsprop_step(params: ModelParams, grads: ModelParams, state: RmspropState,
                 clip_norm: float | None = None) -> None:
    """In-place update: s <- rho*s + (1-rho)*g^2;  theta <- theta - lr*g/(sqrt(s)+eps)."""
    pairs = list(zip(params.tensors(), grads.tensors()))
    for (name, p), (_, g) in pairs:
        if p.shape != g.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} does not match {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    scale = 1.0
    if clip_norm is not None:
        norm = np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for _, g in grads.tensors()))
        if norm > clip_norm:
            scale = clip_norm / norm
    rho, lr, eps = state.rho, state.learning_rate, state.eps
    for (name, p), (_, g) in pairs:
        if scale != 1.0:
            g = g * p.dtype.type(scale)
        s = state.accum.get(name)
        if s is None:
            s = state.accum[name] = np.zeros_like(p)
        s *= p.dtype.type(rho)
        s += p.dtype.type(1 - rho) * g * g
        p -= p.dtype.type(lr) * g / (np.sqrt(s) + p.dtype.type(eps))
    params.version += 1
    state.steps += 1


@dataclass
class PlateauSchedule:
    """Halve the learning rate whenever the metric fails to beat the previous epoch's."""

    current_lr: float = 0.001
    factor: float = 0.5
    history: list[float] = field(default_factory=list)

    def update(self, metric: float) -> float:
        if not np.isfinite(metric):
            raise ValueError("plateau metric must be finite")
        if self.history and metric <= self.history[-1]:
            self.current_lr *= self.factor
        self.history.append(metric)
        return self.current_lr


def plateau_update(schedule: PlateauSchedule, epoch_metric: float) -> float:
    return schedule.update(epoch_metric)


def grad_check(
    params: ModelParams,
    seqs: Sequence[np.ndarray],
    turn_y,
    intent_y,
    loss_weights: LossWeights = LossWeights(),
    class_weights=None,
    step: float = 1e-5,
    n_coords: int = 200,
    seed: int = 0,
    corrupt: Callable[[ModelParams], None] | None = None,
    absolute: bool = False,
) -> float:
    """Max discrepancy between analytic and central-difference gradients.

    Runs in float64. Up to ``n_coords`` coordinates per tensor are probed; the
    discrepancy is |g_a - g_n| / max(1, |g_n|), or |g_a - g_n| if ``absolute``.
    ``corrupt`` may tamper with the analytic gradients (negative controls).
    """
    p64 = params.astype(np.float64)
    if class_weights is None:
        class_weights = (np.ones(p64.turn_head.b.size), np.ones(p64.intent_head.b.size))
    class_weights = tuple(np.asarray(w, dtype=np.float64) for w in class_weights)
    seqs = [np.asarray(s, dtype=np.float64) for s in seqs]
    _, grads = loss_and_grads(p64, seqs, turn_y, intent_y, loss_weights, class_weights)
    if corrupt is not None:
        corrupt(grads)
    X, lengths = pad_batch(seqs, dtype=np.float64)

    def total_loss() -> float:
        t, i, _ = forward_batch(p64, X, lengths, keep=False)
        return batch_loss(t, i, turn_y, intent_y, loss_weights, class_weights).l_total

    rng = np.random.default_rng(seed)
    worst = 0.0
    for (name, p), (_, g) in zip(p64.tensors(), grads.tensors()):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        idx = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + step
            up = total_loss()
            flat[j] = orig - step
            down = total_loss()
            flat[j] = orig
            numeric = (up - down) / (2 * step)
            err = abs(gflat[j] - numeric)
            if not absolute:
                err /= max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def random_grad_checks(n_instances: int = 20, seed: int = 0) -> tuple[float, float]:
    """Max relative error over random small models, and the sign-flip control's error."""
    rng = np.random.default_rng(seed)
    worst, control = 0.0, np.inf
    for k in range(n_instances):
        n_layers = int(rng.integers(1, 3))
        widths = [int(w) for w in rng.integers(2, 9, n_layers)]
        d = int(rng.integers(3, 43))
        params = init_params(widths, int(rng.integers(1 << 31)), input_dim=d, dtype=np.float64)
        for _, t in params.tensors():
            t += rng.normal(0, 0.3, t.shape)
        batch = int(rng.integers(1, 4))
        seqs = [rng.normal(size=(int(rng.integers(1, 7)), d)) for _ in range(batch)]
        ty = rng.integers(0, 2, batch)
        iy = rng.integers(0, 7, batch)
        cw = (rng.uniform(0.5, 2.0, 2), rng.uniform(0.5, 2.0, 7))
        lw = LossWeights(1.0, float(rng.choice([0.0, 0.5, 1.0])))
        worst = max(worst, grad_check(params, seqs, ty, iy, lw, cw, seed=k))
        if k == 0:
            def flip(g):
                g.turn_head.b *= -1
            control = grad_check(params, seqs, ty, iy, lw, cw, seed=k, corrupt=flip)
    return worst, control
