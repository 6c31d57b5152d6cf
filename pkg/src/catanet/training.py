"""Toy-scale training loop: L1 loss, bias-corrected Adam, cosine learning-rate
decay, random aligned HR/LR patch sampling. Deterministic under a fixed seed
(single-threaded); weights move by gradient descent while token centers move
only through their EMA inside the training-mode forward.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import l1_loss  # module surface: the training loss lives here too
from .data import degrade_bicubic
from .network import CATANet, forward_batch


class DivergenceError(ArithmeticError):
    """Loss went NaN/Inf; training aborted."""


@dataclass
class TrainState:
    seed: int
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, ag.Node], grads: dict[str, np.ndarray],
              state: TrainState, lr: float,
              beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8) -> None:
    """Standard bias-corrected Adam update, in place on the parameter nodes."""
    state.step += 1
    t = state.step
    b1, b2 = np.float32(beta1), np.float32(beta2)
    bc1 = np.float32(1.0 - beta1**t)
    bc2 = np.float32(1.0 - beta2**t)
    lr32 = np.float32(lr)
    eps32 = np.float32(eps)
    one = np.float32(1.0)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = g.astype(np.float32, copy=False)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        else:
            v = state.v[name]
        m = b1 * m + (one - b1) * g
        v = b2 * v + (one - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.value = p.value - lr32 * (m / bc1) / (np.sqrt(v / bc2) + eps32)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from base_lr at step 0 toward 0 at the final step."""
    if total_steps <= 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / (total_steps - 1)))


def sample_patches(hr_set: list[np.ndarray], patch: int, scale: int,
                   rng: np.random.Generator, batch: int = 1):
    """Random aligned (lr, hr) crop pairs; hr crops are patch x patch and the
    lr side is produced by degrading the crop itself, so the pair aligns
    exactly. Images smaller than the patch are skipped with a warning."""
    if patch % scale != 0:
        raise ValueError(f"patch {patch} must be divisible by scale {scale}")
    usable = []
    for i, img in enumerate(hr_set):
        if img.shape[1] >= patch and img.shape[2] >= patch:
            usable.append(img)
        else:
            warnings.warn(f"image {i} ({img.shape[1]}x{img.shape[2]}) smaller "
                          f"than patch {patch}, skipped", stacklevel=2)
    if not usable:
        raise ValueError("no image is large enough for the requested patch size")
    lr_batch, hr_batch = [], []
    for _ in range(batch):
        img = usable[int(rng.integers(len(usable)))]
        y = int(rng.integers(img.shape[1] - patch + 1))
        x = int(rng.integers(img.shape[2] - patch + 1))
        hr = np.ascontiguousarray(img[:, y : y + patch, x : x + patch])
        lr_batch.append(degrade_bicubic(hr, scale))
        hr_batch.append(hr)
    return lr_batch, hr_batch


def train_loop(model: CATANet, images: list[np.ndarray], steps: int, lr: float,
               seed: int, batch: int = 2, patch: int | None = None,
               csv_path=None, log_every: int = 0):
    """Optimize the model on random crops of `images`; returns the loss trace.

    Per step: training-mode forward (centers take their EMA step inside),
    mean L1 over the batch, backward, Adam. Aborts on non-finite loss.
    """
    cfg = model.config
    if patch is None:
        patch = 8 * cfg.scale
    rng = np.random.default_rng(seed)
    state = TrainState(seed=seed)
    trace: list[tuple[int, float, float]] = []
    for step in range(steps):
        step_lr = cosine_lr(lr, step, steps)
        lr_imgs, hr_imgs = sample_patches(images, patch, cfg.scale, rng, batch=batch)
        with ag.Tape() as tape:
            outs = forward_batch(lr_imgs, model, training=True)
            loss = l1_loss(outs[0], hr_imgs[0])
            for o, hr in zip(outs[1:], hr_imgs[1:]):
                loss = ag.add(loss, l1_loss(o, hr))
            loss = ag.scale(loss, 1.0 / len(outs))
            loss_val = float(loss.value)
            if not math.isfinite(loss_val):
                raise DivergenceError(f"non-finite loss {loss_val} at step {step}")
            grads = ag.backward(loss, tape)
        named = {name: grads[node] for name, node in model.params.items() if node in grads}
        adam_step(model.params, named, state, step_lr)
        trace.append((step, loss_val, step_lr))
        if log_every and (step % log_every == 0 or step == steps - 1):
            print(f"step {step:5d}  loss {loss_val:.6f}  lr {step_lr:.2e}")
    if csv_path is not None:
        with open(csv_path, "w") as f:
            f.write("step,loss,lr\n")
            for s, l, r in trace:
                f.write(f"{s},{l:.10f},{r:.10e}\n")
    return trace
