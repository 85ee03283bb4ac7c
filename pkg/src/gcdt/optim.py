"""AdamW with decoupled weight decay.

The decay term multiplies the parameter directly (theta -= lr*wd*theta) and
is independent of the gradient moments, so with zero gradients parameters
decay geometrically by exactly (1 - lr*wd) per step.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(ValueError):
    """A gradient contained NaN or infinity; the message names the parameter."""


class AdamW:
    """Optimizer over a name -> Tensor parameter mapping.

    Defaults follow the training setup: lr=1e-4, weight_decay=1e-4,
    beta1=0.9, beta2=0.999, epsilon=1e-8.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        weight_decay: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: dict[str, np.ndarray], lr_scale: float = 1.0) -> None:
        """One update. Parameters missing from `grads` are treated as zero-grad
        (they still decay). Non-finite gradients raise, naming the parameter.
        """
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        lr = self.lr * lr_scale
        bias1 = 1.0 - b1**t
        bias2 = 1.0 - b2**t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(
                    f"non-finite gradient for parameter '{name}'"
                )
            if g.shape != p.data.shape:
                raise ValueError(
                    f"gradient shape {g.shape} != parameter shape "
                    f"{p.data.shape} for '{name}'"
                )
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.epsilon)
            p.data -= lr * update + lr * self.weight_decay * p.data


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so the global L2 norm is <= max_norm.

    Returns the pre-clip norm.
    """
    total = 0.0
    for g in grads.values():
        total += float(np.square(g, dtype=np.float64).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm
