"""Parameter storage, the two update rules, and the step learning-rate decay.

``ParamStore`` owns the gradient lifecycle: ``optimizer_step`` applies the
update and clears grads, nothing else touches them. A frozen store rejects
every mutation (its arrays are made read-only as a backstop) and optimizer
steps skip it entirely.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class OptimError(Exception):
    pass


class GradMissingError(OptimError):
    """A parameter had no gradient when a step was requested."""

    def __init__(self, name):
        self.name = name
        super().__init__(f"parameter '{name}' has no gradient")


class FrozenStoreError(OptimError):
    """Attempted mutation of a frozen parameter store."""


class ParamStore:
    """Named map of trainable tensors plus per-parameter optimizer state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._step = 0
        self.frozen = False

    def add(self, name, values):
        if self.frozen:
            raise FrozenStoreError(f"cannot add '{name}' to a frozen store")
        if name in self._params:
            raise OptimError(f"duplicate parameter '{name}'")
        t = values if isinstance(values, Tensor) else Tensor(values, requires_grad=True)
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def set_values(self, name, values):
        if self.frozen:
            raise FrozenStoreError(f"cannot assign '{name}' on a frozen store")
        arr = np.asarray(values, dtype=np.float64)
        p = self._params[name]
        if arr.shape != p.values.shape:
            raise OptimError(
                f"shape mismatch assigning '{name}': {arr.shape} vs {p.values.shape}"
            )
        p.values[...] = arr

    def freeze(self):
        """Make the store read-only; its tensors stop requiring gradients."""
        self.frozen = True
        for p in self._params.values():
            p.requires_grad = False
            p.grad = None
            p.values.flags.writeable = False

    def clone(self):
        """Independent trainable copy; optimizer state is not inherited."""
        out = ParamStore()
        for name, p in self._params.items():
            out.add(name, p.values.copy())
        return out

    def flat_values(self):
        """All parameter values concatenated in insertion order."""
        if not self._params:
            return np.empty(0, dtype=np.float64)
        return np.concatenate([p.values.ravel() for p in self._params.values()])

    def zero_grads(self):
        for p in self._params.values():
            p.grad = None


def ensure_grads(params):
    """Zero-fill gradients of parameters the current loss did not touch.

    A parameter outside the loss graph (e.g. the PAD head during an
    EA-only iteration) has gradient exactly zero; filling it keeps the
    strict all-grads-populated contract of optimizer_step satisfied.
    """
    if params.frozen:
        return
    for p in params._params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.values)


def optimizer_step(params, lr, kind="sgd", betas=(0.9, 0.999), eps=1e-8):
    """Apply one update to every parameter, then clear the gradients.

    kind "sgd" is plain gradient descent; "adaptive" is Adam with bias
    correction (the paper names the optimizers without hyperparameters;
    betas/eps defaults are the conventional ones).
    """
    if params.frozen:
        return
    for name, p in params.items():
        if p.grad is None:
            raise GradMissingError(name)
    if kind == "sgd":
        for p in params._params.values():
            p.values -= lr * p.grad
    elif kind == "adaptive":
        params._step += 1
        t = params._step
        b1, b2 = betas
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for name, p in params.items():
            g = p.grad
            m = params._m.get(name)
            v = params._v.get(name)
            if m is None:
                m = np.zeros_like(p.values)
                v = np.zeros_like(p.values)
                params._m[name] = m
                params._v[name] = v
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.values -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    else:
        raise OptimError(f"unknown optimizer kind '{kind}'")
    params.zero_grads()


def lr_decay(lr, epoch, gamma, decay_after):
    """Step decay: lr * gamma ** floor(epoch / decay_after)."""
    if not 0.0 < gamma <= 1.0:
        raise OptimError(f"gamma must be in (0, 1], got {gamma}")
    if decay_after < 1:
        raise OptimError(f"decay_after must be >= 1, got {decay_after}")
    return lr * gamma ** (epoch // decay_after)
