from __future__ import annotations

import numpy as np

from .autograd import Tensor


class TrainingAborted(RuntimeError):
    """Raised when a non-finite value shows up during optimization."""


def make_rng(seed: int, offset: int = 0) -> np.random.Generator:
    """Seeded PCG64 stream. ``offset`` derives independent sub-streams."""
    return np.random.Generator(np.random.PCG64([int(seed), int(offset)]))


class Parameter(Tensor):
    __slots__ = ("m", "v", "step")

    def __init__(self, value, name: str):
        super().__init__(np.array(value), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def xavier_init(rows: int, cols: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ValueError("xavier_init needs positive dimensions")
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype)


def adam_step(p: Parameter, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8) -> Parameter:
    """In-place Adam update with bias correction. Leaves ``p.grad`` untouched."""
    g = p.grad
    if g is None:
        raise TrainingAborted(f"parameter {p.name!r} has no gradient")
    if not np.all(np.isfinite(g)):
        raise TrainingAborted(f"non-finite gradient in parameter {p.name!r}")
    b1, b2 = betas
    p.step += 1
    p.m = b1 * p.m + (1.0 - b1) * g
    p.v = b2 * p.v + (1.0 - b2) * g * g
    m_hat = p.m / (1.0 - b1**p.step)
    v_hat = p.v / (1.0 - b2**p.step)
    p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
    return p
