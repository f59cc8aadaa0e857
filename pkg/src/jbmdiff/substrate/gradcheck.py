from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    probes: list = field(default_factory=list)  # (name, index, analytic, numeric, rel)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(loss_fn, params, probe_count=20, tol=1e-4, step=1e-5, rng=None):
    """Compare analytic gradients with central differences at random coordinates.

    ``params`` are Tensors (typically Parameters); they are cast to float64 in
    place for the duration of the check and restored afterwards. ``loss_fn``
    takes no arguments and returns a scalar Tensor.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    saved = [(p.data, p.grad) for p in params]
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = None
        loss = loss_fn()
        if not np.isfinite(loss.data):
            raise FloatingPointError("loss is not finite")
        loss.backward()
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

        report = GradCheckReport(0.0, tol)
        sizes = np.array([p.data.size for p in params])
        for _ in range(probe_count):
            k = int(rng.choice(len(params), p=sizes / sizes.sum()))
            p = params[k]
            idx = np.unravel_index(int(rng.integers(p.data.size)), p.data.shape)
            old = p.data[idx]
            p.data[idx] = old + step
            up = float(loss_fn().data)
            p.data[idx] = old - step
            down = float(loss_fn().data)
            p.data[idx] = old
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError("loss is not finite")
            numeric = (up - down) / (2 * step)
            a = float(analytic[k][idx])
            rel = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-8)
            report.probes.append((p.name, idx, a, numeric, rel))
            report.max_rel_error = max(report.max_rel_error, rel)
        return report
    finally:
        for p, (data, grad) in zip(params, saved):
            p.data = data
            p.grad = grad


def as_leaf(x, name=None) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True, name=name)
