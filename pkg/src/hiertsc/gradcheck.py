"""Central finite-difference gradient verification."""

from __future__ import annotations

from typing import Callable, Sequence

import torch
from torch import Tensor


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, step: float = 1e-5) -> Tensor:
    """d fn / d tensor by central differences, perturbing `tensor` in place."""
    grad = torch.zeros_like(tensor, dtype=torch.float64)
    flat = tensor.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + step
            plus = float(fn())
            flat[k] = orig - step
            minus = float(fn())
            flat[k] = orig
            gflat[k] = (plus - minus) / (2 * step)
    return grad


def relative_error(a: Tensor, b: Tensor, floor: float = 1e-6) -> float:
    """||a - b|| / max(||a|| + ||b||, floor).

    The floor keeps gradients that are identically zero (e.g. attention key biases, which
    softmax ignores) from turning finite-difference round-off into a relative error near 1.
    """
    num = float(torch.linalg.vector_norm((a - b).double()))
    den = float(torch.linalg.vector_norm(a.double()) + torch.linalg.vector_norm(b.double()))
    return num / max(den, floor)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-5) -> float:
    """Relative error between autograd and finite differences over the concatenated gradient of `tensors`."""
    for t in tensors:
        t.grad = None
    out = fn()
    analytic = torch.autograd.grad(out, list(tensors), allow_unused=True)
    analytic = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, analytic)]
    numeric = [numerical_gradient(fn, t, step) for t in tensors]
    flat = lambda gs: torch.cat([g.reshape(-1).double() for g in gs])
    return relative_error(flat(analytic), flat(numeric))
