"""Dense tensor ops with reverse-mode autodiff.

The graph machinery is torch's autograd; this module pins down the op set the
losses and the toy network are allowed to use, adds shape validation (only
scalar-with-tensor broadcasting is accepted), and provides an independent
central finite-difference checker written against numpy.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor


class ShapeError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


def tensor(data, requires_grad: bool = False, dtype: torch.dtype = torch.float64) -> Tensor:
    t = torch.as_tensor(np.asarray(data), dtype=dtype).clone()
    if requires_grad:
        t.requires_grad_(True)
    return t


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) or x.ndim == 0


def _elementwise_shapes(op: str, a, b) -> None:
    if _is_scalar(a) or _is_scalar(b):
        return
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def add(a, b) -> Tensor:
    _elementwise_shapes("add", a, b)
    return a + b


def subtract(a, b) -> Tensor:
    _elementwise_shapes("subtract", a, b)
    return a - b


def multiply(a, b) -> Tensor:
    _elementwise_shapes("multiply", a, b)
    return a * b


def scale(x: Tensor, c: float) -> Tensor:
    return x * c


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {tuple(x.shape)} and {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} != weight in-channels {weight.shape[1]} "
                         f"(input {tuple(x.shape)}, weight {tuple(weight.shape)})")
    if bias is not None and tuple(bias.shape) != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias shape {tuple(bias.shape)} does not match {weight.shape[0]} filters")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: unsupported stride {stride}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected 4-d input, got {tuple(x.shape)}")
    return F.max_pool2d(x, kernel, stride or kernel)


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def group_norm(x: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize (N, C, H, W) activations over channel groups, no affine part."""
    if x.ndim != 4 or x.shape[1] % groups:
        raise ShapeError(f"group_norm: {groups} groups do not divide input of shape {tuple(x.shape)}")
    return F.group_norm(x, groups, eps=eps)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each row of a 2-D input over its features, no affine part."""
    if x.ndim != 2:
        raise ShapeError(f"layer_norm expects a 2-D input, got shape {tuple(x.shape)}")
    return F.layer_norm(x, x.shape[1:], eps=eps)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def log_softmax(x: Tensor, dim: int = -1, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError(f"log_softmax: temperature must be positive, got {temperature}")
    z = x / temperature
    # log-sum-exp shift; small OIM temperatures overflow exp otherwise
    z = z - z.max(dim=dim, keepdim=True).values.detach()
    return z - torch.log(torch.exp(z).sum(dim=dim, keepdim=True))


def softmax(x: Tensor, dim: int = -1, temperature: float = 1.0) -> Tensor:
    return torch.exp(log_softmax(x, dim, temperature))


def log(x: Tensor) -> Tensor:
    return torch.log(x)


def sum(x: Tensor, dim: int | None = None) -> Tensor:  # noqa: A001
    return x.sum() if dim is None else x.sum(dim=dim)


def mean(x: Tensor, dim: int | None = None) -> Tensor:
    return x.mean() if dim is None else x.mean(dim=dim)


def squared_l2(x: Tensor) -> Tensor:
    return (x * x).sum()


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style penalty: 0.5 x^2 / beta inside |x| < beta, |x| - 0.5 beta outside."""
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)


def l2_normalize(x: Tensor, dim: int = -1, eps: float = 1e-12) -> Tensor:
    norm = torch.sqrt((x * x).sum(dim=dim, keepdim=True) + eps * eps)
    return x / norm


def backward(loss: Tensor, inputs: Sequence[Tensor] | None = None):
    """Backpropagate a scalar loss.

    With ``inputs`` the gradients w.r.t. those tensors are returned (and leaf
    ``.grad`` fields are left untouched); otherwise gradients accumulate into
    ``.grad`` of every leaf that requires them.
    """
    if loss.numel() != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    if inputs is not None:
        return torch.autograd.grad(loss.reshape(()), list(inputs), allow_unused=True)
    loss.reshape(()).backward()
    return None


def sgd_step(params: Sequence[Tensor], grads: Sequence[Tensor | None], lr: float,
             momentum: float = 0.0, velocities: list[Tensor] | None = None,
             weight_decay: float = 0.0) -> list[Tensor]:
    """One momentum-SGD update, in place: v <- m v + g ; p <- p - lr v.

    Returns the velocity buffers (created on first call when ``velocities`` is None).
    """
    if lr < 0:
        raise ValueError(f"sgd_step: lr must be non-negative, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"sgd_step: momentum must lie in [0, 1), got {momentum}")
    if velocities is None:
        velocities = [torch.zeros_like(p) for p in params]
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeError(f"sgd_step: grad shape {tuple(g.shape)} != param shape {tuple(p.shape)}")
            if not torch.isfinite(g).all():
                raise NonFiniteGradient(f"sgd_step: non-finite gradient for parameter {i} {tuple(p.shape)}")
            if weight_decay:
                g = g + weight_decay * p
            v = velocities[i]
            v.mul_(momentum).add_(g)
            p.sub_(lr * v)
    return velocities


class SGD:
    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        sgd_step(self.params, [p.grad for p in self.params], self.lr, self.momentum,
                 self.velocities, self.weight_decay)


# ---------------------------------------------------------------------------
# finite-difference oracle

def numerical_gradient(f: Callable[[list[np.ndarray]], float], arrays: Sequence[np.ndarray],
                       step: float = 1e-5) -> list[np.ndarray]:
    """Central differences of scalar ``f`` w.r.t. each array, one coordinate at a time."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(arrays)
            flat[i] = orig - step
            lo = f(arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        out.append(g)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger of the two gradients' max magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if denom < 1e-12:
        return float(np.abs(analytic - numeric).max(initial=0.0))
    return float(np.abs(analytic - numeric).max() / denom)


def gradient_check(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
                   step: float = 1e-5) -> float:
    """Worst relative error between autograd and central differences for ``fn(*tensors)``."""
    leaves = [tensor(a, requires_grad=True) for a in arrays]
    loss = fn(*leaves)
    grads = backward(loss, leaves)

    def scalar(arrs):
        with torch.no_grad():
            return float(fn(*[tensor(a) for a in arrs]))

    numeric = numerical_gradient(scalar, arrays, step)
    worst = 0.0
    for g, n, leaf in zip(grads, numeric, leaves):
        g = np.zeros(leaf.shape) if g is None else g.detach().numpy()
        err = relative_error(g, n)
        if math.isnan(err):
            return math.inf
        worst = max(worst, err)
    return worst
