"""Differentiable primitives and gradient checking.

Reverse-mode differentiation is delegated to ``torch.autograd``; this module
pins down the small set of primitives the model is built from, gives them
shape-checked entry points, and provides the finite-difference oracle used
throughout the test-suite.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping, Sequence

import torch
import torch.nn.functional as F

DEFAULT_DTYPE = torch.float64
IGNORE_INDEX = -1


class ShapeError(ValueError):
    """Raised by a primitive when its operands have incompatible shapes."""

    def __init__(self, primitive: str, *shapes, detail: str = ""):
        self.primitive = primitive
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{primitive}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    def __init__(self, where: str, value: float):
        self.where = where
        self.value = value
        super().__init__(f"non-finite value {value!r} in {where}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError("add", a.shape, b.shape) from None
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError("mul", a.shape, b.shape) from None
    return a * b


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def rms_normalize(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Scale each row of ``x`` to unit root-mean-square.

    ``eps`` is added to the mean square, so an all-zero row stays zero.
    """
    if x.shape[-1] == 0:
        raise ShapeError("rms_normalize", x.shape, detail="last dim must be > 0")
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)


def cosine(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12):
    """Row-wise cosine similarity.

    Returns ``(cos, degenerate)`` where ``degenerate`` marks rows in which
    either operand has (near) zero norm; those rows get cosine 0.
    """
    if a.shape != b.shape:
        raise ShapeError("cosine", a.shape, b.shape)
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    degenerate = (na <= eps) | (nb <= eps)
    denom = torch.where(degenerate, torch.ones_like(na), na * nb)
    cos = (a * b).sum(dim=-1) / denom
    cos = torch.where(degenerate, torch.zeros_like(cos), cos)
    return cos, degenerate


def segment_mean_pool(x: torch.Tensor, segment_ids: torch.Tensor, n_segments: int) -> torch.Tensor:
    """Mean of the rows of ``x`` (N x d) grouped by ``segment_ids`` (N,)."""
    if x.dim() != 2 or segment_ids.shape != x.shape[:1]:
        raise ShapeError("segment_mean_pool", x.shape, segment_ids.shape)
    sums = x.new_zeros(n_segments, x.shape[1]).index_add(0, segment_ids, x)
    counts = torch.bincount(segment_ids, minlength=n_segments).to(x.dtype)
    if (counts == 0).any():
        raise ShapeError("segment_mean_pool", x.shape, segment_ids.shape, detail="empty segment")
    return sums / counts[:, None]


def repeat_by_lengths(c: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Row ``k`` of ``c`` repeated ``lengths[k]`` times (``repeat_interleave``)."""
    if c.shape[0] != lengths.shape[0]:
        raise ShapeError("repeat_by_lengths", c.shape, lengths.shape)
    return torch.repeat_interleave(c, lengths, dim=0)


def gather_rows(c: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    if index.numel() and int(index.max()) >= c.shape[0]:
        raise ShapeError("gather_rows", c.shape, index.shape, detail="index out of range")
    return c[index]


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Softmax cross-entropy; targets equal to ``IGNORE_INDEX`` are skipped."""
    if logits.shape[:-1] != targets.shape:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]),
        targets.reshape(-1),
        ignore_index=IGNORE_INDEX,
        reduction=reduction,
    )


PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "softmax": softmax,
    "rms_normalize": rms_normalize,
    "segment_mean_pool": segment_mean_pool,
    "repeat_by_lengths": repeat_by_lengths,
    "gather_rows": gather_rows,
    "cross_entropy": cross_entropy,
    "cosine": cosine,
}


def evaluate_with_gradients(
    fn: Callable[..., torch.Tensor],
    params: Mapping[str, torch.Tensor],
    *inputs,
    cotangent: torch.Tensor | None = None,
):
    """Evaluate ``fn(params, *inputs)`` and differentiate it w.r.t. ``params``.

    A non-scalar output needs an explicit ``cotangent`` of the same shape; the
    returned gradients are then the vector-Jacobian product.
    """
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    out = fn(leaves, *inputs)
    if out.dim() != 0 and cotangent is None:
        raise ShapeError("evaluate_with_gradients", out.shape, detail="non-scalar output needs a cotangent")
    if cotangent is not None and cotangent.shape != out.shape:
        raise ShapeError("evaluate_with_gradients", out.shape, cotangent.shape)
    names = list(leaves)
    grads = torch.autograd.grad(
        out, [leaves[n] for n in names], grad_outputs=cotangent, allow_unused=True
    )
    result = {}
    for n, g in zip(names, grads):
        result[n] = torch.zeros_like(leaves[n]) if g is None else g
    return out.detach(), result


def finite_difference_check(
    fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    eps: float = 1e-5,
    names: Sequence[str] | None = None,
) -> tuple[float, str]:
    """Compare autograd gradients of a scalar ``fn`` with central differences.

    Returns ``(max_rel_err, worst_param_name)`` where the relative error of one
    coordinate is ``|a - c| / (|a| + |c| + 1e-12)``. ``fn`` must be
    deterministic (freeze any sampling before calling).
    """
    base = {k: v.detach().clone() for k, v in params.items()}
    value, grads = evaluate_with_gradients(lambda p: fn(p), base)
    if not math.isfinite(float(value)):
        raise NonFiniteError("finite_difference_check(base)", float(value))

    worst, worst_name = 0.0, ""
    with torch.no_grad():
        for name in names or list(base):
            p = base[name]
            flat = p.view(-1)
            analytic = grads[name].reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(fn(base))
                flat[i] = orig - eps
                down = float(fn(base))
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NonFiniteError(f"finite_difference_check({name}[{i}])", up if not math.isfinite(up) else down)
                central = (up - down) / (2 * eps)
                a = analytic[i].item()
                err = abs(a - central) / (abs(a) + abs(central) + 1e-12)
                if err > worst:
                    worst, worst_name = err, name
    return worst, worst_name
