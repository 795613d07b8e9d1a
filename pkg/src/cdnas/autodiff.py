"""Flat parameter vectors and matrix-free first/second-order derivatives.

Loss functions take :class:`ParamVector` arguments and return a scalar tensor.
Second-order products are obtained by differentiating the gradient graph
(double backward); no Hessian is ever materialised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import torch

DTYPES = {"double": torch.float64, "single": torch.float32}


def resolve_dtype(precision: str) -> torch.dtype:
    try:
        return DTYPES[precision]
    except KeyError:
        raise ValueError(f"precision must be one of {sorted(DTYPES)}, got {precision!r}") from None


class GradientError(ArithmeticError):
    pass


@dataclass
class ParamVector:
    """A flat 1-D tensor plus an ordered ``name -> (offset, shape)`` layout."""

    values: torch.Tensor
    layout: dict[str, tuple[int, tuple[int, ...]]]

    def __post_init__(self):
        if self.values.dim() != 1:
            raise ValueError("ParamVector values must be one-dimensional")
        total = sum(math.prod(shape) for _, shape in self.layout.values())
        if total != self.values.numel():
            raise ValueError(f"layout covers {total} values but vector has {self.values.numel()}")

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, torch.Tensor]) -> ParamVector:
        layout = {}
        offset = 0
        for name, t in tensors.items():
            layout[name] = (offset, tuple(t.shape))
            offset += t.numel()
        if tensors:
            flat = torch.cat([t.detach().reshape(-1) for t in tensors.values()])
        else:
            flat = torch.zeros(0, dtype=torch.get_default_dtype())
        return cls(flat, layout)

    def unflatten(self) -> dict[str, torch.Tensor]:
        """Named views into ``values`` (autograd flows back to the flat tensor)."""
        return {name: self.values[off:off + math.prod(shape)].view(shape)
                for name, (off, shape) in self.layout.items()}

    def like(self, values: torch.Tensor) -> ParamVector:
        return ParamVector(values, self.layout)

    def zeros_like(self) -> ParamVector:
        return self.like(torch.zeros_like(self.values))

    def group(self, name: str) -> torch.Tensor:
        off, shape = self.layout[name]
        return self.values[off:off + math.prod(shape)].view(shape)

    def check_layout(self, other: ParamVector, what: str = "vector") -> None:
        if self.layout != other.layout:
            raise ValueError(f"{what} layout does not match parameter layout")

    def __len__(self) -> int:
        return self.values.numel()


ScalarLossFn = Callable[..., torch.Tensor]


def _check_finite(values: torch.Tensor, layout, what: str) -> None:
    if torch.isfinite(values).all():
        return
    for name, (off, shape) in layout.items():
        chunk = values[off:off + math.prod(shape)]
        if not torch.isfinite(chunk).all():
            raise GradientError(f"non-finite {what} in parameter group {name!r}")
    raise GradientError(f"non-finite {what}")


def _leaf(p: ParamVector) -> ParamVector:
    return p.like(p.values.detach().clone().requires_grad_(True))


def _grad_or_zero(out, inp: torch.Tensor, **kw) -> torch.Tensor:
    (g,) = torch.autograd.grad(out, inp, allow_unused=True, **kw)
    return torch.zeros_like(inp) if g is None else g


def gradient(loss: ScalarLossFn, at: ParamVector, *extra: ParamVector) -> ParamVector:
    """Gradient of ``loss(at, *extra)`` with respect to ``at``."""
    x = _leaf(at)
    val = loss(x, *extra)
    if not torch.isfinite(val):
        raise GradientError(f"non-finite loss {val.item()}")
    g = _grad_or_zero(val, x.values).detach()
    _check_finite(g, at.layout, "gradient")
    return at.like(g)


class SecondOrder:
    """Gradient graph of ``loss(theta, phi)`` w.r.t. theta, kept for repeated products.

    One forward/backward builds the graph; each :meth:`hvp` or :meth:`mixed_vjp`
    is then a single extra backward pass.
    """

    def __init__(self, loss: ScalarLossFn, theta: ParamVector, phi: ParamVector | None = None):
        self.theta = _leaf(theta)
        self.phi = _leaf(phi) if phi is not None else None
        args = (self.theta,) if phi is None else (self.theta, self.phi)
        self.value = loss(*args)
        if not torch.isfinite(self.value):
            raise GradientError(f"non-finite loss {self.value.item()}")
        (g,) = torch.autograd.grad(self.value, self.theta.values, create_graph=True, allow_unused=True)
        if g is None:
            g = torch.zeros_like(self.theta.values)
        self.grad_graph = g
        _check_finite(g.detach(), theta.layout, "gradient")

    @property
    def grad(self) -> ParamVector:
        return self.theta.like(self.grad_graph.detach())

    def hvp(self, v: ParamVector) -> ParamVector:
        self.theta.check_layout(v, "hvp direction")
        if not self.grad_graph.requires_grad:
            return v.zeros_like()
        hv = _grad_or_zero(self.grad_graph, self.theta.values,
                           grad_outputs=v.values.to(self.grad_graph.dtype), retain_graph=True)
        return self.theta.like(hv.detach())

    def mixed_vjp(self, v: ParamVector) -> ParamVector:
        if self.phi is None:
            raise ValueError("loss was linearised without a phi argument")
        self.theta.check_layout(v, "vjp vector")
        if not self.grad_graph.requires_grad:
            return self.phi.zeros_like()
        out = _grad_or_zero(self.grad_graph, self.phi.values,
                            grad_outputs=v.values.to(self.grad_graph.dtype), retain_graph=True)
        return self.phi.like(out.detach())


def hvp(loss: ScalarLossFn, at: ParamVector, v: ParamVector) -> ParamVector:
    """(d^2 loss / d at^2) @ v."""
    at.check_layout(v, "hvp direction")
    return SecondOrder(loss, at).hvp(v)


def mixed_second_vjp(loss: ScalarLossFn, at_theta: ParamVector, at_phi: ParamVector,
                     v: ParamVector) -> ParamVector:
    """v^T (d/dphi d/dtheta loss), laid out over phi."""
    at_theta.check_layout(v, "vjp vector")
    return SecondOrder(loss, at_theta, at_phi).mixed_vjp(v)
