"""Finite-difference gradient verification for the differentiable stack."""

from __future__ import annotations

from collections.abc import Callable

import torch
from torch import nn


def finite_difference_gradients(loss_fn: Callable[[], torch.Tensor],
                                params: list[torch.Tensor],
                                eps: float = 1e-5) -> list[torch.Tensor]:
    """Central-difference gradient of a scalar loss w.r.t. each parameter.

    ``loss_fn`` must be a pure function of the current parameter values
    (re-evaluated 2x per scalar entry). Use float64 parameters.
    """
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2.0 * eps)
            grads.append(g)
    return grads


def max_relative_error(analytic: list[torch.Tensor],
                       numeric: list[torch.Tensor],
                       floor: float = 1e-5) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries.

    The floor turns the comparison absolute for entries below it: with an
    O(1) loss in float64, central differences carry ~1e-10 of rounding
    noise, so demanding 1e-4 *relative* agreement on a 1e-8 gradient entry
    would only measure that noise. floor=1e-5 keeps the 1e-4 relative check
    honest where gradients are resolvable and bounds smaller entries by
    1e-9 absolute, two orders above the noise.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = torch.maximum(torch.maximum(a.abs(), n.abs()),
                              torch.full_like(a, floor))
        worst = max(worst, ((a - n).abs() / denom).max().item())
    return worst


def gradcheck_module(module: nn.Module, loss_fn: Callable[[], torch.Tensor],
                     eps: float = 1e-5, rtol: float = 1e-4) -> float:
    """Compare autograd gradients of all module parameters to central FD.

    Returns the worst relative error; raises AssertionError above ``rtol``.
    The module must be in float64 and eval mode for the comparison to be
    meaningful at these tolerances.
    """
    params = [p for p in module.parameters() if p.requires_grad]
    for p in params:
        if p.dtype != torch.float64:
            raise ValueError("gradcheck requires float64 parameters")
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.detach().clone() if p.grad is not None
                else torch.zeros_like(p) for p in params]
    numeric = finite_difference_gradients(loss_fn, params, eps=eps)
    err = max_relative_error(analytic, numeric)
    if err > rtol:
        raise AssertionError(f"gradcheck failed: rel err {err:.3e} > {rtol:.1e}")
    return err
