"""Cross-entropy plus a random-projection Jacobian penalty.

The penalty estimates the squared Frobenius norm of the input->logits
Jacobian: draw unit vectors v uniformly on the output-space sphere,
differentiate <v, logits> with respect to the input, and average
C * ||grad||^2 over projections and the batch (C = number of classes).
The estimator is unbiased; on a linear map it equals ||W||_F^2 in
expectation. The total loss is CE + (lambda/2) * estimate.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F


def _unit_projections(shape, generator=None, device=None):
    v = torch.randn(shape, generator=generator, device=device)
    return v / v.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def jacobian_frobenius_estimate(
    inputs: torch.Tensor,
    logits: torch.Tensor,
    n_projections: int = 1,
    generator: torch.Generator | None = None,
    projections: torch.Tensor | None = None,
    create_graph: bool = True,
) -> torch.Tensor:
    """Estimate mean-over-batch ||d logits / d input||_F^2.

    ``projections`` may pin the random unit vectors (shape
    ``(n_projections, batch, classes)``) for reproducible evaluations.
    ``inputs`` must already require gradients and be the tensor the
    logits were computed from.
    """
    batch, n_classes = logits.shape
    if projections is None:
        projections = _unit_projections(
            (n_projections, batch, n_classes), generator=generator, device=logits.device
        )
    total = logits.new_zeros(())
    n_proj = projections.shape[0]
    for i, v in enumerate(projections):
        score = (logits * v).sum()
        (grad,) = torch.autograd.grad(
            score,
            inputs,
            create_graph=create_graph,
            retain_graph=create_graph or i < n_proj - 1,
        )
        total = total + n_classes * grad.reshape(batch, -1).pow(2).sum(dim=1).mean()
    return total / n_proj


def classification_loss(
    model: torch.nn.Module,
    batch: torch.Tensor,
    labels: torch.Tensor,
    jacobian_lambda: float = 0.0,
    n_projections: int = 1,
    generator: torch.Generator | None = None,
    projections: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns ``(total_loss, cross_entropy)`` for one batch.

    With ``jacobian_lambda == 0`` the total equals the cross-entropy
    exactly and no extra graph is built.
    """
    if jacobian_lambda < 0:
        raise ValueError(f"jacobian_lambda must be >= 0, got {jacobian_lambda}")
    if jacobian_lambda == 0.0:
        logits = model(batch)
        ce = F.cross_entropy(logits, labels)
        return ce, ce
    # keep a caller-supplied grad-enabled batch so the loss stays
    # differentiable with respect to it (used by the gradient checks)
    x = batch if batch.requires_grad else batch.detach().requires_grad_(True)
    logits = model(x)
    ce = F.cross_entropy(logits, labels)
    penalty = jacobian_frobenius_estimate(
        x, logits, n_projections=n_projections, generator=generator, projections=projections
    )
    return ce + 0.5 * jacobian_lambda * penalty, ce


def measured_jacobian_norm(
    model: torch.nn.Module,
    batch: torch.Tensor,
    n_projections: int = 32,
    generator: torch.Generator | None = None,
) -> float:
    """Monte-Carlo measurement of the model's Jacobian norm on a batch."""
    x = batch.detach().requires_grad_(True)
    logits = model(x)
    est = jacobian_frobenius_estimate(
        x, logits, n_projections=n_projections, generator=generator, create_graph=False
    )
    return float(est)
