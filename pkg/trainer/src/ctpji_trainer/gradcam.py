"""Gradient-weighted class-activation maps over a target layer.

``gradcam`` weights each target-layer channel by its spatially averaged
gradient; ``gradcampp`` uses the second-order pixel-wise weighting with
rectified gradients. Maps are rectified, normalized to a unit maximum
when nonzero, and returned both at the layer's resolution and upsampled
to the input size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

METHODS = ("gradcam", "gradcampp")


class InvalidLayer(ValueError):
    """The requested target layer is not a module of the model."""


@dataclass
class Heatmap:
    values: np.ndarray  # target-layer resolution, [0, 1]
    upsampled: np.ndarray  # input resolution, [0, 1]
    method: str


def _normalize(grid: torch.Tensor) -> torch.Tensor:
    grid = F.relu(grid)
    peak = grid.max()
    if peak > 0:
        grid = grid / peak
    return grid


SCORES = ("logit", "margin")


def compute_cam(
    model: nn.Module,
    patch: torch.Tensor,
    target_layer: nn.Module | None = None,
    method: str = "gradcam",
    class_index: int | None = None,
    output_size: int | None = None,
    score: str = "logit",
) -> Heatmap:
    """Class-activation heatmap for one patch (``(1, H, W)`` or ``(1, 1, H, W)``).

    ``class_index`` defaults to the predicted class; ``output_size``
    defaults to the patch's spatial size. ``score`` picks the scalar the
    gradients flow from: the raw class logit, or ``margin`` (class logit
    minus the strongest other logit — the same score up to evidence
    shared by all classes, since softmax is shift-invariant; it isolates
    class-discriminative regions).
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    if score not in SCORES:
        raise ValueError(f"score must be one of {SCORES}, got {score!r}")
    if target_layer is None:
        target_layer = model.last_stage
    if not any(m is target_layer for m in model.modules()):
        raise InvalidLayer("target layer is not part of the model")

    if patch.dim() == 3:
        patch = patch.unsqueeze(0)
    if patch.dim() != 4 or patch.shape[0] != 1:
        raise ValueError(f"expected one patch, got shape {tuple(patch.shape)}")
    out_size = output_size or patch.shape[-1]

    captured: dict[str, torch.Tensor] = {}

    def hook(_module, _inputs, output):
        captured["activations"] = output

    handle = target_layer.register_forward_hook(hook)
    try:
        model.eval()
        logits = model(patch)
    finally:
        handle.remove()
    activations = captured["activations"]
    if class_index is None:
        class_index = int(logits.argmax(dim=1))
    target = logits[0, class_index]
    if score == "margin":
        others = torch.cat([logits[0, :class_index], logits[0, class_index + 1:]])
        target = target - others.max()
    (grads,) = torch.autograd.grad(target, activations)

    acts = activations[0].detach()  # (K, h, w)
    grads = grads[0].detach()

    if method == "gradcam":
        weights = grads.mean(dim=(1, 2))
    else:
        grads_sq = grads.pow(2)
        grads_cu = grads.pow(3)
        denom = 2.0 * grads_sq + (acts * grads_cu).sum(dim=(1, 2), keepdim=True)
        alpha = grads_sq / torch.where(
            denom.abs() < 1e-12, torch.full_like(denom, 1e-12), denom
        )
        weights = (alpha * F.relu(grads)).sum(dim=(1, 2))

    cam = _normalize((weights.view(-1, 1, 1) * acts).sum(dim=0))
    upsampled = F.interpolate(
        cam.view(1, 1, *cam.shape),
        size=(out_size, out_size),
        mode="bilinear",
        align_corners=False,
    )[0, 0]
    return Heatmap(
        values=cam.numpy().astype(np.float32),
        upsampled=upsampled.numpy().astype(np.float32),
        method=method,
    )


def encode_heatmap_pgm(grid: np.ndarray) -> bytes:
    """16-bit big-endian PGM of a [0, 1] heatmap (same format as patches)."""
    values = np.rint(np.asarray(grid) * 65535).astype(">u2")
    header = f"P5\n{grid.shape[1]} {grid.shape[0]}\n65535\n".encode("ascii")
    return header + values.tobytes()
