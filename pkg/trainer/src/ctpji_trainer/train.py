"""Training loop with best-checkpoint selection and a JSON-lines log.

Validation quality is the patient-mean slice accuracy (mean over
patients of the fraction of their slices classified correctly), which
matches how the patient-level report scores a model. The checkpoint
with the best validation value is retained. Runs are deterministic in
the seed up to backend nondeterminism.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .data import EmptyDataset, PatchDataset
from .losses import classification_loss
from .model import ModelConfig, SplitAttnNet, build_model, save_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 4
    jacobian_lambda: float = 0.01
    n_projections: int = 1
    seed: int = 0
    early_stop_acc: float | None = None  # stop once valid accuracy reaches this

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be > 0 and weight_decay >= 0")
        if self.jacobian_lambda < 0 or self.n_projections < 1:
            raise ValueError("jacobian_lambda must be >= 0 and n_projections >= 1")


@dataclass
class TrainResult:
    model: SplitAttnNet
    best_epoch: int
    best_valid_acc: float
    history: list[dict] = field(default_factory=list)


@torch.no_grad()
def predict_probs(model, inputs: torch.Tensor, batch_size: int = 32) -> torch.Tensor:
    """Softmax probability of the infected class, per patch."""
    model.eval()
    probs = []
    for start in range(0, inputs.shape[0], batch_size):
        logits = model(inputs[start:start + batch_size])
        probs.append(torch.softmax(logits, dim=1)[:, 1])
    return torch.cat(probs)


def patient_mean_slice_accuracy(model, dataset: PatchDataset) -> float:
    """Mean over patients of their per-slice accuracy."""
    probs = predict_probs(model, dataset.inputs)
    predicted = (probs > 0.5).long()
    per_patient: dict[str, list[bool]] = {}
    for pid, pred, label in zip(dataset.patients, predicted, dataset.labels):
        per_patient.setdefault(pid, []).append(bool(pred == label))
    accs = [sum(v) / len(v) for v in per_patient.values()]
    return sum(accs) / len(accs)


def train(
    train_set: PatchDataset,
    valid_set: PatchDataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    log_path: Path | None = None,
    checkpoint_path: Path | None = None,
) -> TrainResult:
    train_cfg.validate()
    if len(train_set) == 0:
        raise EmptyDataset("training set is empty")

    torch.manual_seed(train_cfg.seed)
    model = build_model(model_cfg)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=train_cfg.learning_rate,
        weight_decay=train_cfg.weight_decay,
    )
    shuffle_rng = torch.Generator().manual_seed(train_cfg.seed + 1)
    proj_rng = torch.Generator().manual_seed(train_cfg.seed + 2)

    best_state = {k: v.clone() for k, v in model.state_dict().items()}
    best_acc = -1.0
    best_epoch = 0
    history = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            model.train()
            order = torch.randperm(len(train_set), generator=shuffle_rng)
            epoch_loss = 0.0
            n_batches = 0
            for start in range(0, len(order), train_cfg.batch_size):
                idx = order[start:start + train_cfg.batch_size]
                if idx.numel() == 1 and len(order) > 1:
                    continue  # batch-norm needs >1 sample per training batch
                batch = train_set.inputs[idx]
                labels = train_set.labels[idx]
                loss, _ce = classification_loss(
                    model,
                    batch,
                    labels,
                    jacobian_lambda=train_cfg.jacobian_lambda,
                    n_projections=train_cfg.n_projections,
                    generator=proj_rng,
                )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                epoch_loss += float(loss.detach())
                n_batches += 1

            valid_acc = (
                patient_mean_slice_accuracy(model, valid_set) if len(valid_set) else 0.0
            )
            entry = {
                "epoch": epoch,
                "train_loss": epoch_loss / max(n_batches, 1),
                "valid_acc": valid_acc,
            }
            history.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
            if valid_acc > best_acc:
                best_acc = valid_acc
                best_epoch = epoch
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
            if (
                train_cfg.early_stop_acc is not None
                and valid_acc >= train_cfg.early_stop_acc
            ):
                break
    finally:
        if log_fh:
            log_fh.close()

    model.load_state_dict(best_state)
    model.eval()
    if checkpoint_path:
        save_checkpoint(
            model,
            checkpoint_path,
            extra={"best_epoch": best_epoch, "best_valid_acc": best_acc},
        )
    return TrainResult(
        model=model, best_epoch=best_epoch, best_valid_acc=best_acc, history=history
    )
