"""Training loop: Adam on the two-channel MSE with temperature annealing.

The loss is the mean over samples of half the sum of the per-channel
mean squared errors, computed on normalized channels so both basis
images carry equal weight.  The expert-softmax temperature starts high
(near-uniform mixing) and is annealed linearly to its minimum over the
first epochs, then held.  The best-validation-loss weights are kept and
written as a single checkpoint next to a JSON history log with one row
per epoch: epoch, train_loss, val_loss, mse_f, mse_g.
"""

from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import asdict, dataclass

import torch
from torch.utils.data import DataLoader

from .data import PairDataset, collate, normalization_scales, read_manifest
from .network import NetworkConfig, RefinerNet

CHECKPOINT_FORMAT = "refinenet-ckpt-v1"


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, schedule and stopping parameters."""

    learning_rate: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 100
    patience: int = 10
    t_start: float = 30.0
    t_min: float = 1.0
    anneal_epochs: int = 10
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self):
        if not self.learning_rate > 0.0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not (self.t_start >= self.t_min and self.t_min > 0.0):
            raise ValueError("temperatures must satisfy t_start >= t_min > 0")
        if self.anneal_epochs < 0:
            raise ValueError("anneal epochs must be >= 0")


def temperature_at(config: TrainConfig, epoch: int) -> float:
    """Temperature of a 1-based epoch: linear anneal, then held.

    Epoch 1 runs at t_start, epoch ``anneal_epochs`` at t_min, with
    equal decrements in between; later epochs stay at t_min.
    """
    steps = config.anneal_epochs
    if steps <= 1 or epoch >= steps:
        return config.t_min
    frac = max(epoch - 1, 0) / (steps - 1)
    return config.t_start + (config.t_min - config.t_start) * frac


def channel_mse(pred: torch.Tensor, target: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean squared error of each channel over a (B, 2, H, W) batch."""
    diff = pred - target
    return (diff[:, 0] ** 2).mean(), (diff[:, 1] ** 2).mean()


def pair_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Half the sum of the two per-channel mean squared errors."""
    mse_f, mse_g = channel_mse(pred, target)
    return 0.5 * (mse_f + mse_g)


def _evaluate(net: RefinerNet, loader: DataLoader, device: str) -> tuple[float, float, float]:
    """Split-mean loss and per-channel MSEs in evaluation mode."""
    net.eval()
    sq_f = sq_g = 0.0
    count = 0
    with torch.no_grad():
        for inputs, targets, _ in loader:
            pred = net(inputs.to(device))
            diff = pred - targets.to(device)
            sq_f += float((diff[:, 0] ** 2).sum())
            sq_g += float((diff[:, 1] ** 2).sum())
            count += diff[:, 0].numel()
    mse_f = sq_f / count
    mse_g = sq_g / count
    return 0.5 * (mse_f + mse_g), mse_f, mse_g


def train(root: str, net_config: NetworkConfig, train_config: TrainConfig,
          out_dir: str) -> dict:
    """Fit the refiner on a dataset directory; returns a run summary."""
    cfg = train_config
    manifest = read_manifest(root)
    scales = normalization_scales(manifest)
    train_set = PairDataset(root, "train")
    val_set = PairDataset(root, "val")

    torch.manual_seed(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    train_loader = DataLoader(train_set, batch_size=cfg.batch_size,
                              shuffle=True, generator=generator,
                              collate_fn=collate, num_workers=0)
    val_loader = DataLoader(val_set, batch_size=cfg.batch_size,
                            shuffle=False, collate_fn=collate, num_workers=0)
    eval_train_loader = DataLoader(train_set, batch_size=cfg.batch_size,
                                   shuffle=False, collate_fn=collate,
                                   num_workers=0)

    net = RefinerNet(net_config).to(cfg.device)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)

    history: list[dict] = []

    def log_row(epoch: int, train_loss: float) -> tuple[float, float, float]:
        val_loss, mse_f, mse_g = _evaluate(net, val_loader, cfg.device)
        if not all(math.isfinite(v) for v in (train_loss, val_loss)):
            raise RuntimeError(
                f"non-finite loss at epoch {epoch}: "
                f"train={train_loss!r} val={val_loss!r}"
            )
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": val_loss, "mse_f": mse_f, "mse_g": mse_g})
        return val_loss, mse_f, mse_g

    # Epoch 0 row: the untrained network, so the curves include their
    # starting point and "improved on the initial state" is checkable.
    net.set_temperature(temperature_at(cfg, 1))
    init_train_loss, _, _ = _evaluate(net, eval_train_loader, cfg.device)
    best_val, _, _ = log_row(0, init_train_loss)
    best_state = copy.deepcopy(net.state_dict())
    best_epoch = 0
    since_best = 0

    for epoch in range(1, cfg.max_epochs + 1):
        net.set_temperature(temperature_at(cfg, epoch))
        net.train()
        running = 0.0
        seen = 0
        for inputs, targets, _ in train_loader:
            optimizer.zero_grad()
            pred = net(inputs.to(cfg.device))
            loss = pair_loss(pred, targets.to(cfg.device))
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch} "
                    f"(temperature {net.blocks['b0_0'].conv1.attention.temperature:g})"
                )
            loss.backward()
            optimizer.step()
            running += float(loss.detach()) * inputs.shape[0]
            seen += inputs.shape[0]
        val_loss, _, _ = log_row(epoch, running / seen)
        if val_loss < best_val:
            best_val = val_loss
            best_state = copy.deepcopy(net.state_dict())
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    os.makedirs(out_dir, exist_ok=True)
    checkpoint_path = os.path.join(out_dir, "checkpoint.pt")
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "network": asdict(net_config),
        "train": asdict(cfg),
        "normalization": {"f": scales[0], "g": scales[1]},
        "temperature": temperature_at(cfg, max(best_epoch, 1)),
        "best_epoch": best_epoch,
        "best_val_loss": best_val,
        "state": best_state,
    }, checkpoint_path)
    history_path = os.path.join(out_dir, "history.json")
    with open(history_path, "w", encoding="utf-8") as fh:
        json.dump(history, fh, indent=2)
        fh.write("\n")
    return {"history": history, "best_epoch": best_epoch,
            "best_val_loss": best_val, "checkpoint": checkpoint_path,
            "history_path": history_path}
