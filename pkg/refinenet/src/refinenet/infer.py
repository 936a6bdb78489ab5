"""Inference: refine reconstructed pairs and write tensor files.

Loading a checkpoint rebuilds the network from its stored
configuration, restores the best-validation weights and the
temperature they were trained at, and switches to evaluation mode so
batch-norm statistics are fixed and repeated runs are bitwise
identical.  Refinement normalizes each channel by the training scales,
runs the network, inverts the normalization and writes
``<out>/<id>/{f_refined,g_refined}.tsr``.
"""

from __future__ import annotations

import os

import numpy as np
import torch

from .data import normalization_scales, read_manifest, split_entries
from .network import NetworkConfig, RefinerNet
from .tensorio import read_tensor, write_tensor
from .train import CHECKPOINT_FORMAT


def load_checkpoint(path: str, device: str = "cpu") -> tuple[RefinerNet, dict]:
    """Rebuild the trained network; returns it in eval mode plus metadata."""
    doc = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a refiner checkpoint")
    net = RefinerNet(NetworkConfig(**doc["network"]))
    net.load_state_dict(doc["state"])
    net.set_temperature(float(doc["temperature"]))
    net.to(device)
    net.eval()
    meta = {k: doc[k] for k in
            ("network", "train", "normalization", "temperature",
             "best_epoch", "best_val_loss")}
    return net, meta


def refine_pair(net: RefinerNet, scales: tuple[float, float],
                f: np.ndarray, g: np.ndarray,
                device: str = "cpu") -> tuple[np.ndarray, np.ndarray]:
    """Refine one reconstructed image pair; arrays in, arrays out."""
    scale_f, scale_g = scales
    if not (scale_f > 0.0 and scale_g > 0.0):
        raise ValueError("normalization scales must be positive")
    if np.shape(f) != np.shape(g) or np.ndim(f) != 2:
        raise ValueError("f and g must be 2-d images of equal shape")
    stacked = np.stack([
        np.asarray(f, dtype=np.float32) / np.float32(scale_f),
        np.asarray(g, dtype=np.float32) / np.float32(scale_g),
    ])
    batch = torch.from_numpy(stacked)[None].to(device)
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            pred = net(batch)[0].cpu().numpy()
    finally:
        net.train(was_training)
    return (pred[0] * np.float32(scale_f)).astype(np.float32), \
           (pred[1] * np.float32(scale_g)).astype(np.float32)


def refine_dataset(root: str, checkpoint_path: str, out_dir: str,
                   split: str = "test", device: str = "cpu") -> list[str]:
    """Refine every completed sample of one split; returns the ids."""
    net, meta = load_checkpoint(checkpoint_path, device)
    norm = meta["normalization"]
    scales = (float(norm["f"]), float(norm["g"]))
    manifest = read_manifest(root)
    dataset_scales = normalization_scales(manifest)
    if any(abs(a - b) > 1e-12 * max(abs(a), 1.0)
           for a, b in zip(scales, dataset_scales)):
        raise ValueError(
            f"checkpoint normalization {scales} does not match the dataset's "
            f"{dataset_scales}; refusing to mix scales"
        )
    entries = split_entries(manifest, split)
    if not entries:
        raise ValueError(f"{root}: split '{split}' has no usable samples")
    done = []
    for entry in entries:
        f = read_tensor(os.path.join(root, entry["files"]["f_opmt"]))
        g = read_tensor(os.path.join(root, entry["files"]["g_opmt"]))
        f_ref, g_ref = refine_pair(net, scales, f, g, device)
        sample_dir = os.path.join(out_dir, entry["id"])
        os.makedirs(sample_dir, exist_ok=True)
        write_tensor(os.path.join(sample_dir, "f_refined.tsr"), f_ref)
        write_tensor(os.path.join(sample_dir, "g_refined.tsr"), g_ref)
        done.append(entry["id"])
    return done
