"""Dataset-directory loading for the refiner.

Consumes the reconstruction dataset layout verbatim: a
``manifest.json`` (format ``dsct-dataset-v1``) next to
``<split>/<id>/{f_gt,g_gt,f_opmt,g_opmt,p1,p2}.tsr``.  Samples are
served as normalized two-channel tensors: channel 0 is the first basis
image divided by the manifest's ``normalization["f"]`` scale, channel 1
the second divided by ``normalization["g"]``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch
from torch.utils.data import Dataset

from .tensorio import read_tensor

MANIFEST_FORMAT = "dsct-dataset-v1"
SPLITS = ("train", "val", "test")


def read_manifest(root: str) -> dict:
    path = os.path.join(root, "manifest.json")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: unknown manifest format {doc.get('format')!r}")
    return doc


def normalization_scales(manifest: dict) -> tuple[float, float]:
    """Per-channel divisors; both must be positive to be usable."""
    norm = manifest.get("normalization") or {}
    scale_f = float(norm.get("f", 0.0))
    scale_g = float(norm.get("g", 0.0))
    if scale_f <= 0.0 or scale_g <= 0.0:
        raise ValueError(
            f"manifest normalization scales must be positive, got "
            f"f={scale_f!r} g={scale_g!r}"
        )
    return scale_f, scale_g


def split_entries(manifest: dict, split: str) -> list[dict]:
    """Completed sample entries of one split, in manifest order."""
    if split not in SPLITS:
        raise ValueError(f"unknown split '{split}'")
    return [e for e in manifest["samples"]
            if e.get("split") == split and e.get("status") == "ok"]


@dataclass(frozen=True)
class Sample:
    """One loaded pair: normalized inputs and targets plus its id."""

    sample_id: str
    inputs: torch.Tensor   # (2, H, W) float32, reconstructed images
    targets: torch.Tensor  # (2, H, W) float32, ground-truth images


def _stack_pair(root: str, entry: dict, names: tuple[str, str],
                scales: tuple[float, float]) -> torch.Tensor:
    planes = []
    for name, scale in zip(names, scales):
        arr = read_tensor(os.path.join(root, entry["files"][name]))
        if arr.ndim != 2:
            raise ValueError(f"sample {entry['id']}: {name} is not a 2-d image")
        planes.append(np.asarray(arr, dtype=np.float32) / np.float32(scale))
    return torch.from_numpy(np.stack(planes, axis=0))


class PairDataset(Dataset):
    """Normalized (reconstruction, ground-truth) pairs of one split."""

    def __init__(self, root: str, split: str):
        self.root = root
        self.split = split
        self.manifest = read_manifest(root)
        self.scales = normalization_scales(self.manifest)
        self.entries = split_entries(self.manifest, split)
        if not self.entries:
            raise ValueError(f"{root}: split '{split}' has no usable samples")

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> Sample:
        entry = self.entries[index]
        return Sample(
            sample_id=entry["id"],
            inputs=_stack_pair(self.root, entry, ("f_opmt", "g_opmt"), self.scales),
            targets=_stack_pair(self.root, entry, ("f_gt", "g_gt"), self.scales),
        )


def collate(samples: list[Sample]) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
    """Stack a list of samples into batch tensors plus their ids."""
    inputs = torch.stack([s.inputs for s in samples])
    targets = torch.stack([s.targets for s in samples])
    return inputs, targets, [s.sample_id for s in samples]
