"""Shared fixtures: a small dataset built through the producer's CLI."""

import json
import os
import shutil
import subprocess
import sys

import pytest

GEOM_FLAGS = ["--n-s", "12", "--n-d", "32", "--l-d", "1.6", "--n-r", "32"]


def build_dataset(out_root: str, cache_dir: str, *, count: int, split: str,
                  seed: int, extra: list[str] | None = None) -> None:
    """Run the dataset-builder CLI; the only producer-side dependency."""
    cmd = [sys.executable, "-m", "dsct.cli", "dataset", "--out", out_root,
           "--count", str(count), "--split", split, "--seed", str(seed),
           "--matrix-cache", cache_dir] + (extra or [])
    proc = subprocess.run(cmd, capture_output=True, text=True)
    assert proc.returncode == 0, f"dataset build failed:\n{proc.stderr}"


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    return str(tmp_path_factory.mktemp("matrix-cache"))


@pytest.fixture(scope="session")
def dataset_builder(cache_dir):
    """build_dataset with the session's shared matrix cache bound in."""
    def run(out_root: str, **kwargs) -> None:
        build_dataset(out_root, cache_dir, **kwargs)
    return run


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory, cache_dir):
    """8 samples at 32x32, split 6/1/1, with reconstructions."""
    root = str(tmp_path_factory.mktemp("toy") / "ds")
    build_dataset(root, cache_dir, count=8, split="6:1:1", seed=3,
                  extra=["--i0", "10000", "--sweeps", "2"] + GEOM_FLAGS)
    return root


@pytest.fixture()
def retagged_root(toy_root, tmp_path):
    """Copy of the toy dataset whose manifest claims every sample is train."""
    root = str(tmp_path / "retagged")
    shutil.copytree(toy_root, root)
    path = os.path.join(root, "manifest.json")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    for entry in doc["samples"]:
        entry["split"] = "train"
    doc["splits"] = {"train": doc["count"], "val": 0, "test": 0}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    return root
