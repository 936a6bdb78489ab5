"""Inference: checkpoint loading, refinement outputs, determinism."""

import os

import numpy as np
import pytest
import torch

from refinenet.data import read_manifest, split_entries
from refinenet.infer import load_checkpoint, refine_dataset, refine_pair
from refinenet.network import NetworkConfig
from refinenet.tensorio import read_tensor
from refinenet.train import TrainConfig, train

TINY_NET = NetworkConfig(depth=1, channels=(4, 8))


@pytest.fixture(scope="module")
def checkpoint(toy_root, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("ckpt-run"))
    summary = train(toy_root, TINY_NET,
                    TrainConfig(max_epochs=3, batch_size=4, seed=2), out)
    return summary["checkpoint"]


class TestLoadCheckpoint:
    def test_roundtrip(self, checkpoint):
        net, meta = load_checkpoint(checkpoint)
        assert not net.training
        assert net.config == TINY_NET
        assert meta["normalization"]["f"] > 0
        assert meta["temperature"] > 0

    def test_temperature_restored_on_gates(self, checkpoint):
        net, meta = load_checkpoint(checkpoint)
        gate = net.blocks["b0_0"].conv1.attention
        assert gate.temperature == meta["temperature"]

    def test_rejects_foreign_file(self, tmp_path):
        path = str(tmp_path / "other.pt")
        torch.save({"format": "something-else"}, path)
        with pytest.raises(ValueError, match="not a refiner checkpoint"):
            load_checkpoint(path)


class TestRefinePair:
    def test_shapes_and_dtype(self, checkpoint):
        net, meta = load_checkpoint(checkpoint)
        scales = (meta["normalization"]["f"], meta["normalization"]["g"])
        f = np.random.default_rng(0).random((32, 32), dtype=np.float32)
        g = np.random.default_rng(1).random((32, 32), dtype=np.float32)
        f_ref, g_ref = refine_pair(net, scales, f, g)
        assert f_ref.shape == (32, 32) and g_ref.shape == (32, 32)
        assert f_ref.dtype == np.float32 and g_ref.dtype == np.float32
        assert np.isfinite(f_ref).all() and np.isfinite(g_ref).all()

    def test_rejects_bad_scales_and_shapes(self, checkpoint):
        net, _ = load_checkpoint(checkpoint)
        img = np.zeros((32, 32), dtype=np.float32)
        with pytest.raises(ValueError, match="positive"):
            refine_pair(net, (0.0, 1.0), img, img)
        with pytest.raises(ValueError, match="equal shape"):
            refine_pair(net, (1.0, 1.0), img, np.zeros((16, 16), np.float32))

    def test_restores_training_flag(self, checkpoint):
        net, meta = load_checkpoint(checkpoint)
        scales = (meta["normalization"]["f"], meta["normalization"]["g"])
        img = np.zeros((32, 32), dtype=np.float32)
        net.train()
        refine_pair(net, scales, img, img)
        assert net.training
        net.eval()
        refine_pair(net, scales, img, img)
        assert not net.training


class TestRefineDataset:
    def test_writes_refined_tensors(self, toy_root, checkpoint, tmp_path):
        out = str(tmp_path / "refined")
        ids = refine_dataset(toy_root, checkpoint, out, split="test")
        entries = split_entries(read_manifest(toy_root), "test")
        assert ids == [e["id"] for e in entries]
        for sid in ids:
            for name in ("f_refined", "g_refined"):
                arr = read_tensor(os.path.join(out, sid, f"{name}.tsr"))
                assert arr.shape == (32, 32)
                assert arr.dtype == np.float32
                assert np.isfinite(arr).all()

    def test_repeat_runs_are_bitwise_identical(self, toy_root, checkpoint,
                                               tmp_path):
        out_a = str(tmp_path / "a")
        out_b = str(tmp_path / "b")
        ids = refine_dataset(toy_root, checkpoint, out_a, split="val")
        refine_dataset(toy_root, checkpoint, out_b, split="val")
        for sid in ids:
            for name in ("f_refined.tsr", "g_refined.tsr"):
                with open(os.path.join(out_a, sid, name), "rb") as fh:
                    blob_a = fh.read()
                with open(os.path.join(out_b, sid, name), "rb") as fh:
                    blob_b = fh.read()
                assert blob_a == blob_b

    def test_empty_split_rejected(self, retagged_root, checkpoint, tmp_path):
        with pytest.raises(ValueError, match="no usable samples"):
            refine_dataset(retagged_root, checkpoint, str(tmp_path / "o"),
                           split="test")

    def test_scale_mismatch_rejected(self, toy_root, checkpoint, tmp_path):
        doc = torch.load(checkpoint, map_location="cpu", weights_only=True)
        doc["normalization"] = {"f": 123.0, "g": doc["normalization"]["g"]}
        altered = str(tmp_path / "altered.pt")
        torch.save(doc, altered)
        with pytest.raises(ValueError, match="does not match"):
            refine_dataset(toy_root, altered, str(tmp_path / "o"))

    def test_denormalization_uses_stored_scales(self, toy_root, checkpoint,
                                                tmp_path):
        """Raw-scale outputs equal scale * normalized network outputs."""
        net, meta = load_checkpoint(checkpoint)
        scales = (meta["normalization"]["f"], meta["normalization"]["g"])
        entry = split_entries(read_manifest(toy_root), "test")[0]
        f = read_tensor(os.path.join(toy_root, entry["files"]["f_opmt"]))
        g = read_tensor(os.path.join(toy_root, entry["files"]["g_opmt"]))
        stacked = np.stack([f / np.float32(scales[0]),
                            g / np.float32(scales[1])])
        with torch.no_grad():
            pred = net(torch.from_numpy(stacked)[None])[0].numpy()
        f_ref, g_ref = refine_pair(net, scales, f, g)
        assert np.array_equal(f_ref, pred[0] * np.float32(scales[0]))
        assert np.array_equal(g_ref, pred[1] * np.float32(scales[1]))
