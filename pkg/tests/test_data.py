"""Dataset round trips: PNG + manifest layout, digests, tampering."""

import json
import os

import numpy as np
import pytest
import torch

from avatarcl.data import (
    DatasetError,
    load_dataset,
    load_image,
    save_dataset,
    save_image,
)
from avatarcl.synth import build_default_rig, make_task_sequence

QUANT = 0.5 / 255.0 + 1e-6  # 8-bit rounding bound


@pytest.fixture(scope="module")
def tiny_tasks():
    rig = build_default_rig()
    tasks = make_task_sequence(rig, ["green", "purple"], views_per_task=2,
                               eval_views=1, eval_poses=1, seed=11, image_size=16)
    return rig, tasks


def test_save_image_roundtrip_within_quantization(tmp_path):
    img = np.random.default_rng(0).random((12, 10, 3))
    p = tmp_path / "img.png"
    save_image(p, img)
    back = load_image(p)
    assert back.shape == img.shape and back.dtype == np.float32
    assert np.abs(back - img).max() <= QUANT
    with pytest.raises(ValueError):
        save_image(tmp_path / "bad.png", np.zeros((4, 4)))


def test_dataset_roundtrip(tmp_path, tiny_tasks):
    rig, tasks = tiny_tasks
    root = tmp_path / "ds"
    save_dataset(root, rig, tasks, meta={"seed": 11, "views_per_task": 2})
    rig2, back = load_dataset(root)
    assert torch.allclose(rig2.bone_radii, rig.bone_radii)
    assert len(back) == len(tasks)
    for orig, got in zip(tasks, back):
        assert got.appearance_id == orig.appearance_id
        assert got.palette_name == orig.palette_name
        assert got.spec is None  # appearance is baked into the images
        assert len(got.train) == len(orig.train)
        assert len(got.eval_novel_view) == len(orig.eval_novel_view)
        assert len(got.eval_novel_pose) == len(orig.eval_novel_pose)
        for ro, rg in zip(orig.train, got.train):
            assert np.abs(rg.image - ro.image).max() <= QUANT
            assert torch.equal(rg.camera.rotation, ro.camera.rotation)
            assert torch.equal(rg.camera.translation, ro.camera.translation)
            assert torch.equal(rg.pose.rotations, ro.pose.rotations)
            assert rg.frame_tag == ro.frame_tag
            assert rg.pose.frame_tag == ro.pose.frame_tag
    top = json.loads((root / "dataset.json").read_text())
    assert top["generation"] == {"seed": 11, "views_per_task": 2}


def test_tampered_image_is_rejected(tmp_path, tiny_tasks):
    rig, tasks = tiny_tasks
    root = tmp_path / "ds"
    save_dataset(root, rig, tasks)
    victim = root / "task_01" / "images" / "train_000.png"
    save_image(victim, np.zeros((16, 16, 3)))
    with pytest.raises(DatasetError, match="digest"):
        load_dataset(root)


def test_missing_or_wrong_schema_rejected(tmp_path, tiny_tasks):
    with pytest.raises(DatasetError, match="dataset.json"):
        load_dataset(tmp_path / "nowhere")
    rig, tasks = tiny_tasks
    root = tmp_path / "ds"
    save_dataset(root, rig, tasks)
    top = json.loads((root / "dataset.json").read_text())
    top["schema_version"] = 99
    (root / "dataset.json").write_text(json.dumps(top))
    with pytest.raises(DatasetError, match="schema"):
        load_dataset(root)


def test_unknown_split_rejected(tmp_path, tiny_tasks):
    rig, tasks = tiny_tasks
    root = tmp_path / "ds"
    save_dataset(root, rig, tasks)
    mpath = root / "task_01" / "manifest.json"
    manifest = json.loads(mpath.read_text())
    manifest["records"][0]["split"] = "bogus"
    mpath.write_text(json.dumps(manifest))
    with pytest.raises(DatasetError, match="split"):
        load_dataset(root)


def test_saves_are_deterministic(tmp_path, tiny_tasks):
    rig, tasks = tiny_tasks
    a, b = tmp_path / "a", tmp_path / "b"
    save_dataset(a, rig, tasks, meta={"seed": 11})
    save_dataset(b, rig, tasks, meta={"seed": 11})
    for name in ("dataset.json", "rig.json",
                 os.path.join("task_01", "manifest.json"),
                 os.path.join("task_01", "images", "train_000.png")):
        assert (a / name).read_bytes() == (b / name).read_bytes()
