"""On-disk dataset layout: PNG images plus JSON manifests.

Layout written by `save_dataset`:

    root/
      dataset.json            top-level manifest (rig, task list, sizes)
      rig.json
      task_01/
        manifest.json         records with camera, pose, split, image path
        images/train_000.png  ...

Images are 8-bit PNG; loading returns float arrays in [0, 1].
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np
from PIL import Image

from .render import CameraParams
from .skeleton import BodyPose, SkeletonRig, load_rig, save_rig
from .synth import SynthRecord, SynthTaskData

SCHEMA_VERSION = 1


class DatasetError(RuntimeError):
    pass


def save_image(path, img: np.ndarray):
    """Write a float image in [0, 1] as 8-bit PNG."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3), got {img.shape}")
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def load_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _record_to_dict(rec: SynthRecord, rel_image: str, digest: str) -> dict:
    return {
        "split": rec.split,
        "image": rel_image,
        "sha256": digest,
        "camera": rec.camera.to_json_dict(),
        "pose": rec.pose.to_json_dict(),
        "frame_tag": rec.frame_tag,
    }


def _record_from_dict(d: dict, task_dir) -> SynthRecord:
    path = os.path.join(task_dir, d["image"])
    digest = _sha256_file(path)
    if digest != d["sha256"]:
        raise DatasetError(f"image digest mismatch for {path}")
    return SynthRecord(
        image=load_image(path),
        camera=CameraParams.from_json_dict(d["camera"]),
        pose=BodyPose.from_json_dict(d["pose"]),
        split=d["split"],
        frame_tag=d["frame_tag"],
    )


def save_dataset(root, rig: SkeletonRig, tasks: list, meta: dict = None) -> None:
    """Write a task sequence (list of SynthTaskData) under root.

    `meta` (generation settings: seed, views per task, ...) is stored
    verbatim in dataset.json for provenance.
    """
    os.makedirs(root, exist_ok=True)
    save_rig(rig, os.path.join(root, "rig.json"))
    index = []
    for n, task in enumerate(tasks, start=1):
        task_dir = os.path.join(root, f"task_{n:02d}")
        img_dir = os.path.join(task_dir, "images")
        os.makedirs(img_dir, exist_ok=True)
        records = []
        counters: dict = {}
        for rec in task.train + task.eval_novel_view + task.eval_novel_pose:
            i = counters.get(rec.split, 0)
            counters[rec.split] = i + 1
            rel = os.path.join("images", f"{rec.split}_{i:03d}.png")
            full = os.path.join(task_dir, rel)
            save_image(full, rec.image)
            records.append(_record_to_dict(rec, rel, _sha256_file(full)))
        manifest = {
            "appearance_id": task.appearance_id,
            "palette_name": task.palette_name,
            "records": records,
        }
        with open(os.path.join(task_dir, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
        index.append({"dir": f"task_{n:02d}", "appearance_id": task.appearance_id,
                      "palette_name": task.palette_name})
    top = {"schema_version": SCHEMA_VERSION, "rig": "rig.json", "tasks": index,
           "generation": meta or {}}
    with open(os.path.join(root, "dataset.json"), "w") as f:
        json.dump(top, f, indent=1, sort_keys=True)


def load_dataset(root):
    """Read a dataset written by save_dataset.

    Returns (rig, tasks) where tasks is a list of SynthTaskData whose
    spec field is None (palettes are baked into the stored images).
    """
    top_path = os.path.join(root, "dataset.json")
    if not os.path.exists(top_path):
        raise DatasetError(f"no dataset.json under {root}")
    with open(top_path) as f:
        top = json.load(f)
    if top.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"unsupported dataset schema {top.get('schema_version')}")
    rig = load_rig(os.path.join(root, top["rig"]))
    tasks = []
    for entry in top["tasks"]:
        task_dir = os.path.join(root, entry["dir"])
        with open(os.path.join(task_dir, "manifest.json")) as f:
            manifest = json.load(f)
        by_split: dict = {"train": [], "eval_novel_view": [], "eval_novel_pose": []}
        for d in manifest["records"]:
            if d["split"] not in by_split:
                raise DatasetError(f"unknown split {d['split']!r}")
            by_split[d["split"]].append(_record_from_dict(d, task_dir))
        tasks.append(SynthTaskData(
            appearance_id=int(manifest["appearance_id"]),
            palette_name=manifest["palette_name"],
            spec=None,
            train=by_split["train"],
            eval_novel_view=by_split["eval_novel_view"],
            eval_novel_pose=by_split["eval_novel_pose"],
        ))
    return rig, tasks
