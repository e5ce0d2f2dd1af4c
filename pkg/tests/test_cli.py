"""End-to-end command line flows on a miniature run.

One module-scoped workspace generates a tiny two-task dataset and
trains the sequence once; the individual tests then exercise resume
guards, rendering, evaluation, and the output-root indirection against
that shared state.
"""

import json
import os
from types import SimpleNamespace

import pytest
import torch

from avatarcl import cli
from avatarcl.skeleton import load_rig
from avatarcl.trainer import UnknownTaskError

torch.set_num_threads(1)


def _tiny_cfg(out_dir: str) -> dict:
    return {
        "out_dir": out_dir,
        "seed": 9,
        "preset": "desk",
        "synth": {"palettes": ["green", "yellow"], "views_per_task": 2,
                  "eval_views": 1, "eval_poses": 1, "image_size": 16},
        "schedule": {"t_max": 8, "t_0": 3},
        "options": {"n_samples_train": 2, "n_samples_eval": 4,
                    "patch_current": [1, 4], "patch_past": [1, 4]},
        "arch": {"width": 8, "triplane_res": 8, "triplane_feat": 2,
                 "generator_channels": 2, "l_freq": 2, "max_frames": 16},
    }


def _write_cfg(path, cfg: dict) -> str:
    with open(path, "w") as f:
        json.dump(cfg, f)
    return str(path)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_ws")
    run = root / "run"
    cfg = _tiny_cfg(str(run))
    cfg_path = _write_cfg(root / "run.json", cfg)
    assert cli.main(["generate", "--config", cfg_path]) == 0
    assert cli.main(["train", "--config", cfg_path]) == 0
    return SimpleNamespace(root=root, run=run, cfg=cfg, cfg_path=cfg_path,
                           dataset=run / "dataset",
                           ckpt=run / "checkpoints" / "task_02.zip")


def test_generate_writes_dataset_layout(ws):
    ds = ws.dataset
    assert (ds / "dataset.json").is_file()
    assert (ds / "rig.json").is_file()
    for task in ("task_01", "task_02"):
        man = json.loads((ds / task / "manifest.json").read_text())
        splits = [r["split"] for r in man["records"]]
        assert splits.count("train") == 2
        assert splits.count("eval_novel_view") == 1
        assert splits.count("eval_novel_pose") == 1
        for r in man["records"]:
            assert (ds / task / r["image"]).is_file()
    meta = json.loads((ds / "dataset.json").read_text())
    assert meta["generation"]["palettes"] == ["green", "yellow"]
    load_rig(ds / "rig.json")   # parses back


def test_regenerate_is_byte_identical(ws, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli.main(["generate", "--config", ws.cfg_path,
                         "--out", str(out)]) == 0
    for rel_root, _, files in os.walk(a):
        for name in files:
            if name.startswith("."):    # lockfile
                continue
            pa = os.path.join(rel_root, name)
            pb = pa.replace(str(a), str(b), 1)
            assert open(pa, "rb").read() == open(pb, "rb").read(), pa


def test_train_writes_checkpoints_and_logs(ws):
    ck = ws.run / "checkpoints"
    assert sorted(p.name for p in ck.iterdir() if p.suffix == ".zip") == \
        ["task_01.zip", "task_02.zip"]
    logs = ws.run / "logs"
    for name in ("task_01.csv", "task_02.csv"):
        text = (logs / name).read_text()
        assert text.splitlines()[0] == "iteration,L_CR,L_CL,L_POSE,lambda_p,phase"
        assert len(text.splitlines()) == 1 + ws.cfg["schedule"]["t_max"]


def test_train_refuses_to_overwrite_without_resume(ws):
    with pytest.raises(SystemExit, match="--resume"):
        cli.main(["train", "--config", ws.cfg_path])


def test_train_resume_after_all_tasks_is_a_noop(ws):
    before = ws.ckpt.read_bytes()
    assert cli.main(["train", "--config", ws.cfg_path, "--resume"]) == 0
    assert ws.ckpt.read_bytes() == before


def test_render_single_and_orbit(ws, tmp_path):
    png = tmp_path / "view.png"
    assert cli.main(["render", "--checkpoint", str(ws.ckpt), "--task", "1",
                     "--out", str(png), "--image-size", "16",
                     "--samples", "4"]) == 0
    assert png.stat().st_size > 0
    orbit = tmp_path / "orbit"
    assert cli.main(["render", "--checkpoint", str(ws.ckpt), "--task", "2",
                     "--out", str(orbit), "--orbit", "2",
                     "--image-size", "16", "--samples", "4"]) == 0
    assert sorted(p.name for p in orbit.iterdir()) == \
        ["frame_000.png", "frame_001.png"]


def test_render_unknown_task_exits_cleanly(ws, tmp_path, capsys):
    code = cli.main(["render", "--checkpoint", str(ws.ckpt), "--task", "99",
                     "--out", str(tmp_path / "x.png"), "--image-size", "16",
                     "--samples", "4"])
    assert code == 2
    assert "error:" in capsys.readouterr().err


def test_render_accepts_pose_file(ws, tmp_path):
    rig = load_rig(ws.dataset / "rig.json")
    pose = cli._rest_pose(rig)
    pose_path = tmp_path / "pose.json"
    pose_path.write_text(json.dumps(pose.to_json_dict()))
    png = tmp_path / "posed.png"
    assert cli.main(["render", "--checkpoint", str(ws.ckpt), "--task", "1",
                     "--out", str(png), "--pose-file", str(pose_path),
                     "--image-size", "16", "--samples", "4"]) == 0
    assert png.stat().st_size > 0


def test_eval_writes_report_and_respects_assertions(ws, tmp_path):
    out = tmp_path / "rep"
    assert cli.main(["eval", "--checkpoint", str(ws.ckpt),
                     "--dataset", str(ws.dataset), "--out", str(out),
                     "--samples", "4", "--perceptual", "none"]) == 0
    payload = json.loads((out / "report.json").read_text())
    assert payload["assertions"] == []
    assert {r["task_index"] for r in payload["rows"]} == {1, 2}
    assert "task" in (out / "report.txt").read_text()

    strict = tmp_path / "strict"
    assert cli.main(["eval", "--checkpoint", str(ws.ckpt),
                     "--dataset", str(ws.dataset), "--out", str(strict),
                     "--samples", "4", "--perceptual", "none",
                     "--min-past-psnr", "99"]) == 1
    entry = json.loads((strict / "report.json").read_text())["assertions"][0]
    assert entry["name"] == "min_past_psnr"
    assert entry["passed"] is False


def test_eval_report_is_bit_stable(ws, tmp_path):
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert cli.main(["eval", "--checkpoint", str(ws.ckpt),
                         "--dataset", str(ws.dataset), "--out", str(out),
                         "--samples", "4", "--perceptual", "none"]) == 0
        outs.append((out / "report.json").read_bytes())
    assert outs[0] == outs[1]


def test_out_root_env_redirects_relative_paths(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ROOT_VAR, str(tmp_path))
    cfg = _tiny_cfg("envrun")
    cfg_path = _write_cfg(tmp_path / "env.json", cfg)
    assert cli.main(["generate", "--config", cfg_path, "--out", "envds"]) == 0
    assert (tmp_path / "envds" / "dataset.json").is_file()
    # absolute paths are left alone
    abs_out = tmp_path / "absds"
    assert cli.main(["generate", "--config", cfg_path,
                     "--out", str(abs_out)]) == 0
    assert (abs_out / "dataset.json").is_file()


def test_generate_needs_synth_block(tmp_path, capsys):
    cfg = {"out_dir": str(tmp_path / "r"), "dataset": str(tmp_path / "none")}
    cfg_path = _write_cfg(tmp_path / "dsonly.json", cfg)
    assert cli.main(["generate", "--config", cfg_path]) == 2
    assert "synth" in capsys.readouterr().err


def test_eval_routes_writes_through_directory_lock(ws, tmp_path, monkeypatch):
    seen = []
    real = cli._lock

    def spy(out_dir):
        seen.append(out_dir)
        return real(out_dir)

    monkeypatch.setattr(cli, "_lock", spy)
    out = tmp_path / "locked"
    assert cli.main(["eval", "--checkpoint", str(ws.ckpt),
                     "--dataset", str(ws.dataset), "--out", str(out),
                     "--samples", "4", "--perceptual", "none"]) == 0
    assert seen == [str(out)]
