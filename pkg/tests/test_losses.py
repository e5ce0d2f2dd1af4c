import math

import pytest
import torch

from avatarcl.losses import (
    TrainSchedule,
    lambda_p,
    loss_current,
    loss_pose,
    loss_replay,
)
from avatarcl.perceptual import GradientSSIMDistance, NullPerceptual


def test_lambda_p_ramp_start_is_zero():
    assert lambda_p(0, 0, 4000, 600) == pytest.approx(0.0, abs=1e-12)
    assert lambda_p(100, 100, 4000, 600) == pytest.approx(0.0, abs=1e-12)


def test_lambda_p_midpoint_is_one():
    # sin(0) + 1 halfway up the ramp
    t_init, t_max, t_0 = 0, 4000, 600
    mid = t_init + (t_max - t_0 - t_init) / 2
    assert lambda_p(mid, t_init, t_max, t_0) == pytest.approx(1.0, abs=1e-12)


def test_lambda_p_is_one_from_phase_boundary_on():
    for t in (3400, 3401, 3999, 4000):
        assert lambda_p(t, 0, 4000, 600) == 1.0


def test_lambda_p_ramp_reaches_two_then_snaps():
    # the printed schedule is discontinuous: just below the boundary the
    # ramp approaches 2, at the boundary the value is 1
    just_below = lambda_p(3399.999, 0, 4000, 600)
    assert just_below == pytest.approx(2.0, abs=1e-6)
    assert lambda_p(3400, 0, 4000, 600) == 1.0


def test_lambda_p_monotone_on_ramp():
    vals = [lambda_p(t, 0, 4000, 600) for t in range(0, 3400, 17)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert all(0.0 <= v <= 2.0 for v in vals)


def test_lambda_p_rejects_bad_schedule():
    with pytest.raises(ValueError):
        lambda_p(0, 0, 600, 600)
    with pytest.raises(ValueError):
        lambda_p(0, 3500, 4000, 600)


def test_schedule_validation_and_defaults():
    s = TrainSchedule(t_max=4000, t_0=600)
    assert (s.lambda_1, s.lambda_2, s.lambda_beta) == (0.2, 0.2, 800.0)
    assert (s.lr_main, s.lr_rest) == (5e-4, 5e-5)
    assert s.seed == 42
    assert s.phase2_start == 3400
    with pytest.raises(ValueError):
        TrainSchedule(t_max=600, t_0=600)
    with pytest.raises(ValueError):
        TrainSchedule(t_max=4000, t_0=600, t_init=3500)
    with pytest.raises(ValueError):
        TrainSchedule(t_max=4000, t_0=600, lambda_1=-0.1)


def test_loss_current_zero_for_identical():
    img = torch.rand(2, 8, 8, 3, generator=torch.Generator().manual_seed(0))
    assert float(loss_current(img, img.clone(), perceptual=GradientSSIMDistance())) == 0.0
    assert float(loss_current(img, img.clone(), perceptual=NullPerceptual())) == 0.0


def test_loss_current_gray_pixel_hand_case():
    # one pixel 0.5 vs 0.6 across 3 channels: 3 * 0.01
    pred = torch.full((1, 3), 0.5)
    target = torch.full((1, 3), 0.6)
    assert float(loss_current(pred, target, lambda_2=0.0)) == pytest.approx(0.03, rel=1e-6)


def test_loss_current_lambda2_scales_only_perceptual():
    gen = torch.Generator().manual_seed(1)
    pred = torch.rand(1, 8, 8, 3, generator=gen)
    target = torch.rand(1, 8, 8, 3, generator=gen)
    p = GradientSSIMDistance()
    base = float(loss_current(pred, target, lambda_2=0.0, perceptual=p))
    one = float(loss_current(pred, target, lambda_2=1.0, perceptual=p))
    three = float(loss_current(pred, target, lambda_2=3.0, perceptual=p))
    perceptual_value = one - base
    assert perceptual_value > 0
    assert three - base == pytest.approx(3.0 * perceptual_value, rel=1e-5)


def test_loss_current_shape_mismatch():
    with pytest.raises(ValueError):
        loss_current(torch.zeros(2, 3), torch.zeros(3, 3))


def test_loss_replay_matches_loss_current():
    gen = torch.Generator().manual_seed(2)
    pred = torch.rand(1, 8, 8, 3, generator=gen)
    teacher = torch.rand(1, 8, 8, 3, generator=gen)
    p = GradientSSIMDistance()
    a = loss_replay(pred, teacher, lambda_2=0.2, perceptual=p)
    b = loss_current(pred, teacher, lambda_2=0.2, perceptual=p)
    assert torch.equal(a, b)
    assert float(loss_replay(pred, pred.clone(), perceptual=p)) == 0.0


def test_loss_pose_hand_cases():
    a = torch.zeros(2, 4)
    assert float(loss_pose(a, a.clone())) == 0.0
    b = a.clone()
    b[0, 0] = 0.1
    assert float(loss_pose(a, b)) == pytest.approx(0.01, rel=1e-6)
    ga = torch.rand(2, 4, generator=torch.Generator().manual_seed(3))
    gb = torch.rand(2, 4, generator=torch.Generator().manual_seed(4))
    assert float(loss_pose(ga, gb)) == pytest.approx(float(loss_pose(gb, ga)), rel=1e-7)
    with pytest.raises(ValueError):
        loss_pose(torch.zeros(2, 4), torch.zeros(3, 4))


def test_total_loss_decomposes_per_schedule():
    # run a miniature two-task training and recheck that the logged total
    # equals l1*L_CR + lp*L_CL + lb*L_POSE from the independently logged terms
    from avatarcl.synth import build_default_rig, make_task_sequence
    from avatarcl.trainer import (TaskSpec, TrainImage, TrainOptions,
                                  init_state, train_task)
    from avatarcl.render import PatchSpec

    rig = build_default_rig()
    tasks = make_task_sequence(rig, ["green", "yellow"], views_per_task=2,
                               eval_views=1, eval_poses=1, seed=5, image_size=16)
    specs = [TaskSpec(t.appearance_id,
                      [TrainImage(r.image, r.camera, r.pose) for r in t.train])
             for t in tasks]
    sched = TrainSchedule(t_max=6, t_0=2, seed=5)
    opts = TrainOptions(n_samples_train=4, n_samples_eval=4,
                        patch_current=PatchSpec(1, 4, "current"),
                        patch_past=PatchSpec(1, 4, "past"))
    state = init_state(rig, sched, width=8, triplane_res=8, triplane_feat=2,
                       generator_channels=2, l_freq=2, max_frames=16)
    for s in specs:
        train_task(state, s, sched, opts)
    terms = state.last_step_terms
    assert terms["phase"] == 2 and terms["l_pose"] is not None
    recomputed = (terms["lambda_1"] * terms["l_cr"]
                  + terms["lambda_p"] * terms["l_cl"]
                  + terms["lambda_beta"] * terms["l_pose"])
    assert terms["total"] == pytest.approx(recomputed, rel=1e-5)
    assert terms["lambda_p"] == lambda_p(sched.t_max - 1, sched.t_init,
                                         sched.t_max, sched.t_0)
