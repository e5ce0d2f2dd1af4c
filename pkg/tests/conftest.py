import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)


@pytest.fixture
def rig():
    from avatarcl.synth import build_default_rig

    return build_default_rig()


@pytest.fixture
def rest_pose(rig):
    from avatarcl.rotations import identity_quat
    from avatarcl.skeleton import BodyPose

    rot = identity_quat((rig.bone_count,), dtype=torch.float32)
    return BodyPose(joints=rig.rest_joints.clone(), rotations=rot)


@pytest.fixture
def small_model(rig):
    from avatarcl.field import build_model

    model = build_model(rig, width=16, l_freq=4, triplane_res=16,
                        triplane_feat=4, generator_channels=4, seed=7)
    model.store.register_appearance(0)
    return model


def random_pose(rig, seed=0, amplitude=0.3):
    """Valid random pose via the synthetic world's FK (numpy oracle)."""
    from avatarcl.synth import sample_pose

    rng = np.random.default_rng(seed)
    true, _ = sample_pose(rig, rng, noise_std=0.0)
    return true
