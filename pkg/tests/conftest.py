import numpy as np
import pytest

from adaptivesl.rig import LedModel, Pose, RigGeometry, desk_rig, look_at


@pytest.fixture
def led():
    return LedModel()


@pytest.fixture
def geom():
    """Small desk rig: 2x2 LEDs, 64x64 mask, 8x8 camera."""
    return desk_rig(cam_res=8, mask_res=64)


@pytest.fixture
def geom16():
    return desk_rig(cam_res=16, mask_res=128)


def tiny_rig(cam_res=4, mask_res=8):
    """Criterion-1 scale rig: 2x2 LEDs, 8x8 mask, 4x4 camera."""
    vc = np.array([0.0, 0.0, 0.15])
    eye = np.array([0.0, 0.24, 0.0])
    f = (cam_res / 2) * np.linalg.norm(vc - eye) / (0.075 * np.sqrt(3) * 1.15)
    return RigGeometry(
        led_rows=2, led_cols=2, led_pitch=0.1,
        led_plane_pose=Pose(np.eye(3), [0, 0, -0.15]),
        mask_res_w=mask_res, mask_res_h=mask_res,
        mask_phys_w=0.16, mask_phys_h=0.16,
        mask_plane_pose=Pose.identity(),
        fx=f, fy=f, cx=cam_res / 2, cy=cam_res / 2,
        cam_res_w=cam_res, cam_res_h=cam_res,
        cam_pose=look_at(eye, vc),
        volume_center=vc, volume_edge=0.15,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
