import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viewdrift.errors import DegenerateGeometryError, InvalidInputError, NotVisibleError
from viewdrift.scene import (
    Box3,
    CameraModel,
    FrameState,
    Pose2,
    ScenarioSequence,
    VehicleSpec,
    clean_detection,
    face_visibility,
    projected_area,
    viewing_angle,
    viewing_angle_variation,
    wrap_angle,
)

ORIGIN = Pose2(0.0, 0.0, 0.0)
SEDAN = VehicleSpec.of("SEDAN")
coord = st.floats(-50, 50, allow_nan=False)
angle = st.floats(-math.pi, math.pi, allow_nan=False)


def _seq(targets, egos=None, dt=0.5):
    egos = egos or [ORIGIN] * len(targets)
    frames = [FrameState(i * dt, e, 0.0, t, 0.0) for i, (e, t) in enumerate(zip(egos, targets))]
    return ScenarioSequence(tuple(frames), SEDAN)


def test_wrap_angle_range():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    assert Pose2(0, 0, 7.0).yaw == pytest.approx(7.0 - 2 * math.pi)


def test_viewing_angle_parallel_and_orthogonal():
    assert viewing_angle(ORIGIN, Pose2(10, 0, 0)) == 0.0
    assert viewing_angle(ORIGIN, Pose2(10, 0, math.pi / 2)) == pytest.approx(math.pi / 2)


def test_viewing_angle_hand_oracle():
    # 0.4 - atan2(3, 8), evaluated separately
    assert viewing_angle(ORIGIN, Pose2(8, 3, 0.4)) == pytest.approx(0.0412293297294278, abs=1e-12)


def test_viewing_angle_coincident_positions():
    with pytest.raises(DegenerateGeometryError):
        viewing_angle(Pose2(1, 1, 0), Pose2(1, 1, 2))


@settings(max_examples=1000, deadline=None)
@given(coord, coord, angle, coord, coord, angle, angle, coord, coord)
def test_viewing_angle_rigid_invariance(ex, ey, eyaw, tx, ty, tyaw, rot, dx, dy):
    if math.hypot(tx - ex, ty - ey) < 1e-3:
        return
    frame = Pose2(dx, dy, rot)
    a = viewing_angle(Pose2(ex, ey, eyaw), Pose2(tx, ty, tyaw))
    b = viewing_angle(frame.compose(Pose2(ex, ey, eyaw)), frame.compose(Pose2(tx, ty, tyaw)))
    assert abs(wrap_angle(a - b)) < 1e-9


def test_variation_zero_for_constant_relative_pose():
    egos = [Pose2(5 * i, 0, 0) for i in range(3)]
    targets = [Pose2(12 + 5 * i, -3, 0) for i in range(3)]
    assert viewing_angle_variation(_seq(targets, egos)) == pytest.approx(0.0, abs=1e-12)


def test_variation_definition():
    # camera sits 1.5 m ahead of the ego origin; place targets on rays from the camera
    cam_x = CameraModel().mount.x
    t1 = Pose2(cam_x + 10, 0, 0.1)
    t3 = Pose2(cam_x + 10, 0, 0.5)
    assert viewing_angle_variation(_seq([t1, Pose2(cam_x + 10, 0, 0.3), t3])) == pytest.approx(0.4)


def test_variation_monotone_along_straight_pass():
    target = Pose2(30, -3, 0)
    egos = [Pose2(x, 0, 0) for x in np.linspace(0, 20, 9)]
    values = [viewing_angle_variation(_seq([target] * (i + 1), egos[: i + 1])) for i in range(1, 9)]
    assert values[0] > 0
    assert np.all(np.diff(values) > 0)


def test_visibility_directly_behind():
    w = face_visibility(ORIGIN, Pose2(20, 0, 0), SEDAN)
    assert w[1] == pytest.approx(1.0)
    assert w[0] == 0.0


def test_visibility_diagonal_corner():
    far = 1e5
    # camera far out along the left-rear diagonal of a target facing +x
    ego = Pose2(-far, far, 0)
    w = face_visibility(ego, Pose2(0, 0, 0), SEDAN)
    assert w[1] == pytest.approx(math.cos(math.pi / 4), abs=1e-4)
    assert w[2] == pytest.approx(math.cos(math.pi / 4), abs=1e-4)
    assert w[0] == 0.0 and w[3] == 0.0


@settings(max_examples=300, deadline=None)
@given(coord, coord, angle, coord, coord, angle)
def test_visibility_bounds(ex, ey, eyaw, tx, ty, tyaw):
    if math.hypot(tx - ex, ty - ey) < 4.0:  # keep the observer outside the body
        return
    w = face_visibility(Pose2(ex, ey, eyaw), Pose2(tx, ty, tyaw), SEDAN)
    assert np.all((w >= 0) & (w <= 1))
    assert np.count_nonzero(w) <= 2
    assert w.sum() <= 2.0


def _cube_at(depth, cam=CameraModel()):
    # near face at the given depth in front of the camera, centered on the optical axis
    return Box3((cam.mount.x + depth + 0.5, 0.0, cam.mount_height), (1.0, 1.0, 1.0), 0.0)


def test_projected_area_pinhole_oracle():
    cam = CameraModel()
    for d in (5.0, 10.0, 25.0):
        assert projected_area(cam, _cube_at(d), ORIGIN) == pytest.approx((cam.focal / d) ** 2, rel=1e-2)


def test_projected_area_inverse_square():
    cam = CameraModel()
    ratio = projected_area(cam, _cube_at(9.5), ORIGIN) / projected_area(cam, _cube_at(19.5), ORIGIN)
    assert ratio == pytest.approx(4.0, rel=0.1)


def test_projected_area_decreasing_with_distance():
    cam = CameraModel()
    areas = [projected_area(cam, _cube_at(d), ORIGIN) for d in np.linspace(3, 60, 40)]
    assert np.all(np.diff(areas) < 0)


def test_projected_area_behind_camera():
    with pytest.raises(NotVisibleError):
        projected_area(CameraModel(), Box3.on_ground(Pose2(-10, 0, 0), SEDAN.dims), ORIGIN)


def test_clean_detection_passthrough():
    frame = FrameState(0.0, ORIGIN, 10.0, Pose2(12, 3, 0), 8.0)
    box = clean_detection(frame, SEDAN)
    assert box.center == (12.0, 3.0, SEDAN.height / 2)
    assert box.dims == SEDAN.dims
    assert box.confidence == 1.0
    assert clean_detection(FrameState(0.0, ORIGIN, 0, Pose2(12, 3, 2 * math.pi + 0.3), 0), SEDAN).yaw \
        == pytest.approx(0.3)


def test_vehicle_catalogue_enforced():
    assert VehicleSpec.of("van").dims == (5.0, 2.0, 2.2)
    with pytest.raises(InvalidInputError):
        VehicleSpec(4.0, 1.8, 1.4, "SEDAN")
    with pytest.raises(InvalidInputError):
        VehicleSpec.of("TRUCK")


def test_sequence_validation():
    f = lambda t: FrameState(t, ORIGIN, 0, Pose2(10, 0, 0), 0)
    with pytest.raises(InvalidInputError):
        ScenarioSequence((f(0.0), f(0.5), f(1.5)), SEDAN)
    with pytest.raises(InvalidInputError):
        ScenarioSequence((f(0.0), f(0.5)), SEDAN, category="SEDAN-X-S")
    with pytest.raises(InvalidInputError):
        FrameState(0.0, ORIGIN, -1.0, Pose2(10, 0, 0), 0)
