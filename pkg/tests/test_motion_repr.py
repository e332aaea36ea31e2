import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from portrait_anim import motion_repr as mr
from portrait_anim.errors import InvalidParamsError, InvalidRigError, ShapeMismatchError
from portrait_anim.records import keypoints_from_record, keypoints_to_record

RIG = mr.build_head_rig(0)
finite = st.floats(-1.0, 1.0, allow_nan=False)


def coeffs(expr, pose=None):
    return mr.FaceCoeffs(np.asarray(expr, float), np.zeros(6) if pose is None else np.asarray(pose, float))


def loop_projection(expr, rig):
    """Per-point summation, zero pose."""
    out = np.zeros_like(rig.mean_keypoints)
    for n in range(rig.n_points):
        for a in range(3):
            v = rig.mean_keypoints[n, a]
            for e in range(rig.n_expr):
                v += expr[e] * rig.basis[e, n, a]
            out[n, a] = v
    return out


# --------------------------------------------------------------------------
# head rig
# --------------------------------------------------------------------------

def test_rig_invariants():
    assert RIG.n_points == 68 and RIG.n_expr == 16
    assert np.all(np.abs(RIG.mean_keypoints) <= 1.0)
    assert set(RIG.region_labels) == set(mr.REGIONS)
    assert np.all(np.isfinite(RIG.basis))


def test_rig_rejects_bad_basis():
    basis = RIG.basis.copy()
    basis[0, 0, 0] = np.nan
    with pytest.raises(InvalidRigError):
        mr.HeadRig(RIG.mean_keypoints, basis, RIG.region_labels)
    with pytest.raises(InvalidRigError):
        mr.HeadRig(RIG.mean_keypoints, RIG.basis, ("eyes",) * 68)


def test_projection_identity_case():
    kp = mr.project_head_keypoints(mr.FaceCoeffs.neutral(), RIG)
    assert kp.kind == "head_explicit"
    np.testing.assert_array_equal(kp.points, RIG.mean_keypoints)


def test_projection_pure_translation():
    kp = mr.project_head_keypoints(coeffs(np.zeros(16), [0, 0, 0, 0.1, 0, 0]), RIG)
    np.testing.assert_allclose(kp.points - RIG.mean_keypoints, np.tile([0.1, 0, 0], (68, 1)), atol=1e-15)


def test_projection_unit_expression_matches_loop_oracle():
    e = np.zeros(16)
    e[1] = 1.0
    kp = mr.project_head_keypoints(coeffs(e), RIG)
    np.testing.assert_allclose(kp.points, loop_projection(e, RIG), atol=1e-12)
    np.testing.assert_allclose(kp.points, RIG.mean_keypoints + RIG.basis[1], atol=1e-15)


def test_projection_dimension_mismatch():
    with pytest.raises(InvalidRigError):
        mr.project_head_keypoints(mr.FaceCoeffs(np.zeros(8), np.zeros(6)), RIG)


def test_projection_rotation_about_pivot_matches_matrix_oracle():
    pose = np.array([0.1, -0.2, 0.3, 0.0, 0.0, 0.0])
    cx, sx = math.cos(0.1), math.sin(0.1)
    cy, sy = math.cos(-0.2), math.sin(-0.2)
    cz, sz = math.cos(0.3), math.sin(0.3)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    rot = rz @ ry @ rx   # x applied first, then y, then z
    want = (RIG.mean_keypoints - RIG.pivot) @ rot.T + RIG.pivot
    got = mr.project_head_keypoints(coeffs(np.zeros(16), pose), RIG).points
    np.testing.assert_allclose(got, want, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(arrays(float, 16, elements=st.floats(0, 1)), arrays(float, 16, elements=st.floats(0, 1)),
       st.floats(0, 1))
def test_projection_affine_in_expression(w1, w2, alpha):
    p = lambda w: mr.project_head_keypoints(coeffs(w), RIG).points
    np.testing.assert_allclose(p(alpha * w1 + (1 - alpha) * w2), alpha * p(w1) + (1 - alpha) * p(w2),
                               atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(float, (5, 16), elements=st.floats(0, 1)), arrays(float, (5, 6), elements=st.floats(-0.5, 0.5)))
def test_batch_projection_matches_single(expr, pose):
    batch = mr.project_head_batch(expr, pose, RIG)
    for i in range(5):
        np.testing.assert_allclose(batch[i], mr.project_head_keypoints(coeffs(expr[i], pose[i]), RIG).points,
                                   atol=1e-13)


def test_face_coeffs_validation():
    with pytest.raises(InvalidParamsError):
        mr.FaceCoeffs(np.full(16, 1.5), np.zeros(6)).validate()
    with pytest.raises(InvalidParamsError):
        mr.FaceCoeffs(np.zeros(16), np.array([4.0, 0, 0, 0, 0, 0])).validate()


# --------------------------------------------------------------------------
# head offsets and fusion
# --------------------------------------------------------------------------

def test_offset_zero_and_negation():
    x = mr.project_head_keypoints(mr.FaceCoeffs.neutral(), RIG)
    np.testing.assert_array_equal(mr.apply_head_offset(x, np.zeros((68, 3))).points, x.points)
    np.testing.assert_array_equal(mr.apply_head_offset(x, -x.points).points, np.zeros((68, 3)))


@settings(max_examples=30, deadline=None)
@given(arrays(float, (68, 3), elements=finite), arrays(float, (68, 3), elements=finite))
def test_offset_matches_elementwise_oracle(x, d):
    got = mr.apply_head_offset(mr.KeypointSet(x, "head_explicit"), d).points
    want = np.empty_like(x)
    for i in range(68):
        for a in range(3):
            want[i, a] = x[i, a] + d[i, a]
    np.testing.assert_array_equal(got, want)


def test_offset_errors():
    x = mr.KeypointSet(np.zeros((68, 3)), "head_explicit")
    with pytest.raises(ShapeMismatchError):
        mr.apply_head_offset(x, np.zeros((67, 3)))
    with pytest.raises(InvalidParamsError):
        mr.apply_head_offset(x, np.full((68, 3), np.inf))


def test_fuse_concatenation_and_empty_body():
    head = mr.KeypointSet(np.arange(15.0).reshape(5, 3), "head_explicit")
    body = mr.KeypointSet(-np.arange(9.0).reshape(3, 3), "body_implicit")
    f = mr.fuse_control(head, body)
    assert f.kind == "fused" and len(f) == 8
    np.testing.assert_array_equal(f.points[:5], head.points)
    np.testing.assert_array_equal(f.points[5:], body.points)
    empty = mr.KeypointSet(np.zeros((0, 3)), "body_implicit")
    np.testing.assert_array_equal(mr.fuse_control(head, empty).points, head.points)


def test_fuse_wrong_kinds():
    a = mr.KeypointSet(np.zeros((5, 3)), "head_explicit")
    with pytest.raises(ValueError):
        mr.fuse_control(a, a)


@settings(max_examples=30, deadline=None)
@given(arrays(float, (68, 3), elements=finite), arrays(float, (20, 3), elements=finite))
def test_fuse_split_round_trip(h, b):
    f = mr.fuse_control(mr.KeypointSet(h, "head_explicit"), mr.KeypointSet(b, "body_implicit"))
    h2, b2 = mr.split_fused(f, 68)
    np.testing.assert_array_equal(h2.points, h)
    np.testing.assert_array_equal(b2.points, b)


@settings(max_examples=30, deadline=None)
@given(arrays(float, (68, 3), elements=finite), arrays(float, (68, 3), elements=finite),
       arrays(float, (20, 3), elements=finite))
def test_offset_commutes_with_fusion(x, d, b):
    head = mr.KeypointSet(x, "head_explicit")
    body = mr.KeypointSet(b, "body_implicit")
    left = mr.fuse_control(mr.apply_head_offset(head, d), body).points
    right = mr.fuse_control(head, body).points.copy()
    right[:68] += d
    np.testing.assert_array_equal(left, right)


# --------------------------------------------------------------------------
# body
# --------------------------------------------------------------------------

def body_params(rng, s=None, t=None):
    return mr.BodyMotionParams(rng.uniform(-1, 1, (20, 3)), rng.uniform(-0.2, 0.2, (20, 3)),
                               rng.uniform(0.5, 2) if s is None else s,
                               rng.uniform(-1, 1, 3) if t is None else t)


def test_compose_identity_and_doubling():
    xc = mr.body_template()
    p = mr.BodyMotionParams(xc, np.zeros((20, 3)))
    np.testing.assert_array_equal(mr.compose_body_keypoints(p).points, xc)
    p2 = mr.BodyMotionParams(xc, np.zeros((20, 3)), 2.0)
    np.testing.assert_array_equal(mr.compose_body_keypoints(p2).points, 2 * xc)


def test_compose_matches_per_point_oracle():
    rng = np.random.default_rng(3)
    p = body_params(rng)
    got = mr.compose_body_keypoints(p).points
    for i in range(20):
        want = [p.scale * (p.canonical[i, a] + p.deformation[i, a]) + p.translation[a] for a in range(3)]
        np.testing.assert_allclose(got[i], want, rtol=0, atol=1e-15)


def test_compose_rotation_is_identity_and_scale_checked():
    p = body_params(np.random.default_rng(0))
    np.testing.assert_array_equal(p.rotation, np.eye(3))
    with pytest.raises(InvalidParamsError):
        mr.compose_body_keypoints(mr.BodyMotionParams(p.canonical, p.deformation, 0.0))
    with pytest.raises(InvalidParamsError):
        mr.compose_body_keypoints(mr.BodyMotionParams(p.canonical, p.deformation, -1.0))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), arrays(float, 3, elements=st.floats(-10, 10)))
def test_compose_translation_equivariance(seed, dt):
    p = body_params(np.random.default_rng(seed))
    shifted = mr.BodyMotionParams(p.canonical, p.deformation, p.scale, p.translation + dt)
    a = mr.compose_body_keypoints(shifted).points
    b = mr.compose_body_keypoints(p).points + dt
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_compose_batch_matches_single():
    rng = np.random.default_rng(1)
    xc = mr.body_template()
    delta = rng.normal(0, 0.05, (4, 20, 3))
    s = rng.uniform(0.8, 1.2, 4)
    t = rng.normal(0, 0.1, (4, 3))
    batch = mr.compose_body_batch(xc, delta, s, t)
    for i in range(4):
        single = mr.compose_body_keypoints(mr.BodyMotionParams(xc, delta[i], s[i], t[i])).points
        np.testing.assert_allclose(batch[i], single, atol=1e-15)


# --------------------------------------------------------------------------
# hands
# --------------------------------------------------------------------------

CAM = mr.hand_camera(np.zeros(3), 64, 0.5)


def flat_hand(**kw):
    return mr.HandCoeffs(np.zeros(15), np.zeros(6), **kw)


def test_hand_offscreen_is_empty():
    hand = mr.HandCoeffs(np.zeros(15), np.array([0, 0, 0, 50.0, 50.0, 0]))
    img = mr.render_hand_control(hand, CAM)
    assert img.mask.sum() == 0 and img.pixels.sum() == 0


def test_hand_render_deterministic_and_masked():
    hand = mr.HandCoeffs(np.linspace(-0.5, 1.0, 15), np.array([0.1, 0.2, 0.3, 0.0, 0.05, 0.0]))
    a = mr.render_hand_control(hand, CAM)
    b = mr.render_hand_control(hand, CAM)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    np.testing.assert_array_equal(a.mask, b.mask)
    assert np.all(a.pixels[a.mask == 0] == 0)
    assert np.all(a.pixels[a.mask == 1].max(axis=-1) > 0)


def test_hand_coverage_matches_monte_carlo_oracle():
    hand = flat_hand()
    img = mr.render_hand_control(hand, CAM)
    p0, p1, radii, _ = mr.hand_segments(hand)
    a, b = CAM.project(p0), CAM.project(p1)
    r = radii * CAM.pixel_scale
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 64, (200_000, 2))
    inside = np.zeros(len(pts), bool)
    for s in range(len(r)):
        d = b[s] - a[s]
        h = np.clip(((pts - a[s]) @ d) / (d @ d), 0, 1)
        q = pts - a[s] - h[:, None] * d
        inside |= (q ** 2).sum(1) <= r[s] ** 2
    assert abs(img.mask.mean() - inside.mean()) < 0.02


@settings(max_examples=20, deadline=None)
@given(arrays(float, 15, elements=st.floats(-1.5, 1.5)), arrays(float, 3, elements=st.floats(-1, 1)),
       st.floats(1.0, 2.0))
def test_hand_mask_monotone_in_radius(angles, rot, k):
    hand = mr.HandCoeffs(angles, np.concatenate([rot, [0.0, 0.0, 0.0]]))
    small = mr.render_hand_control(hand, CAM).mask
    big = mr.render_hand_control(hand, CAM, radius_scale=k).mask
    assert np.all(big >= small)


def test_hand_validation():
    with pytest.raises(InvalidParamsError):
        mr.render_hand_control(mr.HandCoeffs(np.full(15, 2.0), np.zeros(6)), CAM)
    with pytest.raises(ValueError):
        mr.HandCoeffs(np.zeros(15), np.zeros(6), handedness="middle")


def test_numba_and_numpy_capsules_agree():
    from portrait_anim import kernels
    rng = np.random.default_rng(5)
    p0 = rng.uniform(0, 64, (16, 2))
    p1 = rng.uniform(0, 64, (16, 2))
    radii = rng.uniform(1, 5, 16)
    colors = rng.uniform(0, 1, (16, 3))
    a = kernels.raster_capsules_nb(p0, p1, radii, colors, 64, 64)
    b = kernels.raster_capsules_np(p0, p1, radii, colors, 64, 64)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_numba_and_numpy_soft_raster_agree():
    from portrait_anim import kernels
    shapes = kernels.ShapeList()
    shapes.ellipse(30, 40, 12, 7, 0.3, [0.9, 0.1, 0.2], 0.8)
    shapes.capsule([5, 5], [50, 60], 3.5, [0.1, 0.9, 0.2])
    shapes.polygon([[10, 10], [40, 12], [35, 44], [12, 30]], [0.2, 0.3, 0.9], 0.6)
    a = kernels.raster_soft(shapes, np.full((64, 64, 3), 0.5), use_numba=True)
    b = kernels.raster_soft(shapes, np.full((64, 64, 3), 0.5), use_numba=False)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_keypoint_record_round_trip():
    kp = mr.project_head_keypoints(mr.FaceCoeffs.neutral(), RIG)
    back = keypoints_from_record(keypoints_to_record(kp))
    assert back.kind == kp.kind
    np.testing.assert_array_equal(back.points, kp.points)
