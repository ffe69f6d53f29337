import numpy as np
import pytest

from growflow.core import (
    Box, Camera, DegenerateRotationError, GaussianSet, GrowflowError,
    Image, TimeAxis, covariance_from, normalize_quaternion, quaternion_to_rotation,
)


def test_normalize_quaternion_examples():
    assert np.allclose(normalize_quaternion([1, 0, 0, 0]), [1, 0, 0, 0])
    assert np.allclose(normalize_quaternion([2, 0, 0, 0]), [1, 0, 0, 0])
    q = normalize_quaternion([1, 1, 1, 1])
    assert np.allclose(q, [0.5, 0.5, 0.5, 0.5])
    assert np.linalg.norm(q) == pytest.approx(1.0)


def test_normalize_quaternion_sign_canonicalization():
    q = normalize_quaternion([-1, 1, 0, 0])
    assert q[0] > 0
    q2 = normalize_quaternion([0.0, -2.0, 1.0, 0.0])
    assert q2[1] > 0  # first nonzero component made non-negative


def test_normalize_quaternion_idempotent():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(20, 4))
    once = normalize_quaternion(q)
    assert np.array_equal(normalize_quaternion(once), once)


def test_normalize_quaternion_degenerate():
    with pytest.raises(DegenerateRotationError):
        normalize_quaternion([0.0, 0.0, 0.0, 1e-13])


def test_quaternion_to_rotation_examples():
    assert np.allclose(quaternion_to_rotation([1, 0, 0, 0]), np.eye(3))
    s = np.sqrt(0.5)
    R = quaternion_to_rotation([s, 0, 0, s])  # 90 degrees about z
    assert np.allclose(R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)
    # double cover
    q = normalize_quaternion([0.3, -0.4, 0.5, 0.6])
    assert np.allclose(quaternion_to_rotation(q), quaternion_to_rotation(-q))


def test_quaternion_to_rotation_rejects_non_unit():
    with pytest.raises(GrowflowError):
        quaternion_to_rotation([1.0, 1.0, 0.0, 0.0])


def test_quaternion_to_rotation_orthonormal_batch():
    rng = np.random.default_rng(1)
    q = normalize_quaternion(rng.normal(size=(50, 4)))
    R = quaternion_to_rotation(q)
    eye = np.einsum("nij,nkj->nik", R, R)
    assert np.abs(eye - np.eye(3)).max() < 1e-12
    assert np.allclose(np.linalg.det(R), 1.0)


def test_covariance_examples():
    assert np.allclose(covariance_from([1, 0, 0, 0], [0, 0, 0]), np.eye(3))
    cov = covariance_from([1, 0, 0, 0], [np.log(2), 0, 0])
    assert np.allclose(cov, np.diag([4.0, 1.0, 1.0]))
    q = normalize_quaternion([0.2, 0.9, -0.1, 0.3])
    a = -0.7
    assert np.allclose(covariance_from(q, [a, a, a]), np.exp(2 * a) * np.eye(3),
                       atol=1e-12)


def test_covariance_symmetry_and_trace():
    rng = np.random.default_rng(2)
    q = normalize_quaternion(rng.normal(size=(30, 4)))
    log_s = rng.normal(scale=0.5, size=(30, 3))
    cov = covariance_from(q, log_s)
    assert np.abs(cov - np.swapaxes(cov, -1, -2)).max() < 1e-12
    traces = np.trace(cov, axis1=-2, axis2=-1)
    assert np.abs(traces - np.exp(2 * log_s).sum(axis=1)).max() < 1e-10
    # eigenvalues match exp(2 log_s)
    ev = np.sort(np.linalg.eigvalsh(cov), axis=1)
    assert np.allclose(ev, np.sort(np.exp(2 * log_s), axis=1), atol=1e-10)


def test_gaussian_set_validation():
    with pytest.raises(GrowflowError):
        GaussianSet(np.zeros((2, 3)), np.zeros((3, 4)), np.zeros((2, 3)),
                    np.zeros(2), np.zeros((2, 3)), np.zeros(2, dtype=bool))
    gs = GaussianSet.empty()
    assert len(gs) == 0


def test_camera_validation():
    with pytest.raises(GrowflowError):
        Camera(np.eye(3) * 1.001, np.zeros(3), 10, 10, 5, 5, 10, 10)
    with pytest.raises(GrowflowError):
        Camera(np.eye(3), np.zeros(3), 10, 10, 5, 5, 0, 10)
    cam = Camera(np.eye(3), np.array([0.0, 0.0, 1.0]), 10, 10, 5, 5, 10, 10)
    assert np.allclose(cam.world_to_cam([[0, 0, 0]]), [[0, 0, 1]])


def test_time_axis_normalization():
    axis = TimeAxis(np.array([0, 2, 4, 6, 7]), 4, np.array([0, 2, 4]))
    norm = axis.normalized
    assert norm[0] == 0.0 and norm[-1] == 1.0
    assert np.all(np.diff(norm) > 0)
    assert np.allclose(axis.supervised_times, [0.0, 4 / 7, 1.0])
    with pytest.raises(GrowflowError):
        TimeAxis(np.array([0, 1, 2]), 1, np.array([0, 1]))  # t_index not last


def test_box_containment():
    outer = Box([0, 0, 0], [2, 2, 2])
    inner = Box([0.5, 0.5, 0.5], [1.5, 1.5, 1.5])
    assert outer.contains_box(inner)
    assert not inner.contains_box(outer)
    assert outer.contains([[1, 1, 1]])[0]
    assert not outer.contains([[3, 1, 1]])[0]


def test_image_validation():
    with pytest.raises(GrowflowError):
        Image(np.full((4, 4, 3), np.nan))
    img = Image(np.zeros((4, 5, 3)))
    assert (img.height, img.width) == (4, 5)
