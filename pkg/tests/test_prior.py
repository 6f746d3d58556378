import numpy as np
import pytest

from conftest import crandn
from rtbse.prior import (ArrayGeometry, build_prior, direction_vector, prior_from_geometry,
                         propagation_delays, steering_from_geometry)
from rtbse.stft import StftConfig

CFG = StftConfig()


def test_geometry_validation():
    with pytest.raises(ValueError):
        ArrayGeometry([[0, 0, 0]])
    with pytest.raises(ValueError):
        ArrayGeometry([[0, 0, 0], [0, 0, 0]])
    with pytest.raises(ValueError):
        ArrayGeometry([[0, 0], [1, 0]])
    g = ArrayGeometry.circular(4, 0.0325)
    assert g.n_mics == 4
    np.testing.assert_allclose(g.centroid, 0, atol=1e-15)
    np.testing.assert_allclose(np.linalg.norm(g.mic_positions, axis=1), 0.0325)


def test_direction_convention():
    np.testing.assert_allclose(direction_vector(0.0), [0, 1, 0], atol=1e-15)
    np.testing.assert_allclose(direction_vector(np.pi / 2), [1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(direction_vector(0.3, np.pi / 2), [0, 0, 1], atol=1e-15)


def test_dc_bin_is_uniform():
    a = steering_from_geometry(ArrayGeometry.circular(), 0.7, 0.1, CFG)
    np.testing.assert_allclose(a[0], np.full(4, 0.5), atol=1e-15)
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1, atol=1e-12)


def test_coincident_with_centroid():
    # mics on a line through the centroid, source broadside: all delays vanish
    g = ArrayGeometry([[-0.05, 0, 0], [0.05, 0, 0], [0, 0, 0]])
    a = steering_from_geometry(g, 0.0, 0.0, CFG)
    np.testing.assert_allclose(a, 1 / np.sqrt(3), atol=1e-12)


def test_two_mic_phase_difference():
    d, c = 0.08, 343.0
    g = ArrayGeometry([[0, 0, 0], [d, 0, 0]], c)
    for theta in (0.0, 0.4, -1.1, np.pi / 2):
        a = steering_from_geometry(g, theta, 0.0, CFG)
        f = CFG.bin_frequencies()
        # the mic further along +x is reached earlier when the source lies towards +x
        phase = np.angle(a[:, 1] * np.conj(a[:, 0]))
        expect = np.angle(np.exp(2j * np.pi * f * d * np.sin(theta) / c))
        np.testing.assert_allclose(np.angle(np.exp(1j * (phase - expect))), 0, atol=1e-9)


def test_delays_numeric_oracle(rng):
    g = ArrayGeometry(rng.uniform(-0.1, 0.1, (5, 3)))
    az, el = 0.9, -0.3
    src = 1e5 * direction_vector(az, el)  # far away point source
    dist = np.linalg.norm(g.mic_positions - src, axis=1) - np.linalg.norm(g.centroid - src)
    np.testing.assert_allclose(propagation_delays(g, az, el), dist / g.speed_of_sound, atol=1e-9)


def test_build_prior_unit_target():
    a = np.zeros((1, 4), complex)
    a[0, 0] = 1
    p = build_prior(a, 0)
    A = p.A_hat[0]
    np.testing.assert_allclose(A.conj().T @ A, np.eye(4), atol=1e-12)
    np.testing.assert_allclose(A[:, 0], a[0], atol=1e-15)
    np.testing.assert_allclose(p.W_hat[0], A.conj().T, atol=1e-15)


def test_build_prior_invariants(rng):
    for n_t in range(4):
        a = crandn(rng, 20, 4)
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        p = build_prior(a, n_t)
        np.testing.assert_allclose(p.a_hat_t, a, atol=1e-14)
        np.testing.assert_allclose(p.A_hat[:, :, n_t], a, atol=1e-14)
        gram = np.conj(np.swapaxes(p.A_hat, 1, 2)) @ p.A_hat
        np.testing.assert_allclose(gram, np.broadcast_to(np.eye(4), gram.shape), atol=1e-10)
        np.testing.assert_allclose(p.W_hat @ p.A_hat, np.broadcast_to(np.eye(4), gram.shape), atol=1e-9)


def test_build_prior_deterministic_and_checked(rng):
    a = steering_from_geometry(ArrayGeometry.circular(), 1.0, 0.0, CFG)
    p1, p2 = build_prior(a, 1), build_prior(a, 1)
    assert np.array_equal(p1.A_hat, p2.A_hat) and np.array_equal(p1.W_hat, p2.W_hat)
    with pytest.raises(ValueError):
        build_prior(2 * a, 0)
    with pytest.raises(IndexError):
        build_prior(a, 4)


def test_prior_from_geometry():
    p = prior_from_geometry(ArrayGeometry.circular(), 0.5, 0.0, CFG, 2)
    assert p.target_index == 2 and p.n_freq == 513
