"""Prior spatial model built from the array geometry and the talker direction.

Azimuth is a compass bearing in the horizontal plane: 0 points along +y and
pi/2 along +x. Elevation is measured up from the horizontal plane.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SingularMatrix
from .numerics import gauss_solve
from .stft import StftConfig


@dataclass(frozen=True)
class ArrayGeometry:
    mic_positions: np.ndarray
    speed_of_sound: float = 343.0

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.mic_positions, dtype=float))
        if pos.shape[1] != 3:
            raise ValueError("mic positions must be 3-D coordinates")
        if pos.shape[0] < 2:
            raise ValueError("need at least two microphones")
        d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
        if np.any(d[np.triu_indices(len(pos), 1)] <= 0):
            raise ValueError("microphone positions must be distinct")
        object.__setattr__(self, "mic_positions", pos)

    @property
    def n_mics(self) -> int:
        return self.mic_positions.shape[0]

    @property
    def centroid(self) -> np.ndarray:
        return self.mic_positions.mean(axis=0)

    @classmethod
    def circular(cls, n_mics=4, radius=0.0325, height=0.0, speed_of_sound=343.0):
        """Uniform circular array in the horizontal plane, first mic on +x."""
        phi = 2 * np.pi * np.arange(n_mics) / n_mics
        pos = np.stack(
            [radius * np.cos(phi), radius * np.sin(phi), np.full(n_mics, height)], axis=1
        )
        return cls(pos, speed_of_sound)


def direction_vector(azimuth: float, elevation: float = 0.0) -> np.ndarray:
    """Unit vector pointing from the array towards the source."""
    ce = np.cos(elevation)
    return np.array([ce * np.sin(azimuth), ce * np.cos(azimuth), np.sin(elevation)])


def propagation_delays(geom: ArrayGeometry, azimuth: float, elevation: float = 0.0):
    """Arrival delay (s) of a plane wave at each mic, relative to the centroid."""
    u = direction_vector(azimuth, elevation)
    return -(geom.mic_positions - geom.centroid) @ u / geom.speed_of_sound


def steering_from_geometry(geom: ArrayGeometry, azimuth: float, elevation: float,
                           cfg: StftConfig) -> np.ndarray:
    """Unit-norm far-field steering vectors, shape ``(n_freq, n_mics)``."""
    tau = propagation_delays(geom, azimuth, elevation)
    f = cfg.bin_frequencies()
    return np.exp(-2j * np.pi * f[:, None] * tau[None, :]) / np.sqrt(geom.n_mics)


def _householder_basis(a):
    """Unitary matrices whose first column is exactly ``a`` (unit vectors, last axis)."""
    m = a.shape[-1]
    a1 = a[:, 0]
    mag = np.abs(a1)
    phase = np.where(mag > 0, a1 / np.where(mag > 0, mag, 1.0), 1.0)
    # H a = alpha e_1 with alpha = -phase keeps v away from cancellation
    alpha = -phase
    v = a.copy()
    v[:, 0] -= alpha
    vn = np.sum(np.abs(v) ** 2, axis=1)
    eye = np.eye(m, dtype=complex)
    h = eye - 2.0 * v[:, :, None] * np.conj(v[:, None, :]) / vn[:, None, None]
    # H e_1 = a / alpha; rescale the first column back to a
    h[:, :, 0] *= alpha[:, None]
    return h


@dataclass(frozen=True)
class PriorSpatialModel:
    target_index: int
    a_hat_t: np.ndarray  # (I, M)
    A_hat: np.ndarray = field(repr=False)  # (I, M, M), columns are prior steering vectors
    W_hat: np.ndarray = field(repr=False)  # (I, M, M), rows are conj demixing filters

    @property
    def n_freq(self) -> int:
        return self.a_hat_t.shape[0]


def build_prior(a_t, n_t: int) -> PriorSpatialModel:
    """Complete the target steering vectors to regular prior mixing matrices.

    Column ``n_t`` of each ``A_hat[i]`` is ``a_t[i]``; the other columns are an
    orthonormal basis of its orthogonal complement taken from a Householder
    reflector, in order. ``W_hat = A_hat^{-1}`` (equal to ``A_hat^H``).
    """
    a_t = np.atleast_2d(np.asarray(a_t, dtype=complex))
    n_freq, m = a_t.shape
    if not 0 <= n_t < m:
        raise IndexError(f"target index {n_t} out of range for {m} mics")
    norms = np.linalg.norm(a_t, axis=1)
    if not np.allclose(norms, 1.0, atol=1e-10):
        raise ValueError("prior steering vectors must have unit norm")
    q = _householder_basis(a_t / norms[:, None])
    order = list(range(1, m))
    order.insert(n_t, 0)
    A_hat = q[:, :, order]
    W_hat = np.conj(np.swapaxes(A_hat, 1, 2))
    _, ok = gauss_solve(A_hat, np.eye(m))
    if not np.all(ok):
        raise SingularMatrix("prior mixing matrix is singular")
    return PriorSpatialModel(n_t, A_hat[:, :, n_t].copy(), A_hat, W_hat)


def prior_from_geometry(geom: ArrayGeometry, azimuth: float, elevation: float,
                        cfg: StftConfig, n_t: int = 0) -> PriorSpatialModel:
    return build_prior(steering_from_geometry(geom, azimuth, elevation, cfg), n_t)
