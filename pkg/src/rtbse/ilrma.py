"""Independent low-rank matrix analysis with optional spatial regularization.

Three flavours share the NMF source model and differ in the demixing update:

* ``naive``: plain ILRMA, rows updated by iterative projection (IP);
* ``sr``:    regularizer ``mu |w^H a_t - delta|^2`` towards the prior target
             steering vector, rows updated by vectorwise coordinate descent;
* ``nsr``:   null-only regularizer ``mu (1 - delta) |w^H a_t|^2``, still IP.

Array conventions
-----------------
x : (I, J, M) observed STFT
W : (I, N, M) demixing matrices; ``W[i, n]`` is the row ``w_in^H``
y : (I, J, N) separated signals
T : (N, I, K) NMF bases, V : (N, K, J) NMF activations (source-major so the
    per-source products are contiguous batched matmuls)
r : (N, I, J) model variances
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import NonFiniteIntermediate, ShapeMismatch, SingularMatrix
from .numerics import TOL, gauss_solve, invert_small
from .prior import PriorSpatialModel

logger = logging.getLogger(__name__)

EPS_NMF = 1e-12
VARIANTS = ("naive", "sr", "nsr")


@dataclass
class NmfModel:
    T: np.ndarray
    V: np.ndarray

    @property
    def n_basis(self) -> int:
        return self.T.shape[2]

    def variance(self) -> np.ndarray:
        """Model variance ``r[n, i, j] = sum_k T[n, i, k] V[n, k, j]``."""
        return self.T @ self.V

    @classmethod
    def random(cls, n_freq, n_frames, n_src, n_basis, rng=None):
        """Uniform random init in (0, 1]."""
        rng = np.random.default_rng(rng)
        T = 1.0 - rng.random((n_src, n_freq, n_basis))
        V = 1.0 - rng.random((n_src, n_basis, n_frames))
        return cls(T, V)


@dataclass
class DemixingState:
    W: np.ndarray
    nmf: NmfModel
    variant: str = "naive"
    mu: object = 0.0
    prior: Optional[PriorSpatialModel] = None
    stale: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant != "naive" and self.prior is None:
            raise ValueError(f"variant {self.variant!r} needs a prior spatial model")

    def mu_array(self) -> np.ndarray:
        n_freq, n_src = self.W.shape[:2]
        return np.broadcast_to(np.asarray(self.mu, dtype=float), (n_freq, n_src))


@dataclass
class SeparationResult:
    y: np.ndarray
    chosen_target: int
    kurtosis_scores: Optional[np.ndarray] = None
    costs: list = field(default_factory=list)


def separate(x, W) -> np.ndarray:
    """``y_ij = W_i x_ij`` for every bin and frame."""
    x = np.asarray(x)
    W = np.asarray(W)
    if x.ndim != 3 or W.ndim != 3 or W.shape[0] != x.shape[0] or W.shape[2] != x.shape[2]:
        raise ShapeMismatch(f"x {x.shape} and W {W.shape} do not agree")
    return np.matmul(x, np.swapaxes(W, 1, 2))


def _power_nij(y):
    # |y|^2 in source-major layout
    return np.ascontiguousarray(np.moveaxis(y.real**2 + y.imag**2, 2, 0))


def _check_variance(r):
    if not np.all(np.isfinite(r)) or np.any(r <= 0):
        raise NonFiniteIntermediate("model variance must be finite and positive")


def cost_ilrma(x, state: DemixingState) -> float:
    """Negative log-likelihood of the observation, up to a constant."""
    y = separate(x, state.W)
    r = state.nmf.variance()
    _check_variance(r)
    n_frames = x.shape[1]
    power = _power_nij(y)
    data = np.sum(power / r + np.log(r)) / n_frames
    _, logdet = np.linalg.slogdet(state.W)
    if not np.all(np.isfinite(logdet)):
        raise SingularMatrix("demixing matrix determinant underflows")
    return float(data - 2.0 * np.sum(logdet))


def _steering_products(W, prior):
    # (I, N): w_in^H a_t
    return np.einsum("inm,im->in", W, prior.a_hat_t)


def cost_sr(x, state: DemixingState, prior: Optional[PriorSpatialModel] = None) -> float:
    prior = prior or state.prior
    wa = _steering_products(state.W, prior)
    wa[:, prior.target_index] -= 1.0
    return cost_ilrma(x, state) + float(np.sum(state.mu_array() * np.abs(wa) ** 2))


def cost_nsr(x, state: DemixingState, prior: Optional[PriorSpatialModel] = None) -> float:
    prior = prior or state.prior
    wa = _steering_products(state.W, prior)
    wa[:, prior.target_index] = 0.0
    return cost_ilrma(x, state) + float(np.sum(state.mu_array() * np.abs(wa) ** 2))


def cost(x, state: DemixingState) -> float:
    """Cost matching ``state.variant``."""
    if state.variant == "sr":
        return cost_sr(x, state)
    if state.variant == "nsr":
        return cost_nsr(x, state)
    return cost_ilrma(x, state)


class _Workspace:
    """Preallocated (N, I, J) buffers; fresh multi-megabyte temporaries cost more than the arithmetic."""

    def __init__(self, x):
        n_freq, n_frames, n_mic = x.shape
        shape = (n_mic, n_freq, n_frames)
        self.p = np.empty(shape)
        self.inv_r = np.empty(shape)
        self.tmp = np.empty(shape)
        xs = np.swapaxes(x, 1, 2)  # (I, M, J)
        self.xs = np.ascontiguousarray(np.concatenate([xs.real, xs.imag], axis=1))
        self.y = np.empty((2 * n_mic, n_freq, n_frames))

    def power(self, W):
        """``|W_i x_ij|^2`` in source-major layout, written into ``self.p``."""
        n = W.shape[1]
        # real 2N x 2M block form of the complex product, written source-major
        Wb = np.block([[W.real, -W.imag], [W.imag, W.real]])
        np.matmul(Wb, self.xs, out=np.swapaxes(self.y, 0, 1))
        np.multiply(self.y[:n], self.y[:n], out=self.p)
        np.multiply(self.y[n:], self.y[n:], out=self.tmp)
        self.p += self.tmp
        return self.p


def _nmf_step(p, T, V, ws=None, inv_r_ready=False):
    """MM sweep on source-major arrays; also returns ``1 / r`` for the new model.

    With ``inv_r_ready`` the workspace already holds ``1 / (T V)`` from the
    previous sweep.
    """
    if ws is None:
        inv_r, pr2 = np.empty_like(p), np.empty_like(p)
    else:
        inv_r, pr2 = ws.inv_r, ws.tmp
    if not (inv_r_ready and ws is not None):
        np.matmul(T, V, out=inv_r)
        np.reciprocal(inv_r, out=inv_r)
    np.multiply(p, inv_r, out=pr2)
    pr2 *= inv_r
    Vt = np.ascontiguousarray(np.swapaxes(V, 1, 2))
    T = np.maximum(T * np.sqrt((pr2 @ Vt) / (inv_r @ Vt)), EPS_NMF)
    np.matmul(T, V, out=inv_r)
    np.reciprocal(inv_r, out=inv_r)
    np.multiply(p, inv_r, out=pr2)
    pr2 *= inv_r
    Tt = np.swapaxes(T, 1, 2)
    V = np.maximum(V * np.sqrt((Tt @ pr2) / (Tt @ inv_r)), EPS_NMF)
    np.matmul(T, V, out=inv_r)
    np.reciprocal(inv_r, out=inv_r)
    return T, V, inv_r


def update_nmf(x, state: DemixingState, y=None) -> NmfModel:
    """One majorization-minimization sweep over the bases then the activations.

    Itakura-Saito multiplicative rules with square-root exponent, each entry
    floored at ``EPS_NMF``.
    """
    if y is None:
        y = separate(x, state.W)
    T, V, _ = _nmf_step(_power_nij(y), state.nmf.T, state.nmf.V)
    return NmfModel(T, V)


def outer_products(x) -> np.ndarray:
    """Upper triangle of ``x_ij x_ij^H`` as a real view of shape (I, J, M (M + 1)),
    reused by every sweep."""
    rows, cols = np.triu_indices(x.shape[-1])
    xx = x[:, :, rows] * np.conj(x[:, :, cols])
    return np.ascontiguousarray(xx).view(float)


def weighted_covariances(x, r, xx=None, inv_r=None) -> np.ndarray:
    """``D_in = (1/J) sum_j x_ij x_ij^H / r_ijn`` for all bins and sources, shape (N, I, M, M).

    ``inv_r`` may be passed instead of ``r`` when ``1 / r`` is already at hand.
    """
    n_freq, n_frames, n_mic = x.shape
    xx = outer_products(x) if xx is None else xx
    inv_r = np.reciprocal(r) if inv_r is None else inv_r
    n_src = inv_r.shape[0]
    inv_r = np.swapaxes(inv_r, 0, 1)  # (I, N, J)
    d = np.matmul(inv_r, xx) / n_frames  # (I, N, M (M + 1))
    d = np.ascontiguousarray(d).view(complex)
    rows, cols = np.triu_indices(n_mic)
    D = np.empty((n_src, n_freq, n_mic, n_mic), dtype=complex)
    d = np.moveaxis(d, 1, 0)
    D[:, :, cols, rows] = np.conj(d)
    D[:, :, rows, cols] = d
    return D


def weighted_covariance(x, r, n):
    """Single-source version of :func:`weighted_covariances`, shape (I, M, M)."""
    xr = x / r[n][:, :, None]
    return np.swapaxes(xr, 1, 2) @ np.conj(x) / x.shape[1]


def _covariances(x, state, r, xx, D):
    if D is not None:
        return D
    r = state.nmf.variance() if r is None else r
    return weighted_covariances(x, r, xx)


def _row_solve(W, D, n):
    """``(W_i D_i)^{-1} e_n`` for all bins, with a mask of usable bins.

    LAPACK handles the common case; a singular bin anywhere in the stack
    falls back to the pivot-checked elimination kernel.
    """
    m = W.shape[-1]
    e = np.zeros((m, 1))
    e[n] = 1.0
    WD = W @ D
    try:
        u = np.linalg.solve(WD, e)[:, :, 0]
    except np.linalg.LinAlgError:
        u, ok = gauss_solve(WD, e)
        return u[:, :, 0], ok
    # |u| <= ||(WD)^-1|| so this bounds the condition number from below
    growth = np.abs(u).max(axis=1) * np.abs(WD).max(axis=(1, 2))
    ok = np.isfinite(growth) & (growth < TOL.cond_max)
    return u, ok


def _quad(u, D, v=None):
    v = u if v is None else v
    return np.einsum("im,iml,il->i", np.conj(u), D, v)


def _ip_row(W, D, n):
    u, ok = _row_solve(W, D, n)
    h = _quad(u, D).real
    ok &= np.isfinite(h) & (h > 0)
    if not np.all(ok):
        logger.debug("IP: skipping %d singular bins for source %d", np.count_nonzero(~ok), n)
    w = u / np.sqrt(np.where(ok, h, 1.0))[:, None]
    W[ok, n, :] = np.conj(w[ok])


def update_w_ip(x, state: DemixingState, r=None, xx=None, D=None) -> np.ndarray:
    """Iterative projection sweep over all rows of every ``W_i``."""
    D = _covariances(x, state, r, xx, D)
    W = state.W.copy()
    for n in range(W.shape[1]):
        _ip_row(W, D[n], n)
    return W


def update_w_nsr(x, state: DemixingState, prior=None, r=None, xx=None, D=None) -> np.ndarray:
    """IP sweep on the null-regularized cost."""
    prior = prior or state.prior
    mu = state.mu_array()
    a = prior.a_hat_t
    aa = a[:, :, None] * np.conj(a[:, None, :])
    D_all = _covariances(x, state, r, xx, D)
    W = state.W.copy()
    for n in range(W.shape[1]):
        D = D_all[n]
        if n != prior.target_index:
            D = D + mu[:, n, None, None] * aa
        _ip_row(W, D, n)
    return W


def update_w_vcd(x, state: DemixingState, prior=None, r=None, xx=None, D=None) -> np.ndarray:
    """Vectorwise coordinate descent sweep on the SR cost."""
    prior = prior or state.prior
    mu = state.mu_array()
    a = prior.a_hat_t
    aa = a[:, :, None] * np.conj(a[:, None, :])
    D_all = _covariances(x, state, r, xx, D)
    W = state.W.copy()
    n_t = prior.target_index
    for n in range(W.shape[1]):
        D = D_all[n] + mu[:, n, None, None] * aa
        u, ok = _row_solve(W, D, n)
        if n == n_t:
            uh, ok_hat = gauss_solve(D, (mu[:, n, None] * a)[:, :, None])
            uh = uh[:, :, 0]
            ok &= ok_hat
        else:
            uh = np.zeros_like(u)
        h = _quad(u, D).real
        hh = _quad(u, D, uh)
        ok &= np.isfinite(h) & (h > 0)
        h = np.where(ok, h, 1.0)
        mag = np.abs(hh)
        # rationalized form of (hh / 2h)(sqrt(1 + 4h/|hh|^2) - 1); equals 1/sqrt(h) at hh = 0
        coef = np.where(
            mag == 0,
            1.0 / np.sqrt(h),
            (hh / np.where(mag == 0, 1.0, mag)) * 2.0 / (np.sqrt(mag**2 + 4.0 * h) + mag),
        )
        w = coef[:, None] * u + uh
        if not np.all(np.isfinite(w[ok])):
            raise NonFiniteIntermediate(f"VCD produced non-finite filter for source {n}")
        if not np.all(ok):
            logger.debug("VCD: skipping %d singular bins for source %d", np.count_nonzero(~ok), n)
        W[ok, n, :] = np.conj(w[ok])
    return W


def update_w(x, state: DemixingState, r=None, xx=None, D=None) -> np.ndarray:
    if state.variant == "sr":
        return update_w_vcd(x, state, r=r, xx=xx, D=D)
    if state.variant == "nsr":
        return update_w_nsr(x, state, r=r, xx=xx, D=D)
    return update_w_ip(x, state, r=r, xx=xx, D=D)


def kurtosis_scores(y) -> np.ndarray:
    """Normalized fourth moment of ``|y|`` pooled over bins and frames, per source."""
    p = np.abs(np.asarray(y)) ** 2
    m2 = p.mean(axis=(0, 1))
    m4 = (p**2).mean(axis=(0, 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = m4 / m2**2
    return np.where(m2 > 0, scores, -np.inf)


def select_channel_kurtosis(y):
    """Index of the most super-Gaussian source (lowest index on ties) and all scores."""
    scores = kurtosis_scores(y)
    return int(np.argmax(scores)), scores


def projection_back(y_n, W, n: int, ref_mic: int = 0) -> np.ndarray:
    """Rescale source ``n`` to its image at ``ref_mic`` using ``W_i^{-1}``."""
    A = invert_small(W)
    return np.asarray(y_n) * A[:, ref_mic, n][:, None]


def projection_back_all(y, W, ref_mic: int = 0) -> np.ndarray:
    A = invert_small(W)
    return y * A[:, ref_mic, :][:, None, :]


def run_ilrma(x, variant="naive", prior=None, iters=30, W_init=None, n_basis=10,
              mu=0.1, nmf_init=None, rng=None, ref_mic=0, track_cost=False):
    """Alternate NMF and demixing updates for ``iters`` sweeps.

    Parameters
    ----------
    x: ndarray (I, J, M)
        Observed STFT.
    variant: {'naive', 'sr', 'nsr'}
    prior: PriorSpatialModel, optional
        Required for 'sr' and 'nsr'.
    iters: int
        Number of full sweeps (NMF update followed by demixing update).
    W_init: ndarray (I, M, M), optional
        Defaults to identity for 'naive' and to the prior demixing matrix otherwise.
    nmf_init: NmfModel, optional
        Defaults to uniform random values drawn from ``rng``.
    track_cost: bool
        Record the variant's cost before the first and after every sweep.

    Returns
    -------
    (DemixingState, SeparationResult)
    """
    x = np.asarray(x, dtype=complex)
    n_freq, n_frames, n_mic = x.shape
    if n_frames < 2:
        raise ValueError("need at least two frames")
    if iters < 1:
        raise ValueError("iters must be positive")
    if variant != "naive" and prior is None:
        raise ValueError(f"variant {variant!r} needs a prior spatial model")
    if W_init is None:
        W_init = prior.W_hat if variant != "naive" else np.tile(np.eye(n_mic, dtype=complex), (n_freq, 1, 1))
    if nmf_init is None:
        nmf_init = NmfModel.random(n_freq, n_frames, n_mic, n_basis, rng)
    state = DemixingState(np.array(W_init, dtype=complex), nmf_init, variant, mu, prior)

    costs = []
    if not np.any(x):
        # silence: keep W, skip NMF
        y = separate(x, state.W)
        target = prior.target_index if variant != "naive" else 0
        return state, SeparationResult(y, target, None, costs)

    if track_cost:
        costs.append(cost(x, state))
    xx = outer_products(x)
    ws = _Workspace(x)
    last_good = state
    for it in range(iters):
        try:
            p = ws.power(state.W)
            T, V, inv_r = _nmf_step(p, state.nmf.T, state.nmf.V, ws, inv_r_ready=it > 0)
            state = replace(state, nmf=NmfModel(T, V))
            D = weighted_covariances(x, None, xx, inv_r=inv_r)
            state = replace(state, W=update_w(x, state, xx=xx, D=D))
        except (NonFiniteIntermediate, FloatingPointError) as exc:
            logger.warning("ILRMA sweep %d failed (%s); returning last valid state", it, exc)
            state = replace(last_good, stale=True)
            break
        last_good = state
        if track_cost:
            costs.append(cost(x, state))

    y = separate(x, state.W)
    if variant == "naive":
        try:
            images = projection_back_all(y, state.W, ref_mic)
        except SingularMatrix:
            images = y
        target, scores = select_channel_kurtosis(images)
    else:
        target, scores = prior.target_index, None
    return state, SeparationResult(y, target, scores, costs)
