"""Rank-constrained spatial covariance estimation and multichannel Wiener filter.

Per bin the observation is modelled as zero-mean complex Gaussian with

    Sigma = r_s a a^H + r_n (R + lam b b^H)

where ``a`` is the target steering vector and ``R`` the rank-(M-1) noise SCM,
both fixed from the latest demixing matrix, and ``b`` spans the null space of
``R``. ``r_s``, ``r_n`` and ``lam`` are re-estimated every frame by coordinate
ascent on the log-likelihood plus an inverse-gamma log-prior on ``lam``.

Because ``b`` is orthogonal to the range of ``R``,
``(R + lam b b^H)^{-1} = R^+ + b b^H / lam``, so once five scalars per bin are
known (``x^H R^+ x``, ``a^H R^+ x``, ``b^H x``, ``a^H R^+ a``, ``a^H b``) the
objective, its coordinate maximizers and the Wiener output need only scalar
arithmetic.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import NonFiniteIntermediate, RankDeficiencyViolation
from .numerics import fix_phase, invert_small, jacobi_eigh

logger = logging.getLogger(__name__)

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
RANK_TOL = 1e-8


@dataclass(frozen=True)
class RcscmeConfig:
    alpha: float = 1.6
    beta: float = 1e-16
    sweeps: int = 2
    ref_mic: int = 0
    floor_rel: float = 1e-12
    power_floor: float = 1e-20
    bracket_rel: float = 1e3
    lam_floor: float = 1e-10
    lam_ceil: float = 1e6
    golden_iters: int = 30
    lam_mode: str = "time_variant"
    # extra ascent chain restarted at this lam; None disables it
    restart_lam: Optional[float] = 1e-3

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("inverse-gamma shape and scale must be positive")
        if self.restart_lam is not None and self.restart_lam <= 0:
            raise ValueError("restart_lam must be positive")
        if self.lam_mode not in ("time_variant", "time_invariant"):
            raise ValueError(f"unknown lam_mode {self.lam_mode!r}")


@dataclass(frozen=True)
class RcscmeFixedParams:
    """Spatial parameters derived once per demixing matrix.

    ``R`` is normalized to unit mean nonzero eigenvalue so ``lam`` and its
    prior do not depend on the arbitrary scale of the demixing matrix.
    """

    a_t: np.ndarray  # (I, M)
    R_noise: np.ndarray = field(repr=False)  # (I, M, M)
    b: np.ndarray = field(repr=False)  # (I, M)
    R_pinv: np.ndarray = field(repr=False)  # (I, M, M)
    log_pdet: np.ndarray = field(repr=False)  # (I,)
    target_index: int = 0
    ref_mic: int = 0

    @property
    def n_mics(self) -> int:
        return self.a_t.shape[-1]

    @property
    def aPa(self):
        return np.einsum("im,iml,il->i", np.conj(self.a_t), self.R_pinv, self.a_t).real

    @property
    def ab(self):
        return np.einsum("im,im->i", np.conj(self.a_t), self.b)

    @classmethod
    def passthrough(cls, n_freq: int, n_mics: int, ref_mic: int = 0):
        """Parameters for an identity demixing matrix with the reference mic as target."""
        return derive_fixed(np.tile(np.eye(n_mics, dtype=complex), (n_freq, 1, 1)), ref_mic, ref_mic)


@dataclass
class RcscmeFrameParams:
    r_s: np.ndarray
    r_n: np.ndarray
    lam: np.ndarray
    alpha: float = 1.6
    beta: float = 1e-16
    flagged: Optional[np.ndarray] = None


def _noise_scm(W, target_index):
    A = invert_small(np.asarray(W, dtype=complex))
    m = A.shape[-1]
    if not 0 <= target_index < m:
        raise IndexError(f"target index {target_index} out of range")
    noise = np.delete(A, target_index, axis=2)
    R = noise @ np.conj(np.swapaxes(noise, 1, 2))
    if m > 1:
        R = R / (np.trace(R, axis1=1, axis2=2).real / (m - 1))[:, None, None]
    return A, R


def _rank_ok(w, R):
    thresh = RANK_TOL * np.trace(R, axis1=1, axis2=2).real
    if R.shape[-1] == 1:
        return np.ones(R.shape[0], dtype=bool)
    return (w[:, 0] <= thresh) & (w[:, 1] > thresh)


def rank_deficient_bins(W, target_index: int) -> np.ndarray:
    """Mask of bins whose noise SCM is not numerically of rank M-1."""
    _, R = _noise_scm(W, target_index)
    w, _ = jacobi_eigh(R)
    return ~_rank_ok(w, R)


def derive_fixed(W, target_index: int, ref_mic: int = 0) -> RcscmeFixedParams:
    """Fix the target steering vector and the rank-(M-1) noise SCM from ``W``.

    Raises
    ------
    SingularMatrix
        If some ``W_i`` cannot be inverted.
    RankDeficiencyViolation
        If the noise SCM is not numerically of rank M-1.
    """
    A, R = _noise_scm(W, target_index)
    a_t = A[:, :, target_index].copy()
    w, vecs = jacobi_eigh(R)
    bad = ~_rank_ok(w, R)
    if np.any(bad):
        raise RankDeficiencyViolation(f"noise SCM is not of rank M-1 in {np.count_nonzero(bad)} bins")
    b = fix_phase(vecs[:, :, 0] / np.linalg.norm(vecs[:, :, 0], axis=1, keepdims=True))
    bb = b[:, :, None] * np.conj(b[:, None, :])
    R_pinv = invert_small(R + bb) - bb
    R_pinv = 0.5 * (R_pinv + np.conj(np.swapaxes(R_pinv, 1, 2)))
    log_pdet = np.sum(np.log(w[:, 1:]), axis=1)
    return RcscmeFixedParams(a_t, R, b, R_pinv, log_pdet, target_index, ref_mic)


@dataclass
class _Stats:
    """Per-bin scalars of one observation vector."""

    xPx: np.ndarray
    aPx: np.ndarray
    bx: np.ndarray
    aPa: np.ndarray
    ab: np.ndarray
    log_pdet: np.ndarray
    m: int

    def __post_init__(self):
        self.bx2 = np.abs(self.bx) ** 2
        self.ab2 = np.abs(self.ab) ** 2
        # x^H P x a^H P a - |a^H P x|^2 >= 0 and the matching lam-free cross term
        self.gram = self.xPx * self.aPa - np.abs(self.aPx) ** 2
        self.cross = (
            self.xPx * self.ab2 + self.aPa * self.bx2
            - 2.0 * np.real(np.conj(self.aPx) * self.ab * self.bx)
        )

    @classmethod
    def of(cls, x, fixed: RcscmeFixedParams):
        x = np.asarray(x, dtype=complex)
        Px = np.einsum("...ml,...l->...m", fixed.R_pinv, x)
        return cls(
            np.einsum("...m,...m->...", np.conj(x), Px).real,
            np.einsum("...m,...m->...", np.conj(fixed.a_t), Px),
            np.einsum("...m,...m->...", np.conj(fixed.b), x),
            fixed.aPa,
            fixed.ab,
            fixed.log_pdet,
            fixed.n_mics,
        )

    def subset(self, idx) -> "_Stats":
        f = lambda v: v[idx] if np.ndim(v) else v
        return _Stats(f(self.xPx), f(self.aPx), f(self.bx), f(self.aPa), f(self.ab),
                      f(self.log_pdet), self.m)

    def parts(self, lam):
        """``lam`` times ``x^H Q^-1 x``, ``a^H Q^-1 a`` and ``a^H Q^-1 x``, with ``Q = R + lam b b^H``.

        Scaling by ``lam`` keeps every term bounded as ``lam -> 0``.
        """
        e = lam * self.xPx + self.bx2
        qa = lam * self.aPa + self.ab2
        g = lam * self.aPx + self.ab * self.bx
        return e, qa, g


def _likelihood(st: _Stats, r_s, r_n, lam):
    # With s = lam * (r_n + r_s a^H Q^-1 a) the quadratic form is num / (r_n s);
    # the |a^H b|^2 |b^H x|^2 terms of the naive expansion cancel analytically,
    # which keeps the evaluation accurate as lam -> 0.
    _, qa, _ = st.parts(lam)
    s = lam * r_n + r_s * qa
    num = r_n * (lam * st.xPx + st.bx2) + r_s * (lam * st.gram + st.cross)
    quad = num / (r_n * s)
    logdet = (st.m - 1) * np.log(r_n) + np.log(s) + st.log_pdet
    return -quad - logdet


def _log_prior(lam, alpha, beta):
    return -(alpha + 1.0) * np.log(lam) - beta / lam


def frame_objective(x, params: RcscmeFrameParams, fixed: RcscmeFixedParams):
    """Log-likelihood of ``x`` plus the inverse-gamma log-prior of ``lam``, per bin.

    Equals ``-x^H Sigma^-1 x - log det Sigma - (alpha + 1) log lam - beta / lam``.
    """
    st = _Stats.of(x, fixed)
    return _likelihood(st, params.r_s, params.r_n, params.lam) + _log_prior(
        params.lam, params.alpha, params.beta
    )


def bounds(x, fixed: RcscmeFixedParams, power=None, cfg: RcscmeConfig = RcscmeConfig()):
    """Search boxes ``(lo, hi)`` for ``r_s``, ``r_n`` and ``lam`` at each bin.

    ``power`` is the mean per-mic bin power over the recent window; it sets the
    variance floors. The upper ends also cover the current frame's power.
    """
    x = np.asarray(x, dtype=complex)
    m = fixed.n_mics
    frame_power = np.sum(np.abs(x) ** 2, axis=-1) / m
    base = np.maximum(frame_power if power is None else power, cfg.power_floor)
    top = cfg.bracket_rel * np.maximum(frame_power, base)
    s_a = np.sum(np.abs(fixed.a_t) ** 2, axis=-1) / m
    s_r = np.trace(fixed.R_noise, axis1=-2, axis2=-1).real / m
    lo_s, hi_s = cfg.floor_rel * base / s_a, top / s_a
    lo_n, hi_n = cfg.floor_rel * base / s_r, top / s_r
    shape = np.shape(lo_s)
    lo_l = np.full(shape, cfg.lam_floor)
    hi_l = np.full(shape, cfg.lam_ceil)
    return (lo_s, hi_s), (lo_n, hi_n), (lo_l, hi_l)


def _golden_max(f, lo, hi, n_iter):
    """Vectorized golden-section search for the maximum of ``f`` over ``[lo, hi]`` in log scale.

    Every bin's bracket shrinks by the same factor per step, so positions are
    tracked as ``log lo + span * u`` with a shared scalar width in ``u``.
    Returns the best point among the final interior probes and both ends.
    """
    base = np.log(lo)
    span = np.log(hi) - base
    g2 = 1.0 - GOLDEN  # GOLDEN**2
    at = lambda u: np.exp(base + span * u)
    a = np.zeros_like(base)
    w = 1.0
    fc, fd = f(at(a + g2)), f(at(a + GOLDEN))
    for _ in range(n_iter):
        left = fc >= fd
        # left keeps [a, d] and the old c becomes d; right keeps [c, b] and the old d becomes c
        a = np.where(left, a, a + g2 * w)
        w *= GOLDEN
        fn = f(at(a + w * np.where(left, g2, GOLDEN)))
        fc, fd = np.where(left, fn, fd), np.where(left, fc, fn)
    take_c = fc >= fd
    best = at(a + w * np.where(take_c, g2, GOLDEN))
    fbest = np.where(take_c, fc, fd)
    for end in (lo, hi):
        fe = f(end)
        better = fe > fbest
        best, fbest = np.where(better, end, best), np.where(better, fe, fbest)
    return best, fbest


def _keep_better(f, new, old):
    fn, fo = f(new), f(old)
    take = fn >= fo
    return np.where(take, new, old)


def _line_r_n(st: _Stats, r_s, lam):
    """Objective as a function of ``r_n`` alone (constants dropped)."""
    e = lam * st.xPx + st.bx2
    c0 = r_s * (lam * st.gram + st.cross)
    c1 = r_s * (lam * st.aPa + st.ab2)
    k = st.m - 1

    def f(r_n):
        s = lam * r_n + c1
        return -(r_n * e + c0) / (r_n * s) - k * np.log(r_n) - np.log(s)

    return f


def _line_lam(st: _Stats, r_s, r_n, alpha, beta):
    """Objective including the prior as a function of ``lam`` alone (constants dropped)."""
    p = (r_n * st.xPx + r_s * st.gram) / r_n
    q = (r_n * st.bx2 + r_s * st.cross) / r_n
    u = r_n + r_s * st.aPa
    v = r_s * st.ab2
    a1 = alpha + 1.0

    def f(lam):
        s = lam * u + v
        return -(lam * p + q) / s - np.log(s) - a1 * np.log(lam) - beta / lam

    return f


def _sweep(st: _Stats, r_s, r_n, lam, box, cfg: RcscmeConfig, alpha, beta):
    (lo_s, hi_s), (lo_n, hi_n), (lo_l, hi_l) = box

    # r_s: the objective is unimodal in r_s with a closed-form maximizer
    _, qa, g = st.parts(lam)
    cand = np.clip(np.abs(g) ** 2 / qa**2 - lam * r_n / qa, lo_s, hi_s)
    r_s = _keep_better(lambda v: _likelihood(st, v, r_n, lam), cand, r_s)

    f_n = _line_r_n(st, r_s, lam)
    cand, _ = _golden_max(f_n, lo_n, hi_n, cfg.golden_iters)
    r_n = _keep_better(f_n, cand, r_n)

    f_l = _line_lam(st, r_s, r_n, alpha, beta)
    cand, _ = _golden_max(f_l, lo_l, hi_l, cfg.golden_iters)
    lam = _keep_better(f_l, cand, lam)
    return r_s, r_n, lam


def _ascend(st: _Stats, r_s, r_n, lam, box, cfg: RcscmeConfig, alpha, beta, sweeps, tol):
    obj = lambda: _likelihood(st, r_s, r_n, lam) + _log_prior(lam, alpha, beta)
    prev = obj()
    for _ in range(sweeps):
        r_s, r_n, lam = _sweep(st, r_s, r_n, lam, box, cfg, alpha, beta)
        cur = obj()
        if tol > 0 and np.all(cur - prev <= tol * np.maximum(1.0, np.abs(cur))):
            break
        prev = cur
    return r_s, r_n, lam, cur


def update_frame(x, fixed: RcscmeFixedParams, init: RcscmeFrameParams, sweeps=None,
                 power=None, cfg: RcscmeConfig = RcscmeConfig(), tol=0.0):
    """Coordinate-wise MAP ascent on ``(r_s, r_n, lam)`` for every bin of one frame.

    Parameters
    ----------
    x: ndarray (I, M)
        Observation vectors.
    init: RcscmeFrameParams
        Starting point (e.g. the previous frame), clipped into the search box.
    sweeps: int, optional
        Number of coordinate sweeps (default ``cfg.sweeps``).
    power: ndarray (I,), optional
        Window-average per-mic power used for the floors.
    tol: float
        Stop early once no bin improves by more than ``tol`` in a sweep.

    Returns
    -------
    RcscmeFrameParams
        Bins whose update went non-finite are reverted to ``init`` and flagged.
    """
    sweeps = cfg.sweeps if sweeps is None else sweeps
    if sweeps < 1:
        raise ValueError("sweeps must be positive")
    x = np.asarray(x, dtype=complex)
    alpha, beta = init.alpha, init.beta
    st = _Stats.of(x, fixed)
    box = bounds(x, fixed, power, cfg)
    shape = box[0][0].shape
    r_s = np.clip(np.broadcast_to(init.r_s, shape), *box[0])
    r_n = np.clip(np.broadcast_to(init.r_n, shape), *box[1])
    lam = np.clip(np.broadcast_to(init.lam, shape), *box[2])

    with np.errstate(all="ignore"):
        r_s, r_n, lam, cur = _ascend(st, r_s, r_n, lam, box, cfg, alpha, beta, sweeps, tol)
        if cfg.restart_lam is not None:
            # the joint objective has a second basin at small lam that coordinate
            # moves from a large lam cannot reach; bins caught in the wrong one
            # end with r_s on its floor, so only those get a second chain
            idx = np.flatnonzero(np.ravel(r_s <= box[0][0] * (1 + 1e-9)))
            if idx.size:
                flat = lambda v: np.ravel(v)[idx]
                sub = tuple((flat(lo), flat(hi)) for lo, hi in box)
                lam0 = np.clip(np.full(idx.size, cfg.restart_lam), *sub[2])
                alt = _ascend(st.subset(idx) if np.ndim(st.xPx) else st, flat(r_s), flat(r_n), lam0,
                              sub, cfg, alpha, beta, sweeps, tol)
                take = alt[3] > flat(cur)
                out = []
                for new, old in zip(alt, (r_s, r_n, lam, cur)):
                    old = np.array(old, dtype=float, ndmin=1).ravel()
                    old[idx[take]] = new[take]
                    out.append(old.reshape(shape))
                r_s, r_n, lam, cur = out
        bad = ~(np.isfinite(r_s) & np.isfinite(r_n) & np.isfinite(lam) & np.isfinite(cur))
    if np.any(bad):
        logger.warning("RCSCME: %d bins produced non-finite values; reverted", np.count_nonzero(bad))
        r_s = np.where(bad, init.r_s, r_s)
        r_n = np.where(bad, init.r_n, r_n)
        lam = np.where(bad, init.lam, lam)
    return RcscmeFrameParams(r_s, r_n, lam, alpha, beta, bad)


def wiener_extract(x, fixed: RcscmeFixedParams, params: RcscmeFrameParams, ref_mic=None):
    """Speech image at the reference mic, ``e_ref^T r_s a a^H Sigma^-1 x``, per bin."""
    ref = fixed.ref_mic if ref_mic is None else ref_mic
    st = _Stats.of(x, fixed)
    _, qa, g = st.parts(params.lam)
    gain = params.r_s * g / (params.lam * params.r_n + params.r_s * qa)
    out = fixed.a_t[..., ref] * gain
    if not np.all(np.isfinite(out)):
        raise NonFiniteIntermediate("Wiener filter output is not finite")
    return out


@dataclass
class FrameCarry:
    """Per-frequency state owned by the frame worker between hops."""

    params: RcscmeFrameParams
    power_hist: np.ndarray  # (window_frames, I)
    filled: int = 0
    pos: int = 0
    x_hist: Optional[np.ndarray] = None  # (window_frames, I, M), time-invariant mode only
    flagged_bins: int = 0

    @classmethod
    def initial(cls, n_freq: int, n_mics: int, window_frames: int, cfg: RcscmeConfig = RcscmeConfig()):
        ones = np.ones(n_freq)
        params = RcscmeFrameParams(ones.copy(), ones.copy(), ones.copy(), cfg.alpha, cfg.beta)
        x_hist = None
        if cfg.lam_mode == "time_invariant":
            x_hist = np.zeros((window_frames, n_freq, n_mics), dtype=complex)
        return cls(params, np.zeros((max(window_frames, 1), n_freq)), 0, 0, x_hist)

    def window_power(self):
        if self.filled == 0:
            return None
        return self.power_hist[: self.filled].mean(axis=0)


def _refit_lam_over_window(carry: FrameCarry, fixed, cfg, params):
    """Time-invariant ``lam``: one golden search over the whole recent window per bin."""
    xs = carry.x_hist[: carry.filled]
    stats = [_Stats.of(xj, fixed) for xj in xs]
    r_s, r_n = params.r_s, params.r_n

    def f(lam):
        total = _log_prior(lam, params.alpha, params.beta)
        for st in stats:
            total = total + _likelihood(st, r_s, r_n, lam)
        return total

    lo = np.full(r_s.shape, cfg.lam_floor)
    hi = np.full(r_s.shape, cfg.lam_ceil)
    cand, _ = _golden_max(f, lo, hi, cfg.golden_iters)
    return _keep_better(f, cand, params.lam)


def process_frame(x_frame, fixed: RcscmeFixedParams, carry: FrameCarry,
                  cfg: RcscmeConfig = RcscmeConfig()):
    """Extract the target speech STFT column for one frame.

    Parameters
    ----------
    x_frame: ndarray (I, M)
        Newest observed STFT column.
    carry: FrameCarry
        Warm-start state, updated in place and returned.

    Returns
    -------
    (ndarray (I,), FrameCarry)
    """
    x_frame = np.asarray(x_frame, dtype=complex)
    m = x_frame.shape[-1]
    carry.power_hist[carry.pos] = np.sum(np.abs(x_frame) ** 2, axis=-1) / m
    if carry.x_hist is not None:
        carry.x_hist[carry.pos] = x_frame
    carry.pos = (carry.pos + 1) % carry.power_hist.shape[0]
    carry.filled = min(carry.filled + 1, carry.power_hist.shape[0])

    params = update_frame(x_frame, fixed, carry.params, power=carry.window_power(), cfg=cfg)
    if cfg.lam_mode == "time_invariant":
        with np.errstate(all="ignore"):
            params = replace(params, lam=_refit_lam_over_window(carry, fixed, cfg, params))
    ref = fixed.ref_mic
    with np.errstate(all="ignore"):
        st = _Stats.of(x_frame, fixed)
        _, qa, g = st.parts(params.lam)
        out = fixed.a_t[:, ref] * params.r_s * g / (params.lam * params.r_n + params.r_s * qa)
    bad = ~np.isfinite(out)
    if params.flagged is not None:
        bad |= params.flagged
    if np.any(bad):
        logger.warning("RCSCME: passing through %d bins", np.count_nonzero(bad))
        out = np.where(bad, x_frame[:, ref], out)
        carry.flagged_bins += int(np.count_nonzero(bad))
    carry.params = params
    return out, carry
