"""Blockwise-batch real-time orchestration.

Two logical workers share one sample stream:

* the block worker re-estimates the demixing matrices every ``tau3`` seconds
  from the most recent ``tau1`` seconds and publishes a :class:`WSnapshot`;
* the frame worker runs every hop (``tau4``), extracting the newest STFT frame
  with the latest published snapshot and emitting ``hop_len`` output samples.

The snapshot is an immutable object swapped by a single reference assignment,
so the frame worker always sees one consistent ``(W, target, fixed)`` triple
and never waits for the block worker. A tick that falls while the previous
block job is still running is skipped, not queued.

By default every scheduling decision is made on the stream's own clock (the
availability time of each frame), which makes runs bit-reproducible. With
``wall_clock=True`` the block jobs run on a background thread and the stream
is paced against real time.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (ChannelMismatch, NotStarted, RankDeficiencyViolation,
                     SingularMatrix)
from .ilrma import VARIANTS, NmfModel, run_ilrma
from .prior import ArrayGeometry, PriorSpatialModel, prior_from_geometry
from .rcscme import (FrameCarry, RcscmeConfig, RcscmeFixedParams, derive_fixed,
                     process_frame, rank_deficient_bins)
from .stft import OverlapAdd, StftConfig, analyze

logger = logging.getLogger(__name__)

PIPELINE_VARIANTS = VARIANTS + ("passthrough",)


@dataclass(frozen=True)
class PriorConfig:
    """Array geometry and approximate talker direction for the sr/nsr variants."""

    geometry: ArrayGeometry
    azimuth: float = 0.0
    elevation: float = 0.0
    target_index: int = 0


@dataclass(frozen=True)
class PipelineConfig:
    tau1: float = 5.0
    tau2: float = 3.0
    tau3: float = 0.512
    tau4: float = 0.032
    variant: str = "nsr"
    ilrma_sweeps: int = 30
    n_basis: int = 10
    mu: float = 0.1
    n_mics: int = 4
    ref_mic: int = 0
    seed: int = 0
    stft: StftConfig = field(default_factory=StftConfig)
    # one ascent chain per frame: the second one roughly doubles the frame cost
    rcscme: RcscmeConfig = field(default_factory=lambda: RcscmeConfig(restart_lam=None))
    prior: Optional[PriorConfig] = None
    # virtual compute time charged to each block job; None charges the measured time
    ilrma_latency: Optional[float] = 0.0
    warm_start_nmf: bool = False
    normalize_block: bool = True

    def __post_init__(self):
        if abs(self.tau4 - self.stft.hop_seconds) > 1e-9:
            raise ValueError(f"tau4={self.tau4} must equal the STFT hop ({self.stft.hop_seconds} s)")
        ratio = self.tau3 / self.tau4
        if ratio < 1 or abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("tau3 must be a positive integer multiple of tau4")
        if not self.tau1 >= self.tau2 > 0:
            raise ValueError("need tau1 >= tau2 > 0")
        if self.variant not in PIPELINE_VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant in ("sr", "nsr") and self.prior is None:
            raise ValueError(f"variant {self.variant!r} needs a prior (geometry and direction)")
        if self.ilrma_sweeps < 1 or self.n_basis < 1:
            raise ValueError("ilrma_sweeps and n_basis must be positive")
        if not 0 <= self.ref_mic < self.n_mics:
            raise ValueError("ref_mic out of range")
        if self.prior is not None and self.prior.geometry.n_mics != self.n_mics:
            raise ValueError("prior geometry and n_mics disagree")

    @property
    def hop(self) -> int:
        return self.stft.hop_len

    @property
    def hops_per_tick(self) -> int:
        return int(round(self.tau3 / self.tau4))

    @property
    def window_samples(self) -> int:
        return int(round(self.tau1 * self.stft.sample_rate))

    @property
    def min_samples(self) -> int:
        return int(round(self.tau2 * self.stft.sample_rate))

    @property
    def rcscme_frames(self) -> int:
        return max(1, int(round(self.tau2 / self.tau4)))

    def build_prior(self) -> Optional[PriorSpatialModel]:
        if self.prior is None:
            return None
        p = self.prior
        return prior_from_geometry(p.geometry, p.azimuth, p.elevation, self.stft, p.target_index)


@dataclass(frozen=True)
class WSnapshot:
    W: np.ndarray = field(repr=False)
    target_index: int
    fixed: RcscmeFixedParams = field(repr=False)
    epoch: int
    produced_at: float
    data_end: float = 0.0  # stream time of the newest sample the estimate saw


class SnapshotSlot:
    """Single-producer single-consumer holder of the latest snapshot.

    Publishing is one reference assignment, which is atomic for CPython
    objects, so readers never block and never see a half-built snapshot.
    """

    def __init__(self):
        self._snap: Optional[WSnapshot] = None

    def publish(self, snap: WSnapshot) -> None:
        cur = self._snap
        if cur is not None and snap.epoch <= cur.epoch:
            raise ValueError("snapshot epochs must increase")
        self._snap = snap

    def latest(self) -> Optional[WSnapshot]:
        return self._snap


class SampleRing:
    """Fixed-capacity multichannel ring buffer addressed by absolute sample index."""

    def __init__(self, capacity: int, n_channels: int):
        self.capacity = int(capacity)
        self._buf = np.zeros((self.capacity, n_channels))
        self.total = 0  # samples ever written

    @property
    def oldest(self) -> int:
        return max(0, self.total - self.capacity)

    def __len__(self) -> int:
        return self.total - self.oldest

    def write(self, block: np.ndarray) -> None:
        n = block.shape[0]
        if n >= self.capacity:
            block = block[n - self.capacity:]
            self.total += n - self.capacity
            n = self.capacity
        start = self.total % self.capacity
        first = min(n, self.capacity - start)
        self._buf[start:start + first] = block[:first]
        self._buf[: n - first] = block[first:]
        self.total += n

    def read(self, start: int, stop: int) -> np.ndarray:
        """Copy of samples ``[start, stop)``; they must still be buffered."""
        if start < self.oldest or stop > self.total or start > stop:
            raise IndexError(f"samples [{start}, {stop}) not in buffer [{self.oldest}, {self.total})")
        idx = np.arange(start, stop) % self.capacity
        return self._buf[idx]


class FrameCache:
    """Spectra of the most recent frames, addressed by absolute frame index."""

    def __init__(self, capacity: int, n_freq: int, n_channels: int):
        self.capacity = int(capacity)
        self._buf = np.zeros((self.capacity, n_freq, n_channels), dtype=complex)
        self._index = np.full(self.capacity, -1)

    def put(self, j: int, x: np.ndarray) -> None:
        self._buf[j % self.capacity] = x
        self._index[j % self.capacity] = j

    def get(self, j0: int, j1: int) -> Optional[np.ndarray]:
        """Frames ``[j0, j1)`` as ``(I, J, M)``, or None if any of them is missing."""
        if j1 - j0 > self.capacity:
            return None
        slots = np.arange(j0, j1) % self.capacity
        if not np.array_equal(self._index[slots], np.arange(j0, j1)):
            return None
        return np.ascontiguousarray(self._buf[slots].transpose(1, 0, 2))


@dataclass(frozen=True)
class BlockResult:
    """What a block-worker job hands back: the demixing matrices and the target index."""

    W: np.ndarray
    target_index: int
    nmf: Optional[NmfModel] = None
    stale: bool = False


# (x block (I, J, M), previous snapshot or None, tick number) -> BlockResult
BlockRunner = Callable[[np.ndarray, Optional[WSnapshot], int], BlockResult]


@dataclass
class FrameRecord:
    index: int
    time: float
    epoch: int  # -1 while in passthrough
    age: float  # time since the consumed snapshot was published


def _stats_ms(values) -> dict:
    v = np.asarray(values, dtype=float) * 1e3
    if v.size == 0:
        return {"count": 0, "mean": None, "std": None, "max": None}
    return {"count": int(v.size), "mean": float(v.mean()), "std": float(v.std()), "max": float(v.max())}


class Pipeline:
    """Streaming extractor for one multichannel input.

    Parameters
    ----------
    cfg: PipelineConfig
    block_runner: callable, optional
        Replaces the ILRMA job (used to inject stubs in tests).
    wall_clock: bool
        Run block jobs on a background thread and pace :meth:`run` in real time.
    """

    def __init__(self, cfg: PipelineConfig, block_runner: Optional[BlockRunner] = None,
                 wall_clock: bool = False):
        self.cfg = cfg
        self.prior = cfg.build_prior()
        self.wall_clock = wall_clock
        self._runner = block_runner or self._ilrma_job
        st = cfg.stft
        capacity = max(cfg.window_samples, st.window_len + st.hop_len)
        self.ring = SampleRing(capacity, cfg.n_mics)
        self._frames = FrameCache(cfg.window_samples // st.hop_len + 2, st.n_freq, cfg.n_mics)
        self.slot = SnapshotSlot()
        self._ola = OverlapAdd(st)
        self._carry = FrameCarry.initial(st.n_freq, cfg.n_mics, cfg.rcscme_frames, cfg.rcscme)
        self._passthrough_fixed = RcscmeFixedParams.passthrough(st.n_freq, cfg.n_mics, cfg.ref_mic)
        self._next_frame = 0
        self._next_tick = 1
        self._epoch = 0
        self._pending: Optional[WSnapshot] = None  # finished job not yet visible (stream clock)
        self._future = None  # (future, tick_time) in wall-clock mode
        self._pool = ThreadPoolExecutor(max_workers=1) if wall_clock else None
        self._wall_start = None
        self._nmf_prev: Optional[NmfModel] = None

        self.records: list[FrameRecord] = []
        self.frame_times: list[float] = []
        self.ilrma_times: list[float] = []
        self.skipped_ticks = 0
        self.waiting_ticks = 0
        self.failed_ticks = 0
        self.repaired_bins = 0
        self.passthrough_frames = 0
        self.dropped_frames = 0

    # -- stream bookkeeping -------------------------------------------------

    def frame_time(self, j: int) -> float:
        """Stream time at which frame ``j`` is complete."""
        st = self.cfg.stft
        return (j * st.hop_len + st.window_len) / st.sample_rate

    @property
    def frames_ready(self) -> int:
        return max(0, self.cfg.stft.n_frames(self.ring.total) - self._next_frame)

    @property
    def audio_seconds(self) -> float:
        return self.ring.total / self.cfg.stft.sample_rate

    def push_samples(self, block) -> int:
        """Append PCM ``(n, n_mics)`` to the ring buffer; return the number of frames ready."""
        block = np.asarray(block, dtype=float)
        if block.ndim == 1 and self.cfg.n_mics == 1:
            block = block[:, None]
        if block.ndim != 2 or block.shape[1] != self.cfg.n_mics:
            raise ChannelMismatch(f"expected {self.cfg.n_mics} channels, got shape {block.shape}")
        if block.shape[0]:
            self.ring.write(block)
        return self.frames_ready

    # -- block worker ---------------------------------------------------------

    def _ilrma_job(self, x, prev: Optional[WSnapshot], tick: int) -> BlockResult:
        cfg = self.cfg
        variant = cfg.variant
        n_freq, n_frames, n_mic = x.shape
        scale = np.ones(n_freq)
        if cfg.normalize_block:
            # per-bin unit power so that mu and the floors mean the same at every level
            power = np.sqrt(np.mean(np.abs(x) ** 2, axis=(1, 2)))
            scale = np.maximum(power, 1e-8 * power.max(initial=0.0) + 1e-30)
        xn = x / scale[:, None, None]
        W_init = None
        if prev is not None:
            W_init = prev.W * scale[:, None, None]
        nmf_init = None
        if cfg.warm_start_nmf and self._nmf_prev is not None:
            T, V = self._nmf_prev.T, self._nmf_prev.V
            if T.shape[:2] == (n_mic, n_freq) and V.shape[2] == n_frames:
                shift = cfg.hops_per_tick
                fresh = 1.0 - np.random.default_rng((cfg.seed, tick)).random(V[:, :, :shift].shape)
                nmf_init = NmfModel(T.copy(), np.concatenate([V[:, :, shift:], fresh], axis=2))
        state, res = run_ilrma(
            xn, variant, self.prior, iters=cfg.ilrma_sweeps, W_init=W_init,
            n_basis=cfg.n_basis, mu=cfg.mu, nmf_init=nmf_init,
            rng=np.random.default_rng((cfg.seed, tick)), ref_mic=cfg.ref_mic,
        )
        self._nmf_prev = state.nmf
        return BlockResult(state.W / scale[:, None, None], res.chosen_target, state.nmf, state.stale)

    def _block_stft(self, end: int) -> Optional[np.ndarray]:
        """Spectra of the whole frames inside the most recent ``tau1`` seconds before ``end``."""
        st = self.cfg.stft
        start = max(self.ring.oldest, end - self.cfg.window_samples)
        j0 = -(-start // st.hop_len)
        j1 = (end - st.window_len) // st.hop_len + 1
        if j1 - j0 < 2:
            return None
        x = self._frames.get(j0, j1)
        if x is None:
            x = analyze(self.ring.read(j0 * st.hop_len, (j1 - 1) * st.hop_len + st.window_len), st)
        return x

    def _repair(self, W, target):
        """Replace bins with a degenerate noise SCM by the previous snapshot (or the prior)."""
        bad = rank_deficient_bins(W, target)
        if not np.any(bad):
            return W
        prev = self.slot.latest()
        if prev is not None and prev.target_index == target:
            fallback = prev.W
        elif self.prior is not None:
            fallback = self.prior.W_hat
        else:
            fallback = np.broadcast_to(np.eye(W.shape[-1], dtype=complex), W.shape)
        W = W.copy()
        W[bad] = fallback[bad]
        self.repaired_bins += int(np.count_nonzero(bad))
        logger.info("replaced %d rank-deficient bins", np.count_nonzero(bad))
        return W

    def _run_block(self, tick: int, x: Optional[np.ndarray], data_end: float):
        """Execute one block job on the spectra ``x``; returns (snapshot parts, seconds)."""
        t0 = time.perf_counter()
        snap = None
        try:
            if x is not None:
                res = self._runner(x, self.slot.latest(), tick)
                if res.stale:
                    raise ArithmeticError("block estimate flagged stale")
                W = res.W
                try:
                    fixed = derive_fixed(W, res.target_index, self.cfg.ref_mic)
                except RankDeficiencyViolation:
                    W = self._repair(W, res.target_index)
                    fixed = derive_fixed(W, res.target_index, self.cfg.ref_mic)
                snap = (W, res.target_index, fixed, data_end)
        except (ArithmeticError, SingularMatrix, RankDeficiencyViolation, ValueError) as exc:
            logger.warning("block job at tick %d failed (%s); keeping previous snapshot", tick, exc)
            snap = None
        return snap, time.perf_counter() - t0

    def _make_snapshot(self, parts, at: float) -> WSnapshot:
        W, target, fixed, data_end = parts
        return WSnapshot(W, target, fixed, self._epoch + 1, at, data_end)

    def _publish(self, snap: WSnapshot) -> None:
        self.slot.publish(snap)
        self._epoch = snap.epoch

    def _poll_pending(self, now: float) -> None:
        if self._pending is not None and self._pending.produced_at <= now + 1e-12:
            snap, self._pending = self._pending, None
            self._publish(snap)
        if self._future is not None and self._future[0].done():
            fut, _ = self._future
            self._future = None
            parts, elapsed = fut.result()
            self.ilrma_times.append(elapsed)
            if parts is None:
                self.failed_ticks += 1
            else:
                self._publish(self._make_snapshot(parts, now))

    def _busy(self, now: float) -> bool:
        if self.wall_clock:
            return self._future is not None
        return self._pending is not None and self._pending.produced_at > now + 1e-12

    def ilrma_tick(self, now: float) -> Optional[WSnapshot]:
        """Start the block job scheduled at stream time ``now``.

        On the stream clock the job runs immediately and its snapshot becomes
        visible at ``now`` plus the charged latency; that snapshot is returned.
        Returns None when the tick was skipped (worker busy), waited for more
        audio, failed, or was handed to the background thread.
        """
        if self.cfg.variant == "passthrough":
            return None
        self._poll_pending(now)
        if self._busy(now):
            self.skipped_ticks += 1
            return None
        available = min(self.ring.total, int(round(now * self.cfg.stft.sample_rate)))
        if available < self.cfg.min_samples:
            self.waiting_ticks += 1
            return None
        tick = int(round(now / self.cfg.tau3))
        # the block input is copied here, on the stream thread
        t0 = time.perf_counter()
        x = self._block_stft(available)
        gather = time.perf_counter() - t0
        data_end = available / self.cfg.stft.sample_rate
        if self.wall_clock:
            self._future = (self._pool.submit(self._run_block, tick, x, data_end), now)
            return None
        parts, elapsed = self._run_block(tick, x, data_end)
        elapsed += gather
        self.ilrma_times.append(elapsed)
        if parts is None:
            self.failed_ticks += 1
            return None
        latency = elapsed if self.cfg.ilrma_latency is None else self.cfg.ilrma_latency
        snap = self._make_snapshot(parts, now + latency)
        self._pending = snap
        self._poll_pending(now)
        return snap

    def _advance(self, now: float) -> None:
        """Run every block tick due by stream time ``now`` and publish finished jobs."""
        while self._next_tick * self.cfg.tau3 <= now + 1e-12:
            t = self._next_tick * self.cfg.tau3
            self._next_tick += 1
            self.ilrma_tick(t)
        self._poll_pending(now)

    # -- frame worker -----------------------------------------------------------

    def frame_tick(self) -> Optional[np.ndarray]:
        """Process the oldest unprocessed frame; return ``hop_len`` output samples."""
        if self.frames_ready == 0:
            return None
        st = self.cfg.stft
        j = self._next_frame
        start = j * st.hop_len
        if start < self.ring.oldest:
            skip = -(-(self.ring.oldest - start) // st.hop_len)
            self.dropped_frames += skip
            j += skip
            self._next_frame = j
            if self.frames_ready == 0:
                return None
            start = j * st.hop_len
        now = self.frame_time(j)
        t0 = time.perf_counter()
        frame = self.ring.read(start, start + st.window_len)
        x = np.fft.rfft(frame * st.window[:, None], axis=0)  # (I, M)
        self._frames.put(j, x)
        analysis = time.perf_counter() - t0
        self._advance(now)

        t0 = time.perf_counter() - analysis
        snap = self.slot.latest()
        if snap is None or self.cfg.variant == "passthrough":
            out = x[:, self.cfg.ref_mic]
            self.passthrough_frames += 1
            epoch, age = -1, 0.0
        else:
            out, self._carry = process_frame(x, snap.fixed, self._carry, self.cfg.rcscme)
            epoch, age = snap.epoch, now - snap.produced_at
        samples = self._ola.push(out)
        self.frame_times.append(time.perf_counter() - t0)
        self.records.append(FrameRecord(j, now, epoch, age))
        self._next_frame = j + 1
        return samples

    def step(self) -> np.ndarray:
        """Process every ready frame; return the concatenated output samples."""
        outs = []
        while self.frames_ready:
            if self.wall_clock:
                self._pace(self.frame_time(self._next_frame))
            out = self.frame_tick()
            if out is not None:
                outs.append(out)
        return np.concatenate(outs) if outs else np.zeros(0)

    def _pace(self, stream_time: float) -> None:
        if self._wall_start is None:
            self._wall_start = time.perf_counter() - stream_time
        delay = self._wall_start + stream_time - time.perf_counter()
        if delay > 0:
            time.sleep(delay)

    def flush(self) -> np.ndarray:
        """Remaining overlap-add tail after the last frame (window_len - hop_len samples)."""
        st = self.cfg.stft
        tail = [self._ola.push(np.zeros(st.n_freq, dtype=complex))
                for _ in range(st.window_len // st.hop_len - 1)]
        return np.concatenate(tail) if tail else np.zeros(0)

    def run(self, pcm, chunk: Optional[int] = None) -> np.ndarray:
        """Stream a whole recording through the pipeline.

        Returns a mono signal of the input's length; sample ``k`` of the output
        estimates the target image at sample ``k`` of the reference mic.
        """
        pcm = np.asarray(pcm, dtype=float)
        chunk = chunk or self.cfg.hop
        outs = []
        for s in range(0, pcm.shape[0], chunk):
            self.push_samples(pcm[s:s + chunk])
            outs.append(self.step())
        outs.append(self.flush())
        if self.wall_clock:
            self.close(wait=True)
        y = np.concatenate(outs)
        y = y[: pcm.shape[0]]
        return np.concatenate([y, np.zeros(pcm.shape[0] - y.size)])

    def close(self, wait: bool = True) -> None:
        if self._pool is not None:
            if wait and self._future is not None:
                _, elapsed = self._future[0].result()
                self.ilrma_times.append(elapsed)
                self._future = None
            self._pool.shutdown(wait=wait)
            self._pool = None

    # -- reporting ----------------------------------------------------------------

    def timing_report(self) -> dict:
        """Per-part processing time statistics (milliseconds) and the realtime factor."""
        if not self.frame_times:
            raise NotStarted("no frame has been processed")
        audio = self._next_frame * self.cfg.tau4
        compute = float(np.sum(self.frame_times) + np.sum(self.ilrma_times))
        return {
            "rcscme_part": _stats_ms(self.frame_times),
            "ilrma_part": _stats_ms(self.ilrma_times),
            "skipped_ticks": self.skipped_ticks,
            "waiting_ticks": self.waiting_ticks,
            "failed_ticks": self.failed_ticks,
            "passthrough_frames": self.passthrough_frames,
            "dropped_frames": self.dropped_frames,
            "repaired_bins": self.repaired_bins,
            "snapshots_published": self._epoch,
            "frames": len(self.frame_times),
            "audio_seconds": audio,
            "compute_seconds": compute,
            "realtime_factor": compute / audio if audio > 0 else None,
            "variant": self.cfg.variant,
        }
