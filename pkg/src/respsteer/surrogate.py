"""Simulated skin-mounted electromagnetic sensor and trace alignment.

The sensor reports displacement on its y and z axes.  Each channel is an
affine map of the phantom's AP/SI motion with a configurable cross-axis
leak, additive Gaussian noise and a pure acquisition delay, which is the
simplest model that still makes the downstream regression non-trivial.

``synchronize`` aligns a surrogate trace with a ground-truth trace the way
the physical rig does implicitly: abrupt respiratory phase changes leave
sharp features in both traces, and the lag that maximizes the normalized
cross-correlation of their first-difference magnitudes is taken as the
clock offset.  Both traces are then resampled onto the ground-truth clock.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .phantom import (
    BreathingProfile,
    Phase,
    PhantomState,
    RespiratoryTimeline,
    sample_phantom,
)


class SynchronizationError(RuntimeError):
    """The traces carry no usable phase-change marker."""


@dataclass(frozen=True)
class SurrogateSample:
    t: float  # s
    s_y: float  # mm, sensor y axis (tracks AP)
    s_z: float  # mm, sensor z axis (tracks SI)


@dataclass(frozen=True)
class GroundTruthSample:
    t: float  # s
    d_si: float  # mm
    d_ap: float  # mm
    phase: Phase


@dataclass(frozen=True)
class SensorConfig:
    gain_y: float = 1.0
    gain_z: float = 1.0
    crosstalk: float = 0.05  # fraction of the other axis leaking in, [0, 1)
    noise_sigma: float = 0.2  # mm
    latency: float = 0.0  # s
    sample_rate: float = 40.0  # Hz

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.latency < 0:
            raise ValueError("latency must be >= 0")
        if not 0.0 <= self.crosstalk < 1.0:
            raise ValueError("crosstalk must lie in [0, 1)")


def read_sensor(
    state: PhantomState, cfg: SensorConfig, rng: np.random.Generator | None = None
) -> SurrogateSample:
    """One sensor reading of the given phantom state.

    s_y = gain_y*d_ap + crosstalk*d_si + noise
    s_z = gain_z*d_si + crosstalk*d_ap + noise

    Latency is the caller's concern: pass the phantom state at ``t - latency``
    (see ``acquire_surrogate_trace``).
    """
    n_y = n_z = 0.0
    if rng is not None and cfg.noise_sigma > 0:
        n_y = rng.normal(0.0, cfg.noise_sigma)
        n_z = rng.normal(0.0, cfg.noise_sigma)
    s_y = cfg.gain_y * state.d_ap + cfg.crosstalk * state.d_si + n_y
    s_z = cfg.gain_z * state.d_si + cfg.crosstalk * state.d_ap + n_z
    return SurrogateSample(t=state.t, s_y=s_y, s_z=s_z)


def acquire_surrogate_trace(
    profile: BreathingProfile,
    timeline: RespiratoryTimeline,
    cfg: SensorConfig,
    duration: float,
    rng: np.random.Generator | None = None,
    t_start: float = 0.0,
) -> list[SurrogateSample]:
    """Sample the sensor at cfg.sample_rate for `duration` seconds.

    Yields floor(duration * sample_rate) + 1 samples (both endpoints).
    A sample nominally taken at t reads the phantom at t - latency,
    clamped at the timeline start.
    """
    n = int(np.floor(duration * cfg.sample_rate + 1e-9)) + 1
    out = []
    for i in range(n):
        t = t_start + i / cfg.sample_rate
        t_read = max(t - cfg.latency, t_start)
        state = sample_phantom(profile, timeline, min(t_read - t_start, timeline.duration))
        sample = read_sensor(state, cfg, rng)
        out.append(SurrogateSample(t=t, s_y=sample.s_y, s_z=sample.s_z))
    return out


def acquire_ground_truth_trace(
    profile: BreathingProfile,
    timeline: RespiratoryTimeline,
    rate: float = 15.0,
    t_start: float = 0.0,
) -> list[GroundTruthSample]:
    """Sample the true target displacement at `rate` over the full timeline."""
    n = int(np.floor(timeline.duration * rate + 1e-9)) + 1
    out = []
    for i in range(n):
        tau = i / rate
        state = sample_phantom(profile, timeline, min(tau, timeline.duration))
        out.append(
            GroundTruthSample(
                t=t_start + tau, d_si=state.d_si, d_ap=state.d_ap, phase=state.phase
            )
        )
    return out


@dataclass(frozen=True)
class TrainingPair:
    """Surrogate and ground truth on a common clock after alignment.

    All arrays share the ground-truth sampling grid; ``phases`` carries the
    breathing phase of each sample so the model bank can split regular
    breathing from breath-holds.
    """

    t: np.ndarray
    s_y: np.ndarray
    s_z: np.ndarray
    d_si: np.ndarray
    d_ap: np.ndarray
    phases: tuple[Phase, ...]
    alignment_offset: float  # s, how far the ground-truth clock lags the surrogate

    def __post_init__(self):
        if self.t.size < 2 or self.t[-1] - self.t[0] < 1.0:
            raise SynchronizationError(
                "aligned traces overlap for less than 1 s of common window"
            )


def _diff_magnitude(*channels: np.ndarray) -> np.ndarray:
    """Magnitude of the per-sample first-difference vector."""
    stacked = np.vstack([np.diff(c) for c in channels])
    return np.sqrt((stacked**2).sum(axis=0))


def synchronize(
    surrogate_trace: list[SurrogateSample],
    ground_truth_trace: list[GroundTruthSample],
    search_window: float = 1.0,
    resolution: float = 0.001,
) -> TrainingPair:
    """Align a surrogate trace with a ground-truth trace.

    The offset is the lag, within +/-`search_window` at `resolution` steps,
    that maximizes the normalized cross-correlation of the two traces'
    first-difference magnitude signals.  A positive offset means the
    ground-truth clock lags the surrogate clock.  Both traces are then
    linearly resampled onto the ground-truth sampling grid.

    Raises SynchronizationError when either trace is flat (no transition
    to lock onto) or the aligned overlap is shorter than 1 s.
    """
    if len(surrogate_trace) < 3 or len(ground_truth_trace) < 3:
        raise SynchronizationError("traces too short to synchronize")

    st = np.array([s.t for s in surrogate_trace])
    sy = np.array([s.s_y for s in surrogate_trace])
    sz = np.array([s.s_z for s in surrogate_trace])
    gt = np.array([g.t for g in ground_truth_trace])
    gsi = np.array([g.d_si for g in ground_truth_trace])
    gap = np.array([g.d_ap for g in ground_truth_trace])

    s_mag = _diff_magnitude(sy, sz)
    g_mag = _diff_magnitude(gsi, gap)
    if s_mag.max(initial=0.0) < 1e-9 or g_mag.max(initial=0.0) < 1e-9:
        raise SynchronizationError("flat trace: no phase transition to align on")

    # Reference window on the ground-truth clock, trimmed by the search
    # window so every candidate lag stays inside the surrogate trace.  Both
    # difference signals are formed on this same clock (the surrogate is
    # resampled per candidate lag), so a phase jump quantizes into the same
    # sampling window on both sides and cannot bias the lag estimate.
    t0 = max(gt[0], st[0]) + search_window
    t1 = min(gt[-1], st[-1]) - search_window
    ref_mask = (gt >= t0 - 1e-12) & (gt <= t1 + 1e-12)
    ref_t = gt[ref_mask]
    if ref_t.size < 3 or ref_t[-1] - ref_t[0] < 1.0:
        raise SynchronizationError("traces too short for the alignment search")
    a = np.hypot(np.diff(gsi[ref_mask]), np.diff(gap[ref_mask]))

    n_lag = int(round(search_window / resolution))
    shifts = resolution * np.arange(-n_lag, n_lag + 1)
    times = (ref_t[None, :] + shifts[:, None]).ravel()
    sy_m = np.interp(times, st, sy).reshape(shifts.size, ref_t.size)
    sz_m = np.interp(times, st, sz).reshape(shifts.size, ref_t.size)
    b = np.hypot(np.diff(sy_m, axis=1), np.diff(sz_m, axis=1))

    a0 = a - a.mean()
    a_norm = float(np.sqrt((a0**2).sum()))
    b0 = b - b.mean(axis=1, keepdims=True)
    b_norm = np.sqrt((b0**2).sum(axis=1))
    denom = a_norm * b_norm
    with np.errstate(invalid="ignore", divide="ignore"):
        ncc = np.where(denom > 1e-15, (b0 @ a0) / denom, -np.inf)
    if not np.isfinite(ncc).any():
        raise SynchronizationError("flat trace: correlation search degenerate")

    # Row j holds the surrogate evaluated at ref_t + shift_j; a match there
    # means gt(t) ~ surrogate(t + shift_j).
    delta = float(shifts[int(np.argmax(ncc))])
    offset = -delta

    # Resample onto the ground-truth grid over the aligned overlap.
    lo = max(gt[0], st[0] + offset)
    hi = min(gt[-1], st[-1] + offset)
    keep = (gt >= lo - 1e-12) & (gt <= hi + 1e-12)
    tt = gt[keep]
    phases = tuple(
        g.phase for g, k in zip(ground_truth_trace, keep) if k
    )
    return TrainingPair(
        t=tt,
        s_y=np.interp(tt - offset, st, sy),
        s_z=np.interp(tt - offset, st, sz),
        d_si=gsi[keep],
        d_ap=gap[keep],
        phases=phases,
        alignment_offset=offset,
    )


def write_surrogate_csv(trace: list[SurrogateSample], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "s_y", "s_z"])
        for s in trace:
            writer.writerow([repr(s.t), repr(s.s_y), repr(s.s_z)])


def read_surrogate_csv(path: str | Path) -> list[SurrogateSample]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            SurrogateSample(t=float(r["t"]), s_y=float(r["s_y"]), s_z=float(r["s_z"]))
            for r in reader
        ]


def write_ground_truth_csv(trace: list[GroundTruthSample], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "d_si", "d_ap"])
        for g in trace:
            writer.writerow([repr(g.t), repr(g.d_si), repr(g.d_ap)])
