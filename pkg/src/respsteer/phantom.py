"""Ground-truth motion of the breathing liver phantom.

The phantom carriage moves a soft liver replica in the superior-inferior
(SI) and anterior-posterior (AP) directions.  Its displacement follows a
rectified-sine waveform ``baseline + amplitude * |sin(pi*t/period)|**k``,
which is periodic in ``period`` for any exponent k >= 1 and reduces to the
common sin^2 respiratory approximation at the default k = 2.  A motion
timeline strings together regular-breathing segments and breath-holds
frozen at chosen phase fractions of the cycle.

A small lateral drift channel models the phantom being nudged sideways by
tool-tissue interaction while the needle is inside it; it is a seeded
Gaussian random walk so traces replay bit-identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

REGULAR_KIND = "regular"
BREATH_HOLD_KIND = "breath_hold"


class TimelineRangeError(ValueError):
    """Requested time lies outside the timeline extent."""


@dataclass(frozen=True)
class Phase:
    """Breathing phase label: regular breathing or breath-hold 1..3."""

    kind: str
    hold_index: int = 0

    def __post_init__(self):
        if self.kind not in (REGULAR_KIND, BREATH_HOLD_KIND):
            raise ValueError(f"unknown phase kind {self.kind!r}")
        if self.kind == BREATH_HOLD_KIND and self.hold_index < 1:
            raise ValueError("breath-hold phase needs a hold_index >= 1")

    @property
    def is_hold(self) -> bool:
        return self.kind == BREATH_HOLD_KIND


REGULAR = Phase(REGULAR_KIND)


def hold(index: int) -> Phase:
    return Phase(BREATH_HOLD_KIND, index)


@dataclass(frozen=True)
class BreathingProfile:
    """Waveform parameters of the phantom's two motion axes.

    Amplitudes and period are design parameters of the simulated phantom;
    displacement on each axis stays within ``baseline .. baseline+amplitude``.
    """

    amplitude_si: float = 12.0  # mm
    amplitude_ap: float = 5.0  # mm
    period: float = 4.0  # s
    waveform_exponent: float = 2.0  # dimensionless, >= 1
    baseline_offset_si: float = 0.0  # mm
    baseline_offset_ap: float = 0.0  # mm

    def __post_init__(self):
        if self.amplitude_si < 0 or self.amplitude_ap < 0:
            raise ValueError("amplitudes must be >= 0")
        if self.period <= 0:
            raise ValueError("period must be > 0")
        if self.waveform_exponent < 1:
            raise ValueError("waveform_exponent must be >= 1")

    def waveform(self, t: float) -> float:
        """Unit waveform value in [0, 1] at time t (periodic in `period`)."""
        return abs(math.sin(math.pi * t / self.period)) ** self.waveform_exponent

    def displacement(self, t: float) -> tuple[float, float]:
        """(d_si, d_ap) in mm for regular breathing at time t."""
        w = self.waveform(t)
        return (
            self.baseline_offset_si + self.amplitude_si * w,
            self.baseline_offset_ap + self.amplitude_ap * w,
        )


@dataclass(frozen=True)
class TimelineSegment:
    phase: Phase
    duration: float  # s

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("segment duration must be > 0")


@dataclass(frozen=True)
class RespiratoryTimeline:
    """Contiguous motion segments from t=0 plus the breath-hold fractions.

    ``hold_fractions[i-1]`` is the phase fraction (in [0, 1)) of the cycle
    at which breath-hold i freezes the phantom.
    """

    segments: tuple[TimelineSegment, ...]
    hold_fractions: tuple[float, ...] = (0.0, 0.5, 0.9)

    def __post_init__(self):
        if not self.segments:
            raise ValueError("timeline needs at least one segment")
        if len(set(self.hold_fractions)) != len(self.hold_fractions):
            raise ValueError("breath-hold fractions must be distinct")
        for f in self.hold_fractions:
            if not 0.0 <= f < 1.0:
                raise ValueError("breath-hold fractions must lie in [0, 1)")
        for seg in self.segments:
            if seg.phase.is_hold and seg.phase.hold_index > len(self.hold_fractions):
                raise ValueError(
                    f"segment references hold {seg.phase.hold_index} but only "
                    f"{len(self.hold_fractions)} fractions are configured"
                )

    @property
    def duration(self) -> float:
        return sum(seg.duration for seg in self.segments)

    def fraction_for(self, hold_index: int) -> float:
        return self.hold_fractions[hold_index - 1]

    def segment_at(self, t: float) -> TimelineSegment:
        """Segment containing time t; the final boundary is inclusive."""
        if t < 0:
            raise TimelineRangeError(f"t={t} is before the timeline start")
        elapsed = 0.0
        for seg in self.segments:
            elapsed += seg.duration
            if t < elapsed:
                return seg
        if t <= self.duration + 1e-12:
            return self.segments[-1]
        raise TimelineRangeError(
            f"t={t} is beyond the timeline extent ({self.duration} s)"
        )


def default_training_timeline() -> RespiratoryTimeline:
    """30 s acquisition: 12 s regular, three 5 s holds, 3 s regular tail.

    The trailing regular segment pads the acquisition to 30 s and provides
    the abrupt hold-to-regular transition used as a synchronization marker.
    """
    return RespiratoryTimeline(
        segments=(
            TimelineSegment(REGULAR, 12.0),
            TimelineSegment(hold(1), 5.0),
            TimelineSegment(hold(2), 5.0),
            TimelineSegment(hold(3), 5.0),
            TimelineSegment(REGULAR, 3.0),
        )
    )


@dataclass(frozen=True)
class PhantomState:
    """Ground-truth phantom displacement at one instant."""

    t: float  # s
    d_si: float  # mm
    d_ap: float  # mm
    d_lat: float = 0.0  # mm, lateral interaction drift
    phase: Phase = REGULAR


@dataclass(frozen=True)
class TargetSpec:
    """Spherical radiopaque target embedded in the phantom."""

    rest_position: tuple[float, float, float] = (0.0, 0.0, 150.0)  # mm
    diameter: float = 3.0  # mm

    def __post_init__(self):
        if self.diameter <= 0:
            raise ValueError("target diameter must be > 0")


@dataclass(frozen=True)
class AxisMap:
    """Assignment of the phantom's SI/AP/lateral motion to world axes.

    Defaults put SI on world x, lateral drift on world y and AP on world z,
    so the needle (axial along world z) is steered in x/z and the drift
    axis stays uncompensated.
    """

    si: str = "x"
    lat: str = "y"
    ap: str = "z"

    _INDEX = {"x": 0, "y": 1, "z": 2}

    def __post_init__(self):
        axes = (self.si, self.lat, self.ap)
        if sorted(axes) != ["x", "y", "z"]:
            raise ValueError(f"axis map must be a permutation of x/y/z, got {axes}")

    def world_displacement(self, state: PhantomState) -> np.ndarray:
        out = np.zeros(3)
        out[self._INDEX[self.si]] = state.d_si
        out[self._INDEX[self.lat]] = state.d_lat
        out[self._INDEX[self.ap]] = state.d_ap
        return out


DEFAULT_AXIS_MAP = AxisMap()


def sample_phantom(
    profile: BreathingProfile, timeline: RespiratoryTimeline, t: float
) -> PhantomState:
    """Ground-truth phantom state at time t within the timeline.

    Regular segments evaluate the waveform on the global clock, so the
    re-entry after a hold is generally discontinuous -- exactly the abrupt
    phase change the surrogate/ground-truth synchronization relies on.
    Breath-hold segments freeze the displacement at the configured phase
    fraction of the cycle.
    """
    seg = timeline.segment_at(t)
    if seg.phase.is_hold:
        tau = timeline.fraction_for(seg.phase.hold_index) * profile.period
    else:
        tau = t
    d_si, d_ap = profile.displacement(tau)
    return PhantomState(t=t, d_si=d_si, d_ap=d_ap, d_lat=0.0, phase=seg.phase)


def hold_state(
    profile: BreathingProfile,
    timeline: RespiratoryTimeline,
    hold_index: int,
    t: float,
    d_lat: float = 0.0,
) -> PhantomState:
    """Phantom frozen at breath-hold `hold_index`, outside any timeline."""
    tau = timeline.fraction_for(hold_index) * profile.period
    d_si, d_ap = profile.displacement(tau)
    return PhantomState(t=t, d_si=d_si, d_ap=d_ap, d_lat=d_lat, phase=hold(hold_index))


def regular_state(profile: BreathingProfile, t: float, d_lat: float = 0.0) -> PhantomState:
    """Phantom in free regular breathing at time t, outside any timeline."""
    d_si, d_ap = profile.displacement(t)
    return PhantomState(t=t, d_si=d_si, d_ap=d_ap, d_lat=d_lat, phase=REGULAR)


def target_world_position(
    state: PhantomState, target: TargetSpec, axis_map: AxisMap = DEFAULT_AXIS_MAP
) -> np.ndarray:
    """World position of the target center: rest position rigidly translated
    by the current (lat, si, ap) displacement mapped onto the world axes."""
    return np.asarray(target.rest_position, dtype=float) + axis_map.world_displacement(state)


def apply_interaction_drift(
    state: PhantomState,
    drift_rate: float,
    needle_engaged: bool,
    dt: float,
    rng: np.random.Generator,
) -> PhantomState:
    """Accrue one lateral random-walk step while the needle sits in tissue.

    The step is Gaussian with standard deviation ``drift_rate * dt``; with
    the needle disengaged or a zero rate the state passes through unchanged
    (and the random stream is not consumed).
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if not needle_engaged or drift_rate <= 0:
        return state
    step = rng.normal(0.0, drift_rate * dt)
    return replace(state, d_lat=state.d_lat + step)
