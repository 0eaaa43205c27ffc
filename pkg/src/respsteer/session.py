"""End-to-end insertion protocol: training, compensation, teleoperated
insertion and validation.

One session walks the same sequence for each planned insertion: register
the needle against the target, retract to a safe standoff, train the
correspondence models from a synchronized surrogate/ground-truth
acquisition, compensate the breathing motion live, then freeze the phantom
at a breath-hold while the operator (scripted or live) drives the needle
in with haptic feedback.  Validation reports the per-axis tip-to-target
errors and their Euclidean norm.

The engine runs on a fixed-step simulated clock (control ticks while
training and compensating, 1 kHz haptic ticks while inserting), threads
explicit seeded random streams for sensor noise, interaction drift and the
operator, and is therefore bit-reproducible for scripted runs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import haptics as hp
from . import model as md
from . import phantom as ph
from . import steering as st
from . import surrogate as sg

HAPTIC_DT = 0.001  # s, simulated haptic tick
SNAPSHOT_RATE = 60.0  # Hz, bridge publish cadence (simulated time)
COMMAND_STALE_S = 0.25  # live commands older than this are dropped

STEP_TRAINING = "training"
STEP_COMPENSATING = "compensating"
STEP_INSERTING = "inserting"
STEP_DONE = "done"


class ScenarioError(ValueError):
    """Scenario document fails validation; message carries the field path."""


class SessionStateError(RuntimeError):
    """Protocol step requested out of order."""


# --------------------------------------------------------------------------
# Scenario configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class OperatorSpec:
    kind: str = "scripted"  # "scripted" | "live"
    profile: str = "ideal"

    def __post_init__(self):
        if self.kind not in ("scripted", "live"):
            raise ScenarioError(f"operator.kind: expected scripted|live, got {self.kind!r}")


@dataclass(frozen=True)
class InsertionPlan:
    hold_index: int
    target_rest: tuple[float, float, float] | None = None  # None: keep previous


@dataclass(frozen=True)
class DriftSettings:
    enabled: bool = False
    rate: float = 12.0  # mm/s random-walk scale while engaged


@dataclass(frozen=True)
class Scenario:
    breathing: ph.BreathingProfile = ph.BreathingProfile()
    timeline: ph.RespiratoryTimeline = field(default_factory=ph.default_training_timeline)
    sensor: sg.SensorConfig = sg.SensorConfig()
    model_order: int = 2
    robot: st.RobotConfig = st.RobotConfig()
    haptics: hp.HapticConfig = hp.HapticConfig()
    target: ph.TargetSpec = ph.TargetSpec()
    axis_map: ph.AxisMap = ph.DEFAULT_AXIS_MAP
    registration_error: tuple[float, float, float] = (0.5, 0.5, 0.5)  # mm, needle frame
    retraction_distance: float = 40.0  # mm
    insertion_depth: float = 30.0  # mm from insertion point to target plane
    drift: DriftSettings = DriftSettings()
    operator: OperatorSpec = OperatorSpec()
    seed: int = 1234
    compensation_duration: float = 10.0  # s of live compensation per insertion
    ground_truth_rate: float = 15.0  # Hz fluoroscopic frame rate
    insertions: tuple[InsertionPlan, ...] = (
        InsertionPlan(1), InsertionPlan(2), InsertionPlan(3),
        InsertionPlan(1, target_rest=(5.0, -4.0, 160.0)), InsertionPlan(2),
    )
    max_insertion_duration: float = 60.0  # s, scripted safety stop
    live_timeout: float = 60.0  # s without live commands before aborting

    def __post_init__(self):
        if self.retraction_distance <= 0:
            raise ScenarioError("retraction_distance_mm: must be > 0")
        if self.insertion_depth <= 0:
            raise ScenarioError("insertion_depth_mm: must be > 0")
        if not self.insertions:
            raise ScenarioError("insertions: need at least one insertion")
        n_holds = len(self.timeline.hold_fractions)
        for i, plan in enumerate(self.insertions):
            if not 1 <= plan.hold_index <= n_holds:
                raise ScenarioError(
                    f"insertions[{i}].hold_index: must be in 1..{n_holds}"
                )

    def to_dict(self) -> dict:
        b, s = self.breathing, self.sensor
        h, r = self.haptics, self.robot
        return {
            "seed": self.seed,
            "breathing": {
                "amplitude_si_mm": b.amplitude_si,
                "amplitude_ap_mm": b.amplitude_ap,
                "period_s": b.period,
                "waveform_exponent": b.waveform_exponent,
                "baseline_offset_si_mm": b.baseline_offset_si,
                "baseline_offset_ap_mm": b.baseline_offset_ap,
            },
            "timeline": {
                "segments": [
                    {
                        "phase": seg.phase.kind,
                        **({"hold_index": seg.phase.hold_index} if seg.phase.is_hold else {}),
                        "duration_s": seg.duration,
                    }
                    for seg in self.timeline.segments
                ],
                "hold_fractions": list(self.timeline.hold_fractions),
            },
            "sensor": {
                "gain_y": s.gain_y,
                "gain_z": s.gain_z,
                "crosstalk": s.crosstalk,
                "noise_sigma_mm": s.noise_sigma,
                "latency_s": s.latency,
                "sample_rate_hz": s.sample_rate,
            },
            "model": {"order": self.model_order},
            "robot": {
                "max_speed_mm_s": r.max_speed,
                "tracking_bandwidth_per_s": r.tracking_bandwidth,
                "control_period_s": r.control_period,
            },
            "haptics": {
                "damping_b_n_s_mm2": h.damping_b,
                "offset_o_mm": h.offset_o,
                "wall_kp_n_mm": h.wall_kp,
                "wall_kd_n_s_mm": h.wall_kd,
                "force_cap_n": h.force_cap,
                "idle_hold_kp_n_mm": h.idle_hold_kp,
                "motion_scale": h.motion_scale,
            },
            "target": {
                "rest_position_mm": list(self.target.rest_position),
                "diameter_mm": self.target.diameter,
            },
            "axes": {"si": self.axis_map.si, "lat": self.axis_map.lat, "ap": self.axis_map.ap},
            "registration_error_mm": list(self.registration_error),
            "retraction_distance_mm": self.retraction_distance,
            "insertion_depth_mm": self.insertion_depth,
            "drift": {"enabled": self.drift.enabled, "rate_mm_s": self.drift.rate},
            "operator": {"kind": self.operator.kind, "profile": self.operator.profile},
            "compensation_duration_s": self.compensation_duration,
            "ground_truth_rate_hz": self.ground_truth_rate,
            "insertions": [
                {
                    "hold_index": p.hold_index,
                    **(
                        {"target_rest_position_mm": list(p.target_rest)}
                        if p.target_rest is not None
                        else {}
                    ),
                }
                for p in self.insertions
            ],
            "max_insertion_duration_s": self.max_insertion_duration,
            "live_timeout_s": self.live_timeout,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        return _scenario_from_dict(data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"scenario is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


_REQUIRED = object()


def _want(data: dict, key: str, types, path: str, default=_REQUIRED):
    if not isinstance(data, dict):
        raise ScenarioError(f"{path}: expected an object")
    if key not in data:
        if default is _REQUIRED:
            raise ScenarioError(f"{path}.{key}: required field is missing")
        return default
    value = data[key]
    if types is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, types) or isinstance(value, bool) and types is not bool:
        raise ScenarioError(
            f"{path}.{key}: expected {getattr(types, '__name__', types)}, "
            f"got {type(value).__name__}"
        )
    return value


def _point3(data: dict, key: str, path: str, default=None):
    raw = _want(data, key, list, path, default=None if default is None else list(default))
    if raw is None:
        return default
    if len(raw) != 3 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw):
        raise ScenarioError(f"{path}.{key}: expected a list of 3 numbers")
    return tuple(float(v) for v in raw)


def _scenario_from_dict(data: dict) -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioError("scenario: expected a JSON object")
    defaults = Scenario()

    def section(name):
        sec = _want(data, name, dict, "scenario", default={})
        return sec

    b = section("breathing")
    breathing = ph.BreathingProfile(
        amplitude_si=_want(b, "amplitude_si_mm", float, "breathing", 12.0),
        amplitude_ap=_want(b, "amplitude_ap_mm", float, "breathing", 5.0),
        period=_want(b, "period_s", float, "breathing", 4.0),
        waveform_exponent=_want(b, "waveform_exponent", float, "breathing", 2.0),
        baseline_offset_si=_want(b, "baseline_offset_si_mm", float, "breathing", 0.0),
        baseline_offset_ap=_want(b, "baseline_offset_ap_mm", float, "breathing", 0.0),
    )

    tl = section("timeline")
    if tl:
        fractions = _want(tl, "hold_fractions", list, "timeline", [0.0, 0.5, 0.9])
        segments = []
        raw_segments = _want(tl, "segments", list, "timeline")
        for i, seg in enumerate(raw_segments):
            kind = _want(seg, "phase", str, f"timeline.segments[{i}]")
            duration = _want(seg, "duration_s", float, f"timeline.segments[{i}]")
            if kind == ph.REGULAR_KIND:
                phase = ph.REGULAR
            elif kind == ph.BREATH_HOLD_KIND:
                phase = ph.hold(_want(seg, "hold_index", int, f"timeline.segments[{i}]"))
            else:
                raise ScenarioError(
                    f"timeline.segments[{i}].phase: expected regular|breath_hold, got {kind!r}"
                )
            try:
                segments.append(ph.TimelineSegment(phase, duration))
            except ValueError as exc:
                raise ScenarioError(f"timeline.segments[{i}]: {exc}") from exc
        try:
            timeline = ph.RespiratoryTimeline(tuple(segments), tuple(float(f) for f in fractions))
        except ValueError as exc:
            raise ScenarioError(f"timeline: {exc}") from exc
    else:
        timeline = ph.default_training_timeline()

    s = section("sensor")
    try:
        sensor = sg.SensorConfig(
            gain_y=_want(s, "gain_y", float, "sensor", 1.0),
            gain_z=_want(s, "gain_z", float, "sensor", 1.0),
            crosstalk=_want(s, "crosstalk", float, "sensor", 0.05),
            noise_sigma=_want(s, "noise_sigma_mm", float, "sensor", 0.2),
            latency=_want(s, "latency_s", float, "sensor", 0.0),
            sample_rate=_want(s, "sample_rate_hz", float, "sensor", 40.0),
        )
    except ValueError as exc:
        raise ScenarioError(f"sensor: {exc}") from exc

    m = section("model")
    order = _want(m, "order", int, "model", 2)
    if not 0 <= order <= 5:
        raise ScenarioError("model.order: must be in 0..5")

    r = section("robot")
    try:
        robot = st.RobotConfig(
            max_speed=_want(r, "max_speed_mm_s", float, "robot", 100.0),
            tracking_bandwidth=_want(r, "tracking_bandwidth_per_s", float, "robot", 8.0),
            control_period=_want(r, "control_period_s", float, "robot", 0.01),
        )
    except ValueError as exc:
        raise ScenarioError(f"robot: {exc}") from exc

    h = section("haptics")
    try:
        haptic = hp.HapticConfig(
            damping_b=_want(h, "damping_b_n_s_mm2", float, "haptics", 0.01),
            offset_o=_want(h, "offset_o_mm", float, "haptics", 40.0),
            wall_kp=_want(h, "wall_kp_n_mm", float, "haptics", 2.0),
            wall_kd=_want(h, "wall_kd_n_s_mm", float, "haptics", 0.05),
            force_cap=_want(h, "force_cap_n", float, "haptics", 5.0),
            idle_hold_kp=_want(h, "idle_hold_kp_n_mm", float, "haptics", 3.0),
            motion_scale=_want(h, "motion_scale", float, "haptics", 1.0),
        )
    except ValueError as exc:
        raise ScenarioError(f"haptics: {exc}") from exc

    tg = section("target")
    try:
        target = ph.TargetSpec(
            rest_position=_point3(tg, "rest_position_mm", "target", (0.0, 0.0, 150.0)),
            diameter=_want(tg, "diameter_mm", float, "target", 3.0),
        )
    except ValueError as exc:
        raise ScenarioError(f"target: {exc}") from exc

    ax = section("axes")
    try:
        axis_map = ph.AxisMap(
            si=_want(ax, "si", str, "axes", "x"),
            lat=_want(ax, "lat", str, "axes", "y"),
            ap=_want(ax, "ap", str, "axes", "z"),
        )
    except ValueError as exc:
        raise ScenarioError(f"axes: {exc}") from exc

    dr = section("drift")
    drift = DriftSettings(
        enabled=_want(dr, "enabled", bool, "drift", False),
        rate=_want(dr, "rate_mm_s", float, "drift", 12.0),
    )

    op = section("operator")
    operator = OperatorSpec(
        kind=_want(op, "kind", str, "operator", "scripted"),
        profile=_want(op, "profile", str, "operator", "ideal"),
    )
    if operator.kind == "scripted" and operator.profile not in OPERATOR_PROFILES:
        raise ScenarioError(
            f"operator.profile: unknown profile {operator.profile!r}; "
            f"expected one of {sorted(OPERATOR_PROFILES)}"
        )

    plans = []
    raw_plans = _want(data, "insertions", list, "scenario", None)
    if raw_plans is None:
        plans = list(defaults.insertions)
    else:
        for i, p in enumerate(raw_plans):
            plans.append(
                InsertionPlan(
                    hold_index=_want(p, "hold_index", int, f"insertions[{i}]"),
                    target_rest=_point3(p, "target_rest_position_mm", f"insertions[{i}]"),
                )
            )

    try:
        return Scenario(
            breathing=breathing,
            timeline=timeline,
            sensor=sensor,
            model_order=order,
            robot=robot,
            haptics=haptic,
            target=target,
            axis_map=axis_map,
            registration_error=_point3(data, "registration_error_mm", "scenario", (0.5, 0.5, 0.5)),
            retraction_distance=_want(data, "retraction_distance_mm", float, "scenario", 40.0),
            insertion_depth=_want(data, "insertion_depth_mm", float, "scenario", 30.0),
            drift=drift,
            operator=operator,
            seed=_want(data, "seed", int, "scenario", 1234),
            compensation_duration=_want(data, "compensation_duration_s", float, "scenario", 10.0),
            ground_truth_rate=_want(data, "ground_truth_rate_hz", float, "scenario", 15.0),
            insertions=tuple(plans),
            max_insertion_duration=_want(data, "max_insertion_duration_s", float, "scenario", 60.0),
            live_timeout=_want(data, "live_timeout_s", float, "scenario", 60.0),
        )
    except ScenarioError:
        raise
    except ValueError as exc:
        raise ScenarioError(f"scenario: {exc}") from exc


# --------------------------------------------------------------------------
# Scripted operators
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class OperatorAction:
    force: float = 0.0  # N applied by the hand along the insertion axis
    engaged: bool = True
    clamp_still: bool = False  # grip the handle without moving it


class ScriptedOperator:
    """Deterministic stand-in for the human at the haptic device."""

    profile_id = "base"
    settle_speed = 0.005  # mm/s
    settle_ticks = 300

    def __init__(self, rng: np.random.Generator | None = None):
        self.rng = rng
        self.wall_touched = False
        self._quiet = 0

    def begin(self, travel: float) -> None:
        self.travel = travel
        self.wall_touched = False
        self._quiet = 0

    def action(self, t: float, distance: float, handle: hp.HandleState) -> OperatorAction:
        raise NotImplementedError

    def observe(self, distance: float, handle: hp.HandleState) -> None:
        if distance <= 0:
            self.wall_touched = True
        if self.wall_touched and abs(handle.axial_velocity) < self.settle_speed:
            self._quiet += 1
        else:
            self._quiet = 0

    def finished(self) -> bool:
        return self.wall_touched and self._quiet >= self.settle_ticks


class _VelocityServo(ScriptedOperator):
    """Operator model: a P-controller pushing toward a distance-shaped speed.

    The gain keeps the 1 kHz discrete velocity loop stable:
    (kf + friction) / mass * dt must stay well under 2.
    """

    v_max = 8.0  # mm/s nominal insertion speed
    d_slow = 15.0  # mm, deceleration starts here
    v_floor_frac = 0.1
    kf = 0.25  # N per mm/s of speed error
    f_max = 4.0  # N, strongest push the hand applies

    def desired_speed(self, distance: float) -> float:
        if distance <= 0:
            return 0.0
        frac = min(max(distance / self.d_slow, self.v_floor_frac), 1.0)
        return self.v_max * frac

    def action(self, t, distance, handle):
        v_err = self.desired_speed(distance) - handle.axial_velocity
        force = min(max(self.kf * v_err, -self.f_max), self.f_max)
        return OperatorAction(force=force)


class IdealOperator(_VelocityServo):
    """Steady insertion, decelerating with the rising feedback, easing off
    at the wall so the needle settles on the target plane."""

    profile_id = "ideal"


class OvershooterOperator(_VelocityServo):
    """Pushes hard through the wall before backing off to the target."""

    profile_id = "overshooter"
    push_force = 4.0
    overshoot_depth = 2.0  # mm penetration before letting go

    def __init__(self, rng=None):
        super().__init__(rng)
        self._released = False

    def action(self, t, distance, handle):
        if not self._released and distance > -self.overshoot_depth:
            return OperatorAction(force=self.push_force)
        self._released = True
        return OperatorAction(force=0.0)


class HesitantOperator(_VelocityServo):
    """Stop-and-go insertion: pushes, then grips the handle still."""

    profile_id = "hesitant"
    push_s = 1.2
    pause_s = 0.8

    def action(self, t, distance, handle):
        if self.wall_touched:
            return OperatorAction(force=0.0)
        cycle = t % (self.push_s + self.pause_s)
        if cycle < self.push_s:
            return super().action(t, distance, handle)
        return OperatorAction(force=0.0, clamp_still=True)


class ConstantPushOperator(ScriptedOperator):
    """Holds a constant force against the wall; used to probe the wall's
    static equilibrium (penetration settles at force / wall_kp)."""

    profile_id = "constant_push"
    settle_speed = 0.001
    settle_ticks = 500

    def __init__(self, rng=None, force: float = 1.0):
        super().__init__(rng)
        self.force = force

    def action(self, t, distance, handle):
        return OperatorAction(force=self.force)


OPERATOR_PROFILES = {
    "ideal": IdealOperator,
    "overshooter": OvershooterOperator,
    "hesitant": HesitantOperator,
    "constant_push": ConstantPushOperator,
}


def scripted_operator(
    profile_id: str, rng: np.random.Generator | None = None, **params
) -> ScriptedOperator:
    try:
        cls = OPERATOR_PROFILES[profile_id]
    except KeyError:
        raise ValueError(
            f"unknown operator profile {profile_id!r}; "
            f"expected one of {sorted(OPERATOR_PROFILES)}"
        ) from None
    return cls(rng, **params)


# --------------------------------------------------------------------------
# Validation metrics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class InsertionError:
    """Per-axis absolute tip-to-target errors and their Euclidean norm."""

    eps_x: float
    eps_y: float
    eps_z: float
    euclidean: float
    surface_distance: float = 0.0

    def __post_init__(self):
        expected = math.sqrt(self.eps_x**2 + self.eps_y**2 + self.eps_z**2)
        if abs(expected - self.euclidean) > 0.01:
            raise ValueError(
                f"euclidean {self.euclidean} inconsistent with eps triple (want {expected})"
            )

    @classmethod
    def from_eps(cls, eps_x, eps_y, eps_z, diameter: float = 0.0) -> "InsertionError":
        norm = math.sqrt(eps_x**2 + eps_y**2 + eps_z**2)
        return cls(
            eps_x=float(eps_x), eps_y=float(eps_y), eps_z=float(eps_z),
            euclidean=norm, surface_distance=max(0.0, norm - diameter / 2.0),
        )


def validate_insertion(
    needle_tip,
    target: ph.TargetSpec,
    state: ph.PhantomState,
    axis_map: ph.AxisMap = ph.DEFAULT_AXIS_MAP,
) -> InsertionError:
    """Tip-to-target error at the end of an insertion.

    Per-axis values are absolute distances to the target center; the
    surface distance additionally subtracts the target radius (floored at
    zero) to sidestep the center-versus-circumference ambiguity.
    """
    center = ph.target_world_position(state, target, axis_map)
    eps = np.abs(np.asarray(needle_tip, dtype=float) - center)
    return InsertionError.from_eps(eps[0], eps[1], eps[2], diameter=target.diameter)


def summarize(errors: list[InsertionError]) -> dict:
    """Overall row: mean and population standard deviation per column."""
    if not errors:
        raise ValueError("cannot summarize an empty insertion list")
    cols = {
        "eps_x": [e.eps_x for e in errors],
        "eps_y": [e.eps_y for e in errors],
        "eps_z": [e.eps_z for e in errors],
        "euclidean": [e.euclidean for e in errors],
    }
    out = {}
    for name, vals in cols.items():
        arr = np.asarray(vals, dtype=float)
        # identical rows have exactly zero spread; skip the one-ulp mean error
        sd = 0.0 if np.all(arr == arr[0]) else float(np.std(arr))
        out[name] = {"mean": float(arr.mean()), "sd": sd}
    return out


def _mean_sd(values) -> dict:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return {"mean": float("nan"), "sd": float("nan")}
    return {"mean": float(arr.mean()), "sd": float(arr.std())}


# --------------------------------------------------------------------------
# Session engine
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StateSnapshot:
    """Immutable view of the running session, published to observers."""

    t: float
    step: str
    insertion_index: int
    phase_kind: str
    hold_index: int
    d_si: float
    d_ap: float
    d_lat: float
    tip: tuple[float, float, float]
    desired: tuple[float, float, float]
    target: tuple[float, float, float]
    distance_to_target: float
    force_n: float
    regime: str

    def to_dict(self) -> dict:
        return {
            "type": "snapshot",
            "t_s": self.t,
            "step": self.step,
            "insertion_index": self.insertion_index,
            "phase": self.phase_kind,
            "hold_index": self.hold_index,
            "d_si_mm": self.d_si,
            "d_ap_mm": self.d_ap,
            "d_lat_mm": self.d_lat,
            "tip_mm": list(self.tip),
            "desired_mm": list(self.desired),
            "target_mm": list(self.target),
            "distance_to_target_mm": self.distance_to_target,
            "force_n": self.force_n,
            "regime": self.regime,
        }


@dataclass(frozen=True)
class LiveCommand:
    received_t: float  # session time at receipt
    client_t: float
    position: float  # mm, absolute handle position
    engaged: bool


@dataclass
class InsertionTraces:
    phantom: list[dict] = field(default_factory=list)
    pose: list[dict] = field(default_factory=list)
    force: list[dict] = field(default_factory=list)
    surrogate: list[sg.SurrogateSample] = field(default_factory=list)
    ground_truth: list[sg.GroundTruthSample] = field(default_factory=list)


@dataclass
class InsertionRecord:
    index: int
    hold_index: int
    error: InsertionError
    trained: bool  # whether this insertion ran a fresh training


@dataclass
class SessionReport:
    scenario: Scenario
    banks: list[md.ModelBank]
    steering: dict
    insertions: list[InsertionRecord]
    overall: dict | None
    max_abs_force: float
    aborted: bool
    traces: list[InsertionTraces]

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "model_banks": [bank.to_dict() for bank in self.banks],
            "steering_error_mm": self.steering,
            "insertions": [
                {
                    "index": rec.index,
                    "hold_index": rec.hold_index,
                    "trained": rec.trained,
                    "eps_x_mm": rec.error.eps_x,
                    "eps_y_mm": rec.error.eps_y,
                    "eps_z_mm": rec.error.eps_z,
                    "euclidean_mm": rec.error.euclidean,
                    "surface_distance_mm": rec.error.surface_distance,
                }
                for rec in self.insertions
            ],
            "overall": self.overall,
            "max_abs_force_n": self.max_abs_force,
            "aborted": self.aborted,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class SessionEngine:
    """Fixed-step state machine walking the insertion protocol.

    ``step_once`` advances one simulated tick; ``run_protocol`` loops it to
    completion for scripted sessions.  Live handle commands enter through
    ``submit_command`` and are applied only at haptic tick boundaries.
    """

    def __init__(self, scenario: Scenario):
        self.sc = scenario
        seq = np.random.SeedSequence(scenario.seed)
        kids = seq.spawn(3)
        self.rng_sensor = np.random.default_rng(kids[0])
        self.rng_drift = np.random.default_rng(kids[1])
        self.rng_operator = np.random.default_rng(kids[2])

        self.t = 0.0
        self.step = STEP_TRAINING
        self.aborted = False
        self.insertion_idx = 0
        self.bank: md.ModelBank | None = None
        self.banks: list[md.ModelBank] = []
        self.records: list[InsertionRecord] = []
        self.all_traces: list[InsertionTraces] = []
        self.steering_si: list[float] = []
        self.steering_ap: list[float] = []
        self.max_abs_force = 0.0

        self._ee_axis = st.EE_TO_BASE @ np.array([1.0, 0.0, 0.0])
        self._reg_world = st.EE_TO_BASE @ np.asarray(scenario.registration_error, float)
        self._travel = scenario.retraction_distance + scenario.insertion_depth
        self._control_ratio = max(1, round(scenario.robot.control_period / HAPTIC_DT))
        self._live = scenario.operator.kind == "live"
        self._commands: list[LiveCommand] = []
        self._last_command_t: float | None = None

        self._target_rest = scenario.target.rest_position
        self._needs_training = True
        self._begin_insertion_cycle()

    # -- per-insertion setup -------------------------------------------------

    def _current_target(self) -> ph.TargetSpec:
        return replace(self.sc.target, rest_position=self._target_rest)

    def _begin_insertion_cycle(self) -> None:
        """Protocol steps 1 and 2: registration and retraction.

        Both are modeled as instantaneous setup: the commanded pose ends
        aligned with the insertion axis at the retracted standoff, and the
        real needle sits a fixed registration offset away from where the
        controller believes it is.
        """
        plan = self.sc.insertions[self.insertion_idx]
        if plan.target_rest is not None and plan.target_rest != self._target_rest:
            self._target_rest = plan.target_rest
            self._needs_training = True  # target moved: retrain

        rest = np.asarray(self._target_rest, float)
        self.pose_init = st.Pose(
            rotation=st.EE_TO_BASE,
            translation=rest - self._ee_axis * self._travel,
            from_frame=st.FRAME_EE,
            to_frame=st.FRAME_BASE,
        )
        self.pose = self.pose_init
        self.desired = self.pose_init
        self.d_lat = 0.0
        self.traces = InsertionTraces()
        self.phantom_state = ph.regular_state(self.sc.breathing, 0.0)
        self.distance_to_target = self._travel
        self.force_n = 0.0
        self.regime = hp.REGIME_IDLE
        self._phase_t = 0.0
        self._last_sample: sg.SurrogateSample | None = None
        self._next_sensor_t = 0.0
        self._tick_count = 0

        self._cycle_trained = self._needs_training
        if self._needs_training:
            self.step = STEP_TRAINING
            self._training_total = 2.0 * self.sc.timeline.duration
        else:
            self.step = STEP_COMPENSATING

    # -- live command intake ---------------------------------------------------

    def submit_command(self, position: float, engaged: bool, client_t: float) -> None:
        if not math.isfinite(position):
            raise ValueError("handle position must be finite")
        self._commands.append(
            LiveCommand(received_t=self.t, client_t=client_t, position=position,
                        engaged=engaged)
        )

    def _drain_commands(self) -> LiveCommand | None:
        fresh = [c for c in self._commands if self.t - c.received_t <= COMMAND_STALE_S]
        self._commands = []
        if fresh:
            self._last_command_t = self.t
        return fresh[-1] if fresh else None

    # -- training -------------------------------------------------------------

    def _acquire_and_fit(self) -> None:
        """One training pass and one held-out test pass, then fit + evaluate.

        The test pass reuses the same motion timeline with a fresh noise
        stream, standing in for the during-procedure model check.
        """
        sc = self.sc
        gt_trace = sg.acquire_ground_truth_trace(sc.breathing, sc.timeline, sc.ground_truth_rate)
        surr_trace = sg.acquire_surrogate_trace(
            sc.breathing, sc.timeline, sc.sensor, sc.timeline.duration, self.rng_sensor
        )
        bank = md.train_model_bank(sg.synchronize(surr_trace, gt_trace), sc.model_order)
        test_pair = sg.synchronize(
            sg.acquire_surrogate_trace(
                sc.breathing, sc.timeline, sc.sensor, sc.timeline.duration, self.rng_sensor
            ),
            gt_trace,
        )
        self.bank = md.evaluate_model_bank(bank, test_pair)
        self.banks.append(self.bank)
        self.traces.ground_truth = gt_trace
        self.traces.surrogate.extend(surr_trace)
        self._needs_training = False

    def _tick_training(self) -> None:
        # The ticks only pace the clock so live observers watch the phantom
        # breathe through both acquisition passes; the traces themselves are
        # acquired in one batch when the step completes.
        dt = self.sc.robot.control_period
        self._phase_t += dt
        self.t += dt
        if self._phase_t >= self._training_total - 1e-9:
            self._acquire_and_fit()
            self.step = STEP_COMPENSATING
            self._phase_t = 0.0
            self._next_sensor_t = 0.0
            return
        local = self._phase_t % self.sc.timeline.duration
        self.phantom_state = ph.sample_phantom(self.sc.breathing, self.sc.timeline, local)

    # -- compensation ----------------------------------------------------------

    def _sensor_poll(self, state_fn) -> None:
        """Sample-and-hold the sensor at its own rate against phase time."""
        if self._phase_t + 1e-12 >= self._next_sensor_t:
            lag_t = max(self._phase_t - self.sc.sensor.latency, 0.0)
            sample = sg.read_sensor(state_fn(lag_t), self.sc.sensor, self.rng_sensor)
            self._last_sample = sg.SurrogateSample(
                t=self._phase_t, s_y=sample.s_y, s_z=sample.s_z
            )
            self._next_sensor_t += 1.0 / self.sc.sensor.sample_rate

    def _alignment_point(self, target_world: np.ndarray) -> np.ndarray:
        return target_world - self._ee_axis * self._travel

    def _tick_compensating(self) -> None:
        sc = self.sc
        dt = sc.robot.control_period
        self.phantom_state = ph.regular_state(sc.breathing, self._phase_t)
        self._sensor_poll(lambda tau: ph.regular_state(sc.breathing, tau))

        self.desired = st.compensation_step(
            self.bank, self._last_sample, self.phantom_state.phase,
            st.EM_TO_BASE, self.pose_init,
        )
        self.pose = st.track_pose(self.pose, self.desired, sc.robot, dt)

        tip = self.pose.translation + self._reg_world
        target_world = ph.target_world_position(
            self.phantom_state, self._current_target(), sc.axis_map
        )
        err = st.steering_error(tip, self._alignment_point(target_world))
        idx = ph.AxisMap._INDEX
        self.steering_si.append(float(err[idx[sc.axis_map.si]]))
        self.steering_ap.append(float(err[idx[sc.axis_map.ap]]))
        self._trace_pose_row(tip, target_world)
        self._trace_phantom_row()

        self._phase_t += dt
        self.t += dt
        if self._phase_t >= sc.compensation_duration - 1e-9:
            self._enter_insertion()

    # -- insertion --------------------------------------------------------------

    def _enter_insertion(self) -> None:
        sc = self.sc
        plan = sc.insertions[self.insertion_idx]
        self.step = STEP_INSERTING
        self._phase_t = 0.0
        self._next_sensor_t = 0.0
        self._hold_index = plan.hold_index
        self._tick_count = 0
        self.d_lat = 0.0
        self.phantom_state = ph.hold_state(
            sc.breathing, sc.timeline, plan.hold_index, 0.0, d_lat=0.0
        )
        self.handle_sim = hp.HandleSimulator(sc.haptics)
        self.handle_sim.reset(0.0)
        self._d_x = 0.0
        self._live_handle = hp.HandleState()
        self._live_wall_touched = False
        self._live_update_t = self.t
        self._live_v_hold_until = -1.0
        self._last_command_t = None
        if not self._live:
            self.operator = scripted_operator(sc.operator.profile, self.rng_operator)
            self.operator.begin(self._travel)

    def _tick_inserting(self) -> None:
        sc = self.sc
        self._tick_count += 1
        self._phase_t += HAPTIC_DT
        self.t += HAPTIC_DT

        self.phantom_state = ph.hold_state(
            sc.breathing, sc.timeline, self._hold_index, self._phase_t, d_lat=self.d_lat
        )
        self._sensor_poll(
            lambda tau: ph.hold_state(sc.breathing, sc.timeline, self._hold_index, tau,
                                      d_lat=self.d_lat)
        )

        self.distance_to_target = self._travel - self._d_x
        done = False
        if self._live:
            done = self._apply_live_tick()
        else:
            action = self.operator.action(
                self._phase_t, self.distance_to_target, self.handle_sim.state
            )
            state, force, regime = self.handle_sim.step(
                action.force, action.engaged, self.distance_to_target, HAPTIC_DT,
                clamp_still=action.clamp_still,
            )
            self.force_n = force
            self.regime = regime
            self._d_x = hp.map_handle_to_needle(state.axial_position, sc.haptics.motion_scale)
            self.operator.observe(self._travel - self._d_x, state)
            done = self.operator.finished() or self._phase_t >= sc.max_insertion_duration
        self.max_abs_force = max(self.max_abs_force, abs(self.force_n))

        if self._tick_count % self._control_ratio == 0:
            dt_c = self._control_ratio * HAPTIC_DT
            comp = st.compensation_step(
                self.bank, self._last_sample, self.phantom_state.phase,
                st.EM_TO_BASE, self.pose_init,
            )
            self.desired = st.insertion_step(comp, self._d_x)
            self.pose = st.track_pose(self.pose, self.desired, sc.robot, dt_c)
            engaged_tissue = self._d_x >= sc.retraction_distance
            if sc.drift.enabled:
                new_state = ph.apply_interaction_drift(
                    self.phantom_state, sc.drift.rate, engaged_tissue, dt_c, self.rng_drift
                )
                self.d_lat = new_state.d_lat
                self.phantom_state = new_state
            tip = self.pose.translation + self._reg_world
            target_world = ph.target_world_position(
                self.phantom_state, self._current_target(), sc.axis_map
            )
            self._trace_pose_row(tip, target_world)
            self._trace_phantom_row()

        if self._tick_count % 10 == 0:  # force trace at 100 Hz
            self.traces.force.append({
                "t": self.t,
                "distance_to_target": self.distance_to_target,
                "regime": self.regime,
                "force_N": self.force_n,
            })

        if done:
            self._finish_insertion()

    def _apply_live_tick(self) -> bool:
        cmd = self._drain_commands()
        prev = self._live_handle
        if cmd is not None:
            # Commands arrive far below the tick rate; estimate speed over
            # the real inter-command interval and hold it briefly so the
            # rendered force does not flicker between commands.
            dt_cmd = max(self.t - self._live_update_t, HAPTIC_DT)
            v = (cmd.position - prev.axial_position) / dt_cmd
            hold = prev.hold_position
            if prev.engaged and not cmd.engaged:
                hold = cmd.position
            self._live_handle = hp.HandleState(
                axial_position=cmd.position, axial_velocity=v,
                engaged=cmd.engaged, hold_position=hold,
            )
            self._live_update_t = self.t
            self._live_v_hold_until = self.t + 0.05
        elif self.t > self._live_v_hold_until:
            self._live_handle = replace(prev, axial_velocity=0.0)
        handle = self._live_handle
        if handle.engaged:
            self._d_x = hp.map_handle_to_needle(
                handle.axial_position, self.sc.haptics.motion_scale
            )
        self.force_n = hp.feedback_force(self.sc.haptics, handle, self.distance_to_target)
        self.regime = hp.classify_regime(handle, self.distance_to_target)
        if self.distance_to_target <= 0:
            self._live_wall_touched = True

        if self._last_command_t is None:
            if self._phase_t > self.sc.live_timeout:
                self.aborted = True
                return True
        elif self.t - self._last_command_t > self.sc.live_timeout:
            self.aborted = True
            return True
        return self._live_wall_touched and not handle.engaged

    def _finish_insertion(self) -> None:
        sc = self.sc
        tip = self.pose.translation + self._reg_world
        error = validate_insertion(tip, self._current_target(), self.phantom_state, sc.axis_map)
        self.records.append(
            InsertionRecord(
                index=self.insertion_idx + 1,
                hold_index=self._hold_index,
                error=error,
                trained=self._cycle_trained,
            )
        )
        self.all_traces.append(self.traces)
        self.insertion_idx += 1
        if self.aborted or self.insertion_idx >= len(sc.insertions):
            self.step = STEP_DONE
        else:
            self._begin_insertion_cycle()

    # -- trace helpers -----------------------------------------------------------

    def _trace_pose_row(self, tip: np.ndarray, target_world: np.ndarray) -> None:
        d = self.desired.translation
        self.traces.pose.append({
            "t": self.t,
            "desired_x": float(d[0]), "desired_y": float(d[1]), "desired_z": float(d[2]),
            "actual_x": float(tip[0]), "actual_y": float(tip[1]), "actual_z": float(tip[2]),
            "target_x": float(target_world[0]), "target_y": float(target_world[1]),
            "target_z": float(target_world[2]),
        })

    def _trace_phantom_row(self) -> None:
        s = self.phantom_state
        self.traces.phantom.append({
            "t": self.t, "d_si": s.d_si, "d_ap": s.d_ap, "d_lat": s.d_lat,
        })

    # -- public stepping ------------------------------------------------------------

    @property
    def done(self) -> bool:
        return self.step == STEP_DONE

    def step_once(self) -> None:
        if self.step == STEP_TRAINING:
            self._tick_training()
        elif self.step == STEP_COMPENSATING:
            self._tick_compensating()
        elif self.step == STEP_INSERTING:
            self._tick_inserting()
        else:
            raise SessionStateError("session already finished")

    def snapshot(self) -> StateSnapshot:
        s = self.phantom_state
        tip = self.pose.translation + self._reg_world
        target_world = ph.target_world_position(s, self._current_target(), self.sc.axis_map)
        return StateSnapshot(
            t=self.t,
            step=self.step,
            insertion_index=min(self.insertion_idx + 1, len(self.sc.insertions)),
            phase_kind=s.phase.kind,
            hold_index=s.phase.hold_index,
            d_si=s.d_si, d_ap=s.d_ap, d_lat=s.d_lat,
            tip=tuple(float(v) for v in tip),
            desired=tuple(float(v) for v in self.desired.translation),
            target=tuple(float(v) for v in target_world),
            distance_to_target=self.distance_to_target,
            force_n=self.force_n,
            regime=self.regime,
        )

    def report(self) -> SessionReport:
        steering = {
            "si": _mean_sd(self.steering_si),
            "ap": _mean_sd(self.steering_ap),
            "samples": len(self.steering_si),
        }
        overall = summarize([r.error for r in self.records]) if self.records else None
        return SessionReport(
            scenario=self.sc,
            banks=self.banks,
            steering=steering,
            insertions=self.records,
            overall=overall,
            max_abs_force=self.max_abs_force,
            aborted=self.aborted,
            traces=self.all_traces,
        )


def run_protocol(scenario: Scenario) -> SessionReport:
    """Run the full protocol to completion on the simulated clock."""
    engine = SessionEngine(scenario)
    while not engine.done:
        engine.step_once()
    return engine.report()


# --------------------------------------------------------------------------
# Report output
# --------------------------------------------------------------------------

def _fmt_pm(stats: dict) -> str:
    return f"{stats['mean']:.2f} ± {stats['sd']:.2f}"


def summary_text(report: SessionReport) -> str:
    lines = []
    lines.append("Motion model MAE (mm), mean ± sd over trainings")
    lines.append(f"{'Direction':<12}{'':<8}{'M_r':>14}{'M_b-h':>14}")
    for axis in ("ap", "si"):
        for which in ("train", "test"):
            vals = {}
            for cls in md.PHASE_CLASSES:
                per_bank = []
                for bank in report.banks:
                    e = bank.entry(cls, axis)
                    v = e.train_mae if which == "train" else e.test_mae
                    if v is not None:
                        per_bank.append(v)
                vals[cls] = _mean_sd(per_bank)
            lines.append(
                f"{axis.upper():<12}{which:<8}"
                f"{_fmt_pm(vals[md.REGULAR_CLASS]):>14}{_fmt_pm(vals[md.BREATH_HOLD_CLASS]):>14}"
            )
    lines.append("")
    lines.append("Needle steering error during regular breathing (mm)")
    lines.append(
        f"SI {_fmt_pm(report.steering['si'])}    AP {_fmt_pm(report.steering['ap'])}"
    )
    lines.append("")
    lines.append("Insertion errors (mm)")
    lines.append(f"{'Insertion':<10}{'eps_x':>14}{'eps_y':>14}{'eps_z':>14}{'Euclidean':>14}")
    for rec in report.insertions:
        e = rec.error
        lines.append(
            f"{rec.index:<10}{e.eps_x:>14.2f}{e.eps_y:>14.2f}{e.eps_z:>14.2f}{e.euclidean:>14.2f}"
        )
    if report.overall:
        o = report.overall
        lines.append(
            f"{'Overall':<10}{_fmt_pm(o['eps_x']):>14}{_fmt_pm(o['eps_y']):>14}"
            f"{_fmt_pm(o['eps_z']):>14}{_fmt_pm(o['euclidean']):>14}"
        )
    if report.aborted:
        lines.append("")
        lines.append("SESSION ABORTED (live operator timeout)")
    return "\n".join(lines) + "\n"


def write_report(report: SessionReport, out_dir: str | Path) -> Path:
    """Write report.json, summary.txt and the per-insertion trace bundle."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "summary.txt").write_text(summary_text(report))
    for i, traces in enumerate(report.traces, start=1):
        tdir = out / "traces" / f"insertion_{i:02d}"
        tdir.mkdir(parents=True, exist_ok=True)
        st.write_pose_trace_csv(traces.pose, tdir / "pose.csv")
        hp.write_force_trace_csv(traces.force, tdir / "force.csv")
        sg.write_surrogate_csv(traces.surrogate, tdir / "surrogate.csv")
        sg.write_ground_truth_csv(traces.ground_truth, tdir / "ground_truth.csv")
        with open(tdir / "phantom.csv", "w", newline="") as fh:
            fh.write("t,d_si,d_ap,d_lat\n")
            for row in traces.phantom:
                fh.write(
                    f"{row['t']!r},{row['d_si']!r},{row['d_ap']!r},{row['d_lat']!r}\n"
                )
    return out / "report.json"
