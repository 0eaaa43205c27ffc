"""Proximity-based haptic feedback and the simulated device handle.

Two control laws shape what the operator feels along the insertion axis:
a viscous proximity force b*v*(o-d) that grows as the needle closes on the
target, and a PD virtual wall k_p*x - k_d*v that pushes back once the
target plane is crossed.  Every rendered force is clamped at the wall
level; the wall never pulls inward and retraction is force-free.  When the
operator lets go, a stiff position hold pins the handle where it was
released.

Force sign convention: the engaged regimes return the control-law value,
i.e. the magnitude of the resistance felt against insertion; the idle hold
returns a signed force along the handle axis (negative pushes the handle
back toward its hold point).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

REGIME_PROXIMITY = "proximity"
REGIME_WALL = "wall"
REGIME_IDLE = "idle"


@dataclass(frozen=True)
class HapticConfig:
    damping_b: float = 0.01  # N*s/mm^2
    offset_o: float = 40.0  # mm, distance at which proximity feedback starts
    wall_kp: float = 2.0  # N/mm
    wall_kd: float = 0.05  # N*s/mm
    force_cap: float = 5.0  # N, the wall level
    idle_hold_kp: float = 3.0  # N/mm
    motion_scale: float = 1.0  # handle mm -> needle mm

    def __post_init__(self):
        gains = (self.damping_b, self.wall_kp, self.wall_kd, self.idle_hold_kp)
        if any(g < 0 for g in gains):
            raise ValueError("haptic gains must be >= 0")
        if self.force_cap <= 0:
            raise ValueError("force_cap must be > 0")
        if self.offset_o <= 0:
            raise ValueError("offset_o must be > 0")


@dataclass(frozen=True)
class HandleState:
    axial_position: float = 0.0  # mm along the handle axis
    axial_velocity: float = 0.0  # mm/s
    engaged: bool = False
    hold_position: float = 0.0  # mm, latched when the user lets go


def _clamp(value: float, lo: float, hi: float) -> float:
    return lo if value < lo else hi if value > hi else value


def proximity_force(cfg: HapticConfig, v: float, d: float) -> float:
    """Viscous proximity feedback b*v*(o-d), capped.

    Only insertion-direction motion is resisted; retraction (v <= 0) is
    force-free.
    """
    if v <= 0:
        return 0.0
    return _clamp(cfg.damping_b * v * (cfg.offset_o - d), -cfg.force_cap, cfg.force_cap)


def wall_force(cfg: HapticConfig, x: float, v: float) -> float:
    """Virtual-wall PD response k_p*x - k_d*v for penetration x.

    Clamped to [0, force_cap]: the wall pushes back, never pulls inward.
    """
    return _clamp(cfg.wall_kp * x - cfg.wall_kd * v, 0.0, cfg.force_cap)


def classify_regime(handle: HandleState, distance_to_target: float) -> str:
    if not handle.engaged:
        return REGIME_IDLE
    return REGIME_PROXIMITY if distance_to_target > 0 else REGIME_WALL


def feedback_force(
    cfg: HapticConfig, handle: HandleState, distance_to_target: float
) -> float:
    """Force rendered to the handle for the current regime.

    distance_to_target is the signed axial needle-to-target distance in mm
    (positive before the target plane).  Needle-space speed is the handle
    speed scaled by the motion mapping.
    """
    if not handle.engaged:
        raw = -cfg.idle_hold_kp * (handle.axial_position - handle.hold_position)
        return _clamp(raw, -cfg.force_cap, cfg.force_cap)
    v_needle = cfg.motion_scale * handle.axial_velocity
    if distance_to_target > 0:
        return proximity_force(cfg, v_needle, distance_to_target)
    return wall_force(cfg, -distance_to_target, v_needle)


def map_handle_to_needle(handle_delta: float, motion_scale: float) -> float:
    """Axial needle displacement for a handle displacement (1-DoF mapping)."""
    return motion_scale * handle_delta


@dataclass(frozen=True)
class HandleDynamics:
    """Effective inertia and friction of the hand-plus-handle pair.

    Mass is deliberately on the heavy side: the operator force loop runs at
    the 1 kHz haptic tick and must keep its discrete-time pole well below
    the stability limit.  The friction stands in for the grip impedance of
    a real hand; without it the one-sided virtual wall can pump energy into
    the handle on fast entry (the clamp keeps the wall silent while k_d*v
    dominates, then the spring ejects with the full stored force).
    """

    mass_kg: float = 0.5
    viscous_n_s_per_mm: float = 0.1

    def __post_init__(self):
        if self.mass_kg <= 0 or self.viscous_n_s_per_mm < 0:
            raise ValueError("handle dynamics need positive mass, non-negative friction")


class HandleSimulator:
    """Point-mass handle driven by the operator's force and the feedback.

    Used for scripted runs only; in live mode the UI user is the handle
    and commands stream in over the bridge.  Integration is semi-implicit
    Euler at the haptic tick rate.
    """

    def __init__(self, cfg: HapticConfig, dynamics: HandleDynamics | None = None):
        self.cfg = cfg
        self.dynamics = dynamics or HandleDynamics()
        self.state = HandleState()

    def reset(self, position: float = 0.0) -> None:
        self.state = HandleState(
            axial_position=position, axial_velocity=0.0, engaged=False,
            hold_position=position,
        )

    def step(
        self,
        user_force: float,
        engaged: bool,
        distance_to_target: float,
        dt: float,
        clamp_still: bool = False,
    ) -> tuple[HandleState, float, str]:
        """Advance one haptic tick; returns (state, rendered force, regime)."""
        s = self.state
        if s.engaged and not engaged:
            s = replace(s, hold_position=s.axial_position)
        s = replace(s, engaged=engaged)

        if clamp_still:
            # Operator grips the handle without moving it: exact standstill.
            s = replace(s, axial_velocity=0.0)
            force = feedback_force(self.cfg, s, distance_to_target)
            self.state = s
            return s, force, classify_regime(s, distance_to_target)

        force = feedback_force(self.cfg, s, distance_to_target)
        if engaged:
            # Rendered value is the resistance against insertion.
            net = user_force - force - self.dynamics.viscous_n_s_per_mm * s.axial_velocity
        else:
            net = force - self.dynamics.viscous_n_s_per_mm * s.axial_velocity
        accel = net / self.dynamics.mass_kg * 1000.0  # N/kg -> mm/s^2
        v = s.axial_velocity + accel * dt
        p = s.axial_position + v * dt
        s = replace(s, axial_position=p, axial_velocity=v)
        self.state = s
        return s, force, classify_regime(s, distance_to_target)


def write_force_trace_csv(rows: list[dict], path: str | Path) -> None:
    """Force trace rows: t, distance_to_target, regime, force_N."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "distance_to_target", "regime", "force_N"])
        for row in rows:
            writer.writerow(
                [repr(row["t"]), repr(row["distance_to_target"]), row["regime"],
                 repr(row["force_N"])]
            )
