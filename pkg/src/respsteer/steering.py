"""Desired-pose composition and simulated manipulator tracking.

The robot is commanded through one update rule: the desired end-effector
transform equals the initial transform plus a rotated displacement vector
in its translation block, the rotation block staying untouched.  For
motion compensation the displacement holds the model's AP/SI estimates
expressed in the tracker frame; for insertion it holds the axial handle
displacement expressed in the end-effector frame.

The arm itself is reduced to a rate-clamped first-order lag on the
translation; compensation is translational, so rotation is never
commanded.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelBank
from .phantom import Phase
from .surrogate import SurrogateSample

FRAME_BASE = "base"  # Psi_B
FRAME_EE = "ee"  # Psi_EE
FRAME_TARGET = "target"  # Psi_T
FRAME_EM = "em"  # Psi_EM
FRAME_HANDLE = "handle"  # Psi_O

_ORTHO_TOL = 1e-9


class UntrainedBankError(RuntimeError):
    """Compensation was requested before a model bank was trained."""


def _check_rotation(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3):
        raise ValueError("rotation must be a 3x3 matrix")
    if not np.allclose(r.T @ r, np.eye(3), atol=_ORTHO_TOL):
        raise ValueError("rotation matrix is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
        raise ValueError("rotation matrix determinant is not +1")
    return r


@dataclass(frozen=True)
class Pose:
    """Rigid transform of `from_frame` expressed in `to_frame`."""

    rotation: np.ndarray  # 3x3, orthonormal, det +1
    translation: np.ndarray  # mm
    from_frame: str = FRAME_EE
    to_frame: str = FRAME_BASE

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=float)
        if t.shape != (3,):
            raise ValueError("translation must be a 3-vector")
        object.__setattr__(self, "translation", t)
        if self.from_frame == self.to_frame:
            raise ValueError("pose frames must differ")

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def rotation_about(axis: str, angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float)
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=float)
    if axis == "z":
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float)
    raise ValueError(f"unknown axis {axis!r}")


# Tracker frame into the robot base: the sensor y axis (AP channel) maps to
# world z and the sensor z axis (SI channel) maps to world x, so estimated
# displacements land on the compensated world axes.
EM_TO_BASE = np.array([[0, 0, 1], [1, 0, 0], [0, 1, 0]], dtype=float)

# End-effector into the robot base: the needle axis (end-effector x) points
# along world +z, toward the target.
EE_TO_BASE = np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]], dtype=float)


@dataclass(frozen=True)
class RobotConfig:
    max_speed: float = 100.0  # mm/s
    tracking_bandwidth: float = 8.0  # 1/s, first-order lag
    control_period: float = 0.01  # s

    def __post_init__(self):
        if min(self.max_speed, self.tracking_bandwidth, self.control_period) <= 0:
            raise ValueError("robot config values must all be positive")


def compose_desired_pose(initial: Pose, r: np.ndarray, d) -> Pose:
    """Desired pose: initial translation shifted by r @ d, rotation kept.

    This is the manipulator update rule taken literally: the displacement
    enters additively in the translation block and the rotation block of
    the added term is zero.
    """
    r = _check_rotation(r)
    d = np.asarray(d, dtype=float)
    return Pose(
        rotation=initial.rotation,
        translation=initial.translation + r @ d,
        from_frame=initial.from_frame,
        to_frame=initial.to_frame,
    )


def compensation_step(
    bank: ModelBank | None,
    sample: SurrogateSample,
    phase: Phase,
    r_em_to_b: np.ndarray,
    initial: Pose,
    on_select=None,
) -> Pose:
    """Pose realigning the needle with the estimated target displacement.

    The displacement is (0, AP estimate, SI estimate) in the tracker frame:
    the AP model reads the sensor y channel and the SI model the z channel.
    The breathing phase picks the regular or breath-hold model pair.
    """
    if bank is None or not bank.entries:
        raise UntrainedBankError("compensation requires a trained model bank")
    si_model, ap_model = bank.models_for(phase)
    if on_select is not None:
        on_select(phase, si_model, ap_model)
    d_em = np.array([0.0, ap_model.estimate(sample.s_y), si_model.estimate(sample.s_z)])
    return compose_desired_pose(initial, r_em_to_b, d_em)


def insertion_step(initial: Pose, d_x: float) -> Pose:
    """Pose advancing the needle by d_x along its own axial direction."""
    if not math.isfinite(d_x):
        raise ValueError("axial displacement must be finite")
    return compose_desired_pose(initial, initial.rotation, np.array([d_x, 0.0, 0.0]))


def track_pose(current: Pose, desired: Pose, cfg: RobotConfig, dt: float) -> Pose:
    """Advance the arm one step toward the desired pose.

    Translation follows a first-order lag (gain 1 - exp(-bandwidth*dt))
    with the step length clamped at max_speed*dt; rotation is held.  The
    step never overshoots: both the lag gain and the clamp only shorten
    the remaining error.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    delta = desired.translation - current.translation
    gain = 1.0 - math.exp(-cfg.tracking_bandwidth * dt)
    step = delta * gain
    norm = float(np.linalg.norm(step))
    limit = cfg.max_speed * dt
    if norm > limit:
        step = step * (limit / norm)
    return Pose(
        rotation=current.rotation,
        translation=current.translation + step,
        from_frame=current.from_frame,
        to_frame=current.to_frame,
    )


def steering_error(needle_tip, target_center) -> np.ndarray:
    """Component-wise absolute tip-to-target distance (mm triple)."""
    tip = np.asarray(needle_tip, dtype=float)
    center = np.asarray(target_center, dtype=float)
    return np.abs(tip - center)


def write_pose_trace_csv(rows: list[dict], path: str | Path) -> None:
    """Pose trace rows: t plus desired/actual/target world coordinates."""
    cols = [
        "t",
        "desired_x", "desired_y", "desired_z",
        "actual_x", "actual_y", "actual_z",
        "target_x", "target_y", "target_z",
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([repr(row[c]) for c in cols])
