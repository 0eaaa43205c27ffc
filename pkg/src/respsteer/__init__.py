"""Respiratory-motion-compensated teleoperated needle insertion, simulated.

Hardware-free reproduction of a robotic percutaneous insertion pipeline:
a breathing liver phantom, a skin-mounted surrogate sensor, polynomial
correspondence models fitted by ordinary least squares, robotic needle
steering against the estimated motion, and a haptic teleoperated insertion
with proximity and virtual-wall feedback.
"""

from .haptics import (
    HandleSimulator,
    HandleState,
    HapticConfig,
    feedback_force,
    map_handle_to_needle,
    proximity_force,
    wall_force,
)
from .model import (
    ModelBank,
    PolynomialModel,
    evaluate_model_bank,
    fit_polynomial,
    mae,
    train_model_bank,
)
from .phantom import (
    AxisMap,
    BreathingProfile,
    PhantomState,
    RespiratoryTimeline,
    TargetSpec,
    TimelineSegment,
    apply_interaction_drift,
    default_training_timeline,
    sample_phantom,
    target_world_position,
)
from .session import (
    InsertionError,
    Scenario,
    SessionEngine,
    SessionReport,
    run_protocol,
    scripted_operator,
    summarize,
    validate_insertion,
    write_report,
)
from .steering import (
    Pose,
    RobotConfig,
    compensation_step,
    compose_desired_pose,
    insertion_step,
    steering_error,
    track_pose,
)
from .surrogate import (
    SensorConfig,
    SurrogateSample,
    TrainingPair,
    read_sensor,
    synchronize,
)

__version__ = "0.1.0"
