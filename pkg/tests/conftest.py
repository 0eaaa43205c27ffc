import pytest

from respsteer.phantom import (
    REGULAR,
    RespiratoryTimeline,
    TimelineSegment,
    hold,
)
from respsteer.session import InsertionPlan, Scenario
from respsteer.steering import RobotConfig
from respsteer.surrogate import SensorConfig


def short_timeline() -> RespiratoryTimeline:
    """13 s acquisition with all phase classes; keeps session tests quick."""
    return RespiratoryTimeline(
        segments=(
            TimelineSegment(REGULAR, 6.0),
            TimelineSegment(hold(1), 2.0),
            TimelineSegment(hold(2), 2.0),
            TimelineSegment(hold(3), 2.0),
            TimelineSegment(REGULAR, 1.0),
        )
    )


def fast_scenario(**overrides) -> Scenario:
    """One quick insertion with a short timeline and short travel."""
    defaults = dict(
        timeline=short_timeline(),
        compensation_duration=2.0,
        retraction_distance=10.0,
        insertion_depth=10.0,
        insertions=(InsertionPlan(1),),
        robot=RobotConfig(),
        sensor=SensorConfig(noise_sigma=0.1),
        seed=7,
    )
    defaults.update(overrides)
    return Scenario(**defaults)


@pytest.fixture
def quick_scenario() -> Scenario:
    return fast_scenario()
