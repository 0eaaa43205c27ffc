"""Acceptance criteria, one test per criterion.

Each test prints a single PASS line when its criterion holds at the stated
tolerance and enforces the runtime budget it was specified with.  The
metric tests pin exact frozen reference rows; the rest are property checks
on the simulator.
"""

import time

import numpy as np
import pytest

from conftest import fast_scenario
from respsteer.model import fit_polynomial
from respsteer.phantom import PhantomState, TargetSpec
from respsteer.session import (
    STEP_INSERTING,
    DriftSettings,
    InsertionError,
    OperatorSpec,
    Scenario,
    SessionEngine,
    run_protocol,
    summarize,
    validate_insertion,
)
from respsteer.surrogate import (
    SensorConfig,
    acquire_ground_truth_trace,
    acquire_surrogate_trace,
    synchronize,
)
from respsteer.model import evaluate_model_bank, train_model_bank

# Frozen per-insertion error rows (mm): eps_x, eps_y, eps_z, Euclidean.
INSERTION_TABLE = [
    (4.13, 8.35, 3.45, 9.93),
    (1.65, 11.58, 1.75, 11.83),
    (6.32, 14.51, 5.14, 16.64),
    (0.28, 3.11, 3.58, 4.75),
    (0.62, 1.19, 0.37, 1.39),
]
OVERALL_ROW = {
    "eps_x": (2.60, 2.30),
    "eps_y": (7.75, 5.01),
    "eps_z": (2.86, 1.64),
    "euclidean": (8.91, 5.35),
}


class Budget:
    def __init__(self, seconds: float):
        self.limit = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc == (None, None, None):
            assert self.elapsed < self.limit, (
                f"runtime {self.elapsed:.2f}s exceeded the {self.limit}s budget"
            )


def test_euclidean_anchor():
    with Budget(1.0):
        target = TargetSpec(rest_position=(0.0, 0.0, 0.0), diameter=3.0)
        rest = PhantomState(t=0.0, d_si=0.0, d_ap=0.0)
        for ex, ey, ez, euclid in INSERTION_TABLE:
            err = validate_insertion((ex, ey, ez), target, rest)
            assert err.euclidean == pytest.approx(euclid, abs=0.01)
    print("ACCEPTANCE euclidean-anchor: PASS")


def test_overall_row_anchor():
    with Budget(1.0):
        errors = [InsertionError.from_eps(ex, ey, ez) for ex, ey, ez, _ in INSERTION_TABLE]
        overall = summarize(errors)
        for col, (mean, sd) in OVERALL_ROW.items():
            assert overall[col]["mean"] == pytest.approx(mean, abs=0.01)
            assert overall[col]["sd"] == pytest.approx(sd, abs=0.01)
    print("ACCEPTANCE overall-row-anchor: PASS")


def test_ols_recovery():
    with Budget(5.0):
        rng = np.random.default_rng(314159)
        for _ in range(200):
            order = int(rng.integers(0, 6))
            beta = rng.uniform(-10.0, 10.0, size=order + 1)
            x = rng.uniform(-5.0, 5.0, size=100)
            y = np.polynomial.polynomial.polyval(x, beta)
            fitted = fit_polynomial(x, y, order)
            assert np.max(np.abs(np.asarray(fitted.coefficients) - beta)) < 1e-6
    print("ACCEPTANCE ols-recovery: PASS")


def test_below_3mm_model_error():
    with Budget(30.0):
        scenario = Scenario()  # default noisy scenario: sigma 0.2 mm, order 2
        gt = acquire_ground_truth_trace(
            scenario.breathing, scenario.timeline, scenario.ground_truth_rate
        )
        for seed in range(20):
            rng = np.random.default_rng(seed)
            train = synchronize(
                acquire_surrogate_trace(
                    scenario.breathing, scenario.timeline, scenario.sensor,
                    scenario.timeline.duration, rng,
                ),
                gt,
            )
            test = synchronize(
                acquire_surrogate_trace(
                    scenario.breathing, scenario.timeline, scenario.sensor,
                    scenario.timeline.duration, rng,
                ),
                gt,
            )
            bank = evaluate_model_bank(train_model_bank(train, scenario.model_order), test)
            for entry in bank.entries.values():
                assert entry.test_mae is not None and entry.test_mae < 3.0
    print("ACCEPTANCE below-3mm-model-error: PASS")


def test_steering_asymmetry():
    with Budget(60.0):
        si_means, ap_means = [], []
        for seed in range(20):
            engine = SessionEngine(Scenario(seed=seed))
            while engine.step != STEP_INSERTING:
                engine.step_once()
            si_means.append(float(np.mean(engine.steering_si)))
            ap_means.append(float(np.mean(engine.steering_ap)))
        assert float(np.mean(si_means)) > float(np.mean(ap_means))
    print("ACCEPTANCE steering-asymmetry: PASS")


def test_wall_equilibrium():
    with Budget(5.0):
        scenario = fast_scenario(
            operator=OperatorSpec("scripted", "constant_push"),
            sensor=SensorConfig(noise_sigma=0.0, crosstalk=0.0),
            registration_error=(0.0, 0.0, 0.0),
        )
        engine = SessionEngine(scenario)
        while not engine.done:
            engine.step_once()
        penetration = engine._d_x - engine._travel
        assert penetration == pytest.approx(1.0 / scenario.haptics.wall_kp, abs=1e-3)
    print("ACCEPTANCE wall-equilibrium: PASS")


def test_force_cap():
    with Budget(60.0):
        cap = 5.0
        for profile in ("ideal", "overshooter", "hesitant", "constant_push"):
            report = run_protocol(
                fast_scenario(operator=OperatorSpec("scripted", profile))
            )
            assert report.max_abs_force <= cap
    print("ACCEPTANCE force-cap: PASS")


def test_noiseless_end_to_end():
    with Budget(30.0):
        scenario = Scenario(
            sensor=SensorConfig(noise_sigma=0.0, crosstalk=0.0),
            registration_error=(0.0, 0.0, 0.0),
            drift=DriftSettings(enabled=False),
            operator=OperatorSpec("scripted", "ideal"),
            insertions=Scenario().insertions[:1],
        )
        report = run_protocol(scenario)
        assert report.insertions[0].error.euclidean < 0.5
    print("ACCEPTANCE noiseless-end-to-end: PASS")


def test_replay_determinism():
    with Budget(30.0):
        scenario = Scenario(drift=DriftSettings(enabled=True))
        first = run_protocol(scenario).to_json()
        again = run_protocol(Scenario.from_json(scenario.to_json())).to_json()
        assert first == again
    print("ACCEPTANCE replay-determinism: PASS")
