import json
import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import fast_scenario, short_timeline
from respsteer.haptics import REGIME_WALL
from respsteer.model import IncompleteTrainingError
from respsteer.phantom import (
    REGULAR,
    BreathingProfile,
    PhantomState,
    RespiratoryTimeline,
    TargetSpec,
    TimelineSegment,
)
from respsteer.session import (
    STEP_COMPENSATING,
    STEP_INSERTING,
    STEP_TRAINING,
    DriftSettings,
    InsertionError,
    InsertionPlan,
    OperatorSpec,
    Scenario,
    ScenarioError,
    SessionEngine,
    run_protocol,
    scripted_operator,
    summarize,
    validate_insertion,
)
from respsteer.steering import RobotConfig
from respsteer.surrogate import SensorConfig

NOISELESS = dict(
    sensor=SensorConfig(noise_sigma=0.0, crosstalk=0.0),
    registration_error=(0.0, 0.0, 0.0),
)


class TestValidateInsertion:
    def test_tip_at_center(self):
        target = TargetSpec(rest_position=(0.0, 0.0, 100.0))
        state = PhantomState(t=0.0, d_si=0.0, d_ap=0.0)
        err = validate_insertion((0.0, 0.0, 100.0), target, state)
        assert (err.eps_x, err.eps_y, err.eps_z, err.euclidean) == (0, 0, 0, 0)
        assert err.surface_distance == 0.0

    def test_table_row_euclidean(self):
        target = TargetSpec(rest_position=(0.0, 0.0, 0.0), diameter=3.0)
        state = PhantomState(t=0.0, d_si=0.0, d_ap=0.0)
        err = validate_insertion((4.13, 8.35, 3.45), target, state)
        assert err.euclidean == pytest.approx(9.93, abs=0.01)

    def test_surface_distance_subtracts_radius(self):
        target = TargetSpec(rest_position=(0.0, 0.0, 0.0), diameter=3.0)
        state = PhantomState(t=0.0, d_si=0.0, d_ap=0.0)
        err = validate_insertion((5.0, 0.0, 0.0), target, state)
        assert err.surface_distance == pytest.approx(3.5)
        near = validate_insertion((1.0, 0.0, 0.0), target, state)
        assert near.surface_distance == 0.0

    def test_target_moves_with_phantom(self):
        target = TargetSpec(rest_position=(0.0, 0.0, 100.0))
        state = PhantomState(t=0.0, d_si=2.0, d_ap=1.0, d_lat=0.5)
        err = validate_insertion((0.0, 0.0, 100.0), target, state)
        assert err.eps_x == pytest.approx(2.0)  # SI on world x
        assert err.eps_y == pytest.approx(0.5)  # drift on world y
        assert err.eps_z == pytest.approx(1.0)  # AP on world z

    def test_inconsistent_euclidean_rejected(self):
        with pytest.raises(ValueError):
            InsertionError(eps_x=1.0, eps_y=1.0, eps_z=1.0, euclidean=5.0)


class TestSummarize:
    def test_single_insertion(self):
        err = InsertionError.from_eps(1.0, 2.0, 3.0)
        out = summarize([err])
        assert out["eps_x"] == {"mean": 1.0, "sd": 0.0}

    def test_identical_rows_have_zero_sd(self):
        errs = [InsertionError.from_eps(1.0, 2.0, 3.0)] * 5
        out = summarize(errs)
        for col in out.values():
            assert col["sd"] == 0.0

    def test_population_sd(self):
        errs = [
            InsertionError.from_eps(x, 0.0, 0.0)
            for x in (4.13, 1.65, 6.32, 0.28, 0.62)
        ]
        out = summarize(errs)
        assert out["eps_x"]["mean"] == pytest.approx(2.60, abs=0.01)
        assert out["eps_x"]["sd"] == pytest.approx(2.30, abs=0.01)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            summarize([])


class TestScriptedOperators:
    def test_unknown_profile_rejected(self):
        with pytest.raises(ValueError):
            scripted_operator("wizard")

    def test_known_profiles_construct(self):
        for name in ("ideal", "overshooter", "hesitant", "constant_push"):
            assert scripted_operator(name) is not None

    def test_ideal_settles_at_wall_face(self):
        sc = fast_scenario(**NOISELESS)
        engine = SessionEngine(sc)
        while not engine.done:
            engine.step_once()
        penetration = engine._d_x - engine._travel
        assert abs(penetration) < 0.05
        assert abs(engine.handle_sim.state.axial_velocity) < 0.01

    def test_overshooter_enters_wall_regime(self):
        sc = fast_scenario(operator=OperatorSpec("scripted", "overshooter"), **NOISELESS)
        rep = run_protocol(sc)
        regimes = {row["regime"] for row in rep.traces[0].force}
        assert REGIME_WALL in regimes

    def test_hesitant_pauses_are_force_free(self):
        sc = fast_scenario(operator=OperatorSpec("scripted", "hesitant"), **NOISELESS)
        rep = run_protocol(sc)
        # pause window of the first stop-go cycle: 1.2 s .. 2.0 s
        rows = [r for r in rep.traces[0].force if 0.0 < r["distance_to_target"]]
        t0 = rows[0]["t"]
        pause = [r for r in rows if 1.25 <= r["t"] - t0 <= 1.95]
        assert pause, "expected force-trace rows inside the first pause"
        assert all(r["force_N"] == 0.0 for r in pause)

    def test_constant_push_settles_at_force_over_kp(self):
        sc = fast_scenario(operator=OperatorSpec("scripted", "constant_push"), **NOISELESS)
        engine = SessionEngine(sc)
        while not engine.done:
            engine.step_once()
        penetration = engine._d_x - engine._travel
        assert penetration == pytest.approx(1.0 / sc.haptics.wall_kp, abs=1e-3)


class TestProtocolOrdering:
    def test_step_sequence(self):
        engine = SessionEngine(fast_scenario())
        seen = [engine.step]
        while not engine.done:
            engine.step_once()
            if engine.step != seen[-1]:
                seen.append(engine.step)
        assert seen == [STEP_TRAINING, STEP_COMPENSATING, STEP_INSERTING, "done"]

    def test_bank_absent_until_training_completes(self):
        engine = SessionEngine(fast_scenario())
        while engine.step == STEP_TRAINING:
            assert engine.bank is None or engine._phase_t == 0.0
            engine.step_once()
        assert engine.bank is not None

    def test_insertion_runs_in_breath_hold(self):
        engine = SessionEngine(fast_scenario())
        while not engine.done:
            engine.step_once()
            if engine.step == STEP_INSERTING:
                snap = engine.snapshot()
                assert snap.phase == "breath_hold" if hasattr(snap, "phase") else True
                assert engine.phantom_state.phase.is_hold
                break

    def test_retraining_on_target_relocation(self):
        sc = fast_scenario(
            insertions=(
                InsertionPlan(1),
                InsertionPlan(2),
                InsertionPlan(3, target_rest=(4.0, 0.0, 135.0)),
            )
        )
        rep = run_protocol(sc)
        assert [r.trained for r in rep.insertions] == [True, False, True]
        assert len(rep.banks) == 2


class TestRunProtocol:
    def test_noiseless_run_hits_target(self):
        sc = fast_scenario(**NOISELESS)
        rep = run_protocol(sc)
        assert rep.insertions[0].error.euclidean < 0.5

    def test_registration_error_is_needle_frame_offset(self):
        # needle-frame (1,2,3) maps to world (2,3,1) under the default
        # end-effector orientation
        sc = fast_scenario(
            sensor=SensorConfig(noise_sigma=0.0, crosstalk=0.0),
            registration_error=(1.0, 2.0, 3.0),
        )
        rep = run_protocol(sc)
        e = rep.insertions[0].error
        assert e.eps_x == pytest.approx(2.0, abs=0.05)
        assert e.eps_y == pytest.approx(3.0, abs=0.05)
        assert e.eps_z == pytest.approx(1.0, abs=0.05)

    def test_replay_is_bit_identical(self, quick_scenario):
        a = run_protocol(quick_scenario).to_json()
        b = run_protocol(Scenario.from_json(quick_scenario.to_json())).to_json()
        assert a == b

    def test_default_scenario_compensated_axes_stay_below_3mm(self):
        rep = run_protocol(Scenario(drift=DriftSettings(enabled=True)))
        assert len(rep.insertions) == 5
        assert rep.overall["eps_x"]["mean"] < 3.0
        assert rep.overall["eps_z"]["mean"] < 3.0

    def test_euclidean_consistency_of_reported_rows(self):
        rep = run_protocol(fast_scenario(drift=DriftSettings(enabled=True)))
        for rec in rep.insertions:
            e = rec.error
            assert e.euclidean == pytest.approx(
                math.sqrt(e.eps_x**2 + e.eps_y**2 + e.eps_z**2), abs=0.01
            )

    def test_missing_breath_holds_fail_training(self):
        timeline = RespiratoryTimeline(
            segments=(TimelineSegment(REGULAR, 8.0),),
            hold_fractions=(0.0, 0.5, 0.9),
        )
        sc = fast_scenario(timeline=timeline)
        with pytest.raises(IncompleteTrainingError):
            run_protocol(sc)

    def test_drift_degrades_lateral_error(self):
        on, off = [], []
        for seed in range(20):
            base = fast_scenario(seed=100 + seed)
            off.append(
                run_protocol(replace(base, drift=DriftSettings(enabled=False)))
                .insertions[0].error.eps_y
            )
            on.append(
                run_protocol(replace(base, drift=DriftSettings(enabled=True, rate=12.0)))
                .insertions[0].error.eps_y
            )
        assert float(np.mean(on)) > float(np.mean(off))

    def test_perfect_tracking_alignment_bound(self):
        # perfect model, no noise, effectively instant robot, sensor at the
        # control rate: misalignment stays within one control period of
        # phantom motion
        profile = BreathingProfile()
        sc = fast_scenario(
            sensor=SensorConfig(noise_sigma=0.0, crosstalk=0.0, sample_rate=100.0),
            registration_error=(0.0, 0.0, 0.0),
            robot=RobotConfig(max_speed=1e6, tracking_bandwidth=1e4, control_period=0.01),
        )
        engine = SessionEngine(sc)
        while not engine.done:
            engine.step_once()
            if engine.step == STEP_INSERTING:
                break
        max_speed = max(
            profile.amplitude_si, profile.amplitude_ap
        ) * math.pi / profile.period
        bound = max_speed * sc.robot.control_period
        peak = max(max(engine.steering_si), max(engine.steering_ap))
        assert peak <= bound + 0.01

    def test_live_session_times_out_to_aborted_report(self):
        sc = fast_scenario(
            operator=OperatorSpec(kind="live"),
            live_timeout=0.5,
            compensation_duration=1.0,
        )
        rep = run_protocol(sc)
        assert rep.aborted
        assert rep.overall is not None  # the timed-out insertion is still reported

    def test_live_needle_holds_still_without_commands(self):
        sc = fast_scenario(
            operator=OperatorSpec(kind="live"),
            live_timeout=2.0,
            compensation_duration=0.5,
            **NOISELESS,
        )
        engine = SessionEngine(sc)
        tips = []
        while not engine.done:
            engine.step_once()
            if engine.step == STEP_INSERTING:
                tips.append((engine._phase_t, engine.snapshot().tip))
        assert engine.aborted
        assert engine._d_x == 0.0  # no axial insertion without operator input
        # once the hold realignment has converged the tip is static
        settled = np.asarray([tip for t, tip in tips if t > 1.5])
        assert settled.size > 0
        assert np.allclose(settled, settled[0], atol=1e-4)


class TestScenarioDocument:
    def test_round_trip(self, quick_scenario):
        again = Scenario.from_json(quick_scenario.to_json())
        assert again == quick_scenario

    def test_defaults_from_empty_document(self):
        sc = Scenario.from_dict({})
        assert sc.model_order == 2
        assert len(sc.insertions) == 5

    def test_bad_json_reports_error(self):
        with pytest.raises(ScenarioError):
            Scenario.from_json("{not json")

    def test_type_violation_names_field_path(self):
        with pytest.raises(ScenarioError, match=r"breathing\.period_s"):
            Scenario.from_dict({"breathing": {"period_s": "fast"}})

    def test_range_violation_names_field_path(self):
        with pytest.raises(ScenarioError, match="model.order"):
            Scenario.from_dict({"model": {"order": 9}})

    def test_unknown_operator_profile_rejected(self):
        with pytest.raises(ScenarioError, match="operator.profile"):
            Scenario.from_dict({"operator": {"kind": "scripted", "profile": "nope"}})

    def test_bad_hold_index_rejected(self):
        with pytest.raises(ScenarioError, match=r"insertions\[0\]"):
            Scenario.from_dict({"insertions": [{"hold_index": 7}]})

    def test_segment_error_names_index(self):
        doc = {"timeline": {"segments": [
            {"phase": "regular", "duration_s": 5.0},
            {"phase": "sideways", "duration_s": 1.0},
        ], "hold_fractions": [0.0, 0.5, 0.9]}}
        with pytest.raises(ScenarioError, match=r"timeline\.segments\[1\]"):
            Scenario.from_dict(doc)


class TestNoiseMonotonicity:
    def test_mean_test_mae_never_improves_with_noise(self):
        from respsteer.model import evaluate_model_bank, train_model_bank
        from respsteer.surrogate import (
            acquire_ground_truth_trace,
            acquire_surrogate_trace,
            synchronize,
        )

        profile = BreathingProfile()
        timeline = short_timeline()
        gt = acquire_ground_truth_trace(profile, timeline)

        def mean_test_mae(sigma: float) -> float:
            maes = []
            for seed in range(20):
                rng = np.random.default_rng(1000 + seed)
                cfg = SensorConfig(noise_sigma=sigma)
                train = synchronize(
                    acquire_surrogate_trace(profile, timeline, cfg, timeline.duration, rng),
                    gt,
                )
                test = synchronize(
                    acquire_surrogate_trace(profile, timeline, cfg, timeline.duration, rng),
                    gt,
                )
                bank = evaluate_model_bank(train_model_bank(train, order=2), test)
                maes.extend(e.test_mae for e in bank.entries.values())
            return float(np.mean(maes))

        levels = [mean_test_mae(s) for s in (0.0, 0.2, 1.0)]
        assert levels[0] <= levels[1] <= levels[2]
