import math

import numpy as np
import pytest

from machine import sprt_machine, synth_machine
from machine.sewer_spec import (
    ANOMALY,
    NORMAL,
    UNDECIDED,
    GammaParams,
    GmmParams,
    HypothesisModels,
    ScoreStream,
    SegmentPlan,
    SewerFormatError,
    SpecificationError,
)
from machine.sprt_machine import ErrorSpec, SprtMachine

SYMMETRIC = ErrorSpec(alpha=0.05, beta=0.05)


@pytest.fixture(scope='module')
def separated_models():
    return HypothesisModels(h0=GammaParams(k=2.0, theta=0.25), h1=GmmParams.single(3.0, 0.0625), tau=1.5)


def _push_all(machine, increments):
    return [machine.push(t, 0.0, increment) for t, increment in enumerate(increments)]


def test_bounds_examples():
    symmetric = sprt_machine.bounds(SYMMETRIC)
    assert symmetric.a == pytest.approx(-2.9444, abs=1e-4)
    assert symmetric.b == pytest.approx(2.9444, abs=1e-4)

    default = sprt_machine.bounds(ErrorSpec())
    assert default.a == pytest.approx(-4.6052, abs=1e-4)
    assert default.b == pytest.approx(13.8055, abs=1e-4)
    assert default.b == pytest.approx(math.log(0.99 / 1e-6), abs=1e-12)


@pytest.mark.parametrize('rate', [1e-6, 0.01, 0.05, 0.2, 0.45])
def test_equal_error_rates_give_symmetric_bounds(rate):
    result = sprt_machine.bounds(ErrorSpec(alpha=rate, beta=rate))
    assert result.a == pytest.approx(-result.b, abs=1e-12)


def test_invalid_error_spec():
    with pytest.raises(SpecificationError):
        ErrorSpec(alpha=0.0, beta=0.01)
    with pytest.raises(SpecificationError):
        ErrorSpec(alpha=0.6, beta=0.5)
    with pytest.raises(SpecificationError):
        ErrorSpec(alpha=0.01, beta=1.0)


def test_llr_increment_hand_example():
    models = HypothesisModels(h0=GammaParams(k=1.0, theta=1.0), h1=GmmParams.single(3.0, 1.0), tau=1.0)
    assert sprt_machine.llr_increment(3.0, models) == pytest.approx(3.0 - 0.5 * math.log(2 * math.pi), abs=1e-12)
    assert sprt_machine.llr_increment(3.0, models) == pytest.approx(2.0811, abs=1e-4)


def test_llr_increment_increases_with_score(separated_models):
    grid = np.linspace(0.05, 3.0, 400)
    increments = sprt_machine.llr_increment(grid, separated_models)
    assert np.all(np.diff(increments) > 0)
    assert np.all(np.isfinite(sprt_machine.llr_increment(np.array([-1.0, 0.0, 1e4]), separated_models)))


def test_reaching_upper_bound_exactly_decides_anomaly(separated_models):
    machine = SprtMachine(separated_models, SYMMETRIC)
    event = machine.push(0, 0.0, machine.bounds.b)
    assert event.verdict == ANOMALY
    assert machine.state.lambda_ == 0.0
    assert machine.state.window_start == 1


def test_step_is_pure(separated_models):
    bounds = sprt_machine.bounds(SYMMETRIC)
    state = sprt_machine.SprtState()
    first, event = sprt_machine.step(state, 2.2, bounds, separated_models)
    assert state.lambda_ == 0.0
    assert event is None
    assert first.lambda_ == pytest.approx(sprt_machine.llr_increment(2.2, separated_models))
    assert first.t == 1


def test_zero_increments_never_decide(separated_models):
    machine = SprtMachine(separated_models, SYMMETRIC)
    assert all(event is None for event in _push_all(machine, [0.0] * 200))
    assert machine.log().counts()[UNDECIDED] == 200


def test_unit_increments_decide_on_third_frame(separated_models):
    machine = SprtMachine(separated_models, SYMMETRIC)
    events = _push_all(machine, [1.0, 1.0, 1.0, 0.5, 0.5])
    assert events[:2] == [None, None]
    assert events[2].t_decided == 2
    assert events[2].window_start == 0
    log = machine.log()
    assert log.decisions() == [ANOMALY, ANOMALY, ANOMALY, UNDECIDED, UNDECIDED]
    assert log.frames[2].lambda_after == 0.0
    assert log.windows() == [(0, 2, ANOMALY), (3, 4, UNDECIDED)]


def test_closing_frame_only_labelling(separated_models):
    machine = SprtMachine(separated_models, SYMMETRIC, retroactive=False)
    _push_all(machine, [-1.0, -1.0, -1.0, 1.0])
    log = machine.log()
    assert log.decisions() == [UNDECIDED, UNDECIDED, NORMAL, UNDECIDED]
    assert log.events[0].window_start == 0


def test_reset_clears_state(separated_models):
    machine = SprtMachine(separated_models, SYMMETRIC)
    _push_all(machine, [1.0, 1.0])
    machine.reset()
    assert machine.state.lambda_ == 0.0
    assert len(machine.log()) == 0


def test_decision_time_grows_with_upper_bound(separated_models):
    times = []
    for alpha in (0.2, 0.05, 0.01, 1e-3, 1e-6):
        machine = SprtMachine(separated_models, ErrorSpec(alpha=alpha, beta=0.01))
        events = [e for e in _push_all(machine, [0.7] * 100) if e is not None]
        times.append(events[0].t_decided)
    assert times == sorted(times)


def test_run_on_anomalous_stream(separated_models):
    plan = SegmentPlan(total_frames=500, segments=[(0, 500, 1)])
    stream = synth_machine.gen_score_stream(separated_models.h0, separated_models.h1, plan, 2)
    log = sprt_machine.run(stream, separated_models)
    verdicts = [event.verdict for event in log.events]
    assert verdicts
    assert verdicts.count(ANOMALY) >= 0.99 * len(verdicts)


def test_run_log_is_complete_and_deterministic(separated_models):
    plan = synth_machine.random_plan(400, 3, 20, 60, 5)
    stream = synth_machine.gen_score_stream(separated_models.h0, separated_models.h1, plan, 5)
    log = sprt_machine.run(stream, separated_models, SYMMETRIC)
    assert list(log.t) == list(range(400))
    covered = []
    for start, end, _ in log.windows():
        covered.extend(range(start, end + 1))
    assert covered == list(range(400))
    for frame in log.frames:
        if frame.decision != UNDECIDED and any(e.t_decided == frame.t for e in log.events):
            assert frame.lambda_after == 0.0
    assert sprt_machine.run(stream, separated_models, SYMMETRIC).records() == log.records()


def test_splicing_after_a_decision_reproduces_the_tail(separated_models):
    plan = SegmentPlan(total_frames=200, segments=[(50, 120, 1)])
    stream = synth_machine.gen_score_stream(separated_models.h0, separated_models.h1, plan, 9)
    full = sprt_machine.run(stream, separated_models, SYMMETRIC)
    cut = full.events[len(full.events) // 2].t_decided + 1
    tail = sprt_machine.run(stream.slice(cut), separated_models, SYMMETRIC)
    assert tail.records() == full.records()[cut:]


def test_run_rejects_empty_stream(separated_models):
    with pytest.raises(SpecificationError):
        sprt_machine.run(ScoreStream.empty(), separated_models)


def test_wald_error_guarantee():
    models = HypothesisModels(h0=GammaParams(k=4.0, theta=0.25), h1=GmmParams.single(2.0, 0.25), tau=1.5)
    alpha = beta = 0.05
    oc = sprt_machine.operating_characteristics(models, ErrorSpec(alpha, beta), n_streams=10000, max_frames=200, seed=1)
    assert oc.false_positive_rate <= alpha / (1 - beta) + 3 * oc.false_positive_se
    assert oc.miss_rate <= beta / (1 - alpha) + 3 * oc.miss_se
    assert oc.undecided_h0 < 0.01 and oc.undecided_h1 < 0.01
    assert oc.mean_sample_number_h0 >= 1.0


def test_decision_log_files(tmp_path, separated_models):
    plan = SegmentPlan(total_frames=60, segments=[(20, 40, 1)])
    stream = synth_machine.gen_score_stream(separated_models.h0, separated_models.h1, plan, 3)
    log = sprt_machine.run(stream, separated_models)
    sprt_machine.write_decision_log(tmp_path / 'log.jsonl', log)
    sprt_machine.write_summary(tmp_path / 'summary.json', log)
    loaded = sprt_machine.read_decision_log(tmp_path / 'log.jsonl', tmp_path / 'summary.json')
    assert loaded.records() == log.records()
    assert loaded.events == log.events
    assert loaded.bounds == log.bounds
    assert loaded.spec == log.spec

    (tmp_path / 'bad.jsonl').write_text('{"t": 0, "z": 1.0, "decision": "maybe"}\n')
    with pytest.raises(SewerFormatError):
        sprt_machine.read_decision_log(tmp_path / 'bad.jsonl')
