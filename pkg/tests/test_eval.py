import csv
import io

import numpy as np
import pytest

from machine import eval_machine
from machine.eval_machine import ConfusionMatrix
from machine.sewer_spec import ANOMALY, NORMAL, UNDECIDED, EvaluationError, ScoreStream
from machine.sprt_machine import DecisionLog, FrameDecision


def _stream(scores, truth):
    return ScoreStream(t=np.arange(len(scores)), z=scores, y=truth)


def _log(decisions, method='sprt'):
    frames = [FrameDecision(t=t, z=0.0, dllr=0.0, lambda_after=0.0, decision=d) for t, d in enumerate(decisions)]
    return DecisionLog(frames=frames, method=method)


def test_threshold_rule_on_hand_example():
    stream = _stream([0.2, 0.6, 0.4, 0.9, 0.5, 0.1], [0, 1, 0, 1, 1, 0])
    log = eval_machine.threshold_log(stream, 0.5)
    assert log.decisions() == [NORMAL, ANOMALY, NORMAL, ANOMALY, ANOMALY, NORMAL]
    assert eval_machine.confusion(log.decisions(), stream.y) == ConfusionMatrix(tp=3, fp=0, tn=3, fn=0)
    assert len(log.events) == 6


def test_all_decided_correctly():
    truth = [1] * 5 + [0] * 5
    decisions = [ANOMALY] * 5 + [NORMAL] * 5
    assert eval_machine.confusion(decisions, truth) == ConfusionMatrix(tp=5, fp=0, tn=5, fn=0)


def test_undecided_frames_are_excluded():
    truth = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0]
    decisions = [UNDECIDED, ANOMALY, ANOMALY, NORMAL, UNDECIDED, NORMAL, NORMAL, ANOMALY, UNDECIDED, NORMAL]
    cm = eval_machine.confusion(decisions, truth)
    assert cm.decided == 7
    assert cm.excluded_undecided == 3
    assert (cm.tp, cm.fn, cm.fp, cm.tn) == (2, 1, 1, 3)


def test_confusion_rejects_bad_input():
    with pytest.raises(EvaluationError):
        eval_machine.confusion([NORMAL, ANOMALY], [0])
    with pytest.raises(EvaluationError):
        eval_machine.confusion(['maybe'], [0])
    with pytest.raises(EvaluationError):
        eval_machine.confusion([NORMAL], [2])


def test_f1_from_precision_and_recall():
    assert eval_machine.f1_score(0.9785, 0.9112) == pytest.approx(0.9437, abs=5e-4)


def test_metric_identities():
    cm = ConfusionMatrix(tp=40, fp=7, tn=120, fn=9, excluded_undecided=11)
    m = eval_machine.metrics(cm)
    assert m.accuracy == (40 + 120) / 176
    assert m.precision == 40 / 47
    assert m.recall == 40 / 49
    assert m.fpr == 7 / 127
    assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall), abs=1e-12)
    assert not m.degenerate


def test_degenerate_metrics_are_flagged():
    m = eval_machine.metrics(ConfusionMatrix(tn=10))
    assert m.precision == 0.0 and m.recall == 0.0 and m.f1 == 0.0
    assert set(m.undefined) == {'precision', 'recall', 'f1'}
    assert m.accuracy == 1.0
    with pytest.raises(EvaluationError):
        eval_machine.metrics(ConfusionMatrix(excluded_undecided=4))


def test_perfect_matrix():
    m = eval_machine.metrics(ConfusionMatrix(tp=4, tn=6))
    assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)
    assert m.fpr == 0.0


def test_metrics_invariant_under_joint_permutation():
    rng = np.random.default_rng(0)
    truth = rng.integers(0, 2, size=100)
    decisions = list(rng.choice([NORMAL, ANOMALY, UNDECIDED], size=100))
    base = eval_machine.metrics(eval_machine.confusion(decisions, truth))
    for _ in range(10):
        order = rng.permutation(100)
        shuffled = eval_machine.metrics(eval_machine.confusion([decisions[i] for i in order], truth[order]))
        assert shuffled == base


def test_threshold_metrics_match_brute_force():
    rng = np.random.default_rng(1)
    z = rng.random(300)
    truth = (rng.random(300) < z).astype(int)
    tau = 0.55
    cm = eval_machine.confusion(eval_machine.threshold_log(_stream(z, truth), tau).decisions(), truth)
    predicted = z >= tau
    assert cm.tp == int(np.sum(predicted & (truth == 1)))
    assert cm.fp == int(np.sum(predicted & (truth == 0)))
    assert cm.excluded_undecided == 0


def test_identical_logs_give_zero_deltas():
    truth = [0, 1, 1, 0, 1, 0]
    log = _log([NORMAL, ANOMALY, NORMAL, NORMAL, ANOMALY, ANOMALY])
    report = eval_machine.compare(log, log, truth)
    assert len(report.rows) == 2
    assert all(delta == 0.0 for delta in report.deltas.values())


def test_fewer_errors_give_positive_f1_delta(tmp_path):
    truth = [0, 0, 1, 1, 1, 0, 0, 1]
    threshold = _log([ANOMALY, NORMAL, ANOMALY, NORMAL, ANOMALY, ANOMALY, NORMAL, ANOMALY], 'threshold')
    sprt = _log([NORMAL, NORMAL, ANOMALY, ANOMALY, ANOMALY, NORMAL, UNDECIDED, UNDECIDED])
    report = eval_machine.compare(threshold, sprt, truth)
    assert report.deltas['f1'] > 0
    assert report.deltas['fpr'] < 0
    assert report.rows[1].undecided_frames == 2

    report.write(tmp_path / 'report.csv', tmp_path / 'report.txt')
    rows = list(csv.DictReader(io.StringIO((tmp_path / 'report.csv').read_text())))
    assert [row['method'] for row in rows] == ['FCDD', 'FCDD+SPRT']
    assert rows[1]['f1'] == '100.00'
    assert rows[1]['decided_frames'] == '6'
    table = (tmp_path / 'report.txt').read_text()
    assert 'F1-Score' in table and 'delta' in table


def test_compare_rejects_mismatched_ranges():
    log = _log([NORMAL, ANOMALY, NORMAL])
    with pytest.raises(EvaluationError):
        eval_machine.compare(log, _log([NORMAL, ANOMALY]), [0, 1, 0])
    with pytest.raises(EvaluationError):
        eval_machine.compare(log, log, [0, 1])
    shifted = DecisionLog(frames=[FrameDecision(t=t + 1, z=0.0, dllr=None, lambda_after=None, decision=NORMAL) for t in range(3)])
    with pytest.raises(EvaluationError):
        eval_machine.compare(log, shifted, [0, 1, 0])


def test_log_without_decisions_is_reported_as_undefined():
    log = _log([UNDECIDED] * 4)
    threshold = _log([NORMAL, ANOMALY, ANOMALY, NORMAL], 'threshold')
    report = eval_machine.compare(threshold, log, [0, 1, 1, 0])
    row = report.rows[1]
    assert row.decided_frames == 0 and row.undecided_frames == 4
    assert row.metrics.undefined == eval_machine.METRIC_NAMES
    assert 'accuracy;precision;recall;fpr;f1' in report.csv_text()
