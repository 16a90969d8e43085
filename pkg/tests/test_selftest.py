import pytest

from unislam.exceptions import SlamError
from unislam.selftest import (
    SCHEDULER_TRACE,
    SUITES,
    SuiteResult,
    check_scheduler,
    format_results,
    gradient_oracle_rows,
    run_selftest,
    scheduler_actions,
)


@pytest.mark.parametrize('name', ['scheduler', 'weight-sum', 'uncertainty-bounds', 'ate-invariance',
                                  'marching-cubes', 'loader', 'covisibility'])
def test_suite_passes(name):
    result, = run_selftest([name])

    assert result.name == name
    assert result.passed, result.detail
    assert result.seconds >= 0


@pytest.mark.slow
def test_gradient_suite_passes():
    result, = run_selftest(['gradients'])

    assert result.passed, result.detail


@pytest.mark.slow
def test_gradient_oracle_covers_every_block():
    rows = gradient_oracle_rows()

    assert {'pose.rotation', 'pose.translation'} <= set(rows)
    assert all(row.checked > 0 for row in rows.values())


def test_scheduler_actions_follow_trace():
    assert scheduler_actions() == [action for *_, action in SCHEDULER_TRACE]
    assert check_scheduler()[1].split() == scheduler_actions()


def test_failed_suite_is_reported(monkeypatch):
    def broken():
        raise SlamError('no frames')

    monkeypatch.setitem(SUITES, 'scheduler', broken)

    result, = run_selftest(['scheduler'])

    assert not result.passed
    assert result.detail == 'SlamError: no frames'


def test_unknown_suite():
    with pytest.raises(KeyError):
        run_selftest(['bogus'])


def test_format_results():
    text = format_results([
        SuiteResult('scheduler', True, 'ok', 0.5),
        SuiteResult('gradients', False, 'first\nsecond', 1.25),
    ])

    lines = text.splitlines()
    assert lines[0].startswith('suite')
    assert set(lines[1]) == {'-'}
    assert lines[2].split() == ['scheduler', 'pass', '0.50', 'ok']
    assert lines[3].split() == ['gradients', 'FAIL', '1.25', 'first']
    assert lines[4].strip() == 'second'
