"""Acceptance suite: one test per criterion, each printing a pass/fail line."""

import pytest

from srtransport import acceptance


@pytest.fixture
def check(record_property):
    def run(fn):
        res = fn()
        print(res.line())
        record_property("criterion_line", res.line())
        assert res.passed, res.detail
    return run


def test_criterion_01_line_field(check):
    check(acceptance.criterion_line_field)


def test_criterion_02_vanishing(check):
    check(acceptance.criterion_vanishing)


def test_criterion_03_divergence(check):
    check(acceptance.criterion_divergence)


def test_criterion_04_volume(check):
    check(acceptance.criterion_volume)


def test_criterion_05_contraction(check):
    check(acceptance.criterion_contraction)


def test_criterion_06_rank(check):
    check(acceptance.criterion_rank)


def test_criterion_07_distance(check):
    check(acceptance.criterion_distance)


def test_criterion_08_transport(check):
    check(acceptance.criterion_transport)


def test_criterion_09_static(check):
    check(acceptance.criterion_static)


def test_criterion_10_semiconvex(check):
    check(acceptance.criterion_semiconvex)
