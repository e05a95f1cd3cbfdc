import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynrel.channel import (BAD, GOOD, PRESETS, GilbertElliott, Link, LinkProfile, RandomLoss, burst_preset,
                            empirical_loss, ge_step, loss_label, preset, stationary_loss)
from dynrel.sim import RngStream


def _stationary_by_eigenvector(p_gb, p_bg, lg, lb):
    # independent oracle: left eigenvector of the transition matrix
    P = np.array([[1 - p_gb, p_gb], [p_bg, 1 - p_bg]])
    w, v = np.linalg.eig(P.T)
    pi = np.real(v[:, np.argmin(abs(w - 1))])
    pi = pi / pi.sum()
    return pi[1], pi[0] * lg + pi[1] * lb


def test_stationary_loss_worked_example():
    pi_b, oracle = _stationary_by_eigenvector(0.01, 0.5, 0.0, 0.5)
    assert pi_b == pytest.approx(0.019608, abs=1e-6)
    assert oracle == pytest.approx(0.009804, abs=1e-6)
    assert stationary_loss(GilbertElliott(0.01, 0.5, 0.0, 0.5)) == pytest.approx(0.009804, abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.001, 1), st.floats(0.001, 1), st.floats(0, 1), st.floats(0, 1))
def test_stationary_loss_matches_eigenvector_oracle(p_gb, p_bg, lg, lb):
    _, oracle = _stationary_by_eigenvector(p_gb, p_bg, lg, lb)
    assert stationary_loss(GilbertElliott(p_gb, p_bg, lg, lb)) == pytest.approx(oracle, abs=1e-9)


@given(st.floats(0.001, 1), st.floats(0.001, 1), st.floats(0, 1))
def test_state_independent_loss(p_gb, p_bg, q):
    assert stationary_loss(GilbertElliott(p_gb, p_bg, q, q)) == pytest.approx(q)


def test_absorbing_good_state():
    assert stationary_loss(GilbertElliott(0.0, 0.5, 0.0, 0.5)) == 0.0


def test_non_ergodic_chain_rejected():
    with pytest.raises(ValueError, match="non-ergodic"):
        stationary_loss(GilbertElliott(0.0, 0.0))


def test_ge_step_thresholds():
    ge = GilbertElliott(0.3, 0.5)
    assert ge_step(ge, 0.2, 0.99)[0] == BAD
    ge = GilbertElliott(0.3, 0.5, loss_bad=1.0, state=BAD)
    assert ge_step(ge, 0.9, 0.999999) == (BAD, True)
    ge = GilbertElliott(0.3, 0.5, state=BAD)
    assert ge_step(ge, 0.4, 0.0) == (GOOD, False)


@pytest.mark.parametrize("target", [0.01, 0.03, 0.05, 0.10])
def test_burst_preset_hits_target(target):
    ge = burst_preset(target)
    assert (ge.p_bg, ge.loss_good, ge.loss_bad) == (0.5, 0.0, 0.5)
    assert stationary_loss(ge) == pytest.approx(target, abs=1e-12)


def test_burst_preset_rejects_unreachable_target():
    with pytest.raises(ValueError):
        burst_preset(0.6)


def test_gilbert_elliott_monte_carlo():
    ge = GilbertElliott(0.01, 0.5, 0.0, 0.5)
    est = empirical_loss(ge, RngStream(3, "mc"), 10**6)
    assert abs(est - stationary_loss(ge)) / stationary_loss(ge) <= 0.05
    assert ge.state == GOOD  # calibration works on a copy


def test_random_loss_monte_carlo():
    est = empirical_loss(RandomLoss(0.007), RngStream(3, "mc"), 10**6)
    assert abs(est - 0.007) / 0.007 <= 0.05


def _link(profile, seed=0):
    return Link(profile, RngStream(seed, "loss"), RngStream(seed, "delay"))


def test_wifi_serialization_example():
    prof = LinkProfile(30e6, 20_000, 0, RandomLoss(0.0))
    # 1230 B * 8 / 30 Mb/s, done with exact rationals
    exact_us = Fraction(1230 * 8, 30_000_000) * 1_000_000
    assert exact_us == 328
    link = _link(prof)
    assert link.serialization_ns(1230) == 328_000
    assert link.transit(1230, 5_000) == 5_000 + 328 + 20_000


def test_back_to_back_packets_queue():
    link = _link(LinkProfile(30e6, 20_000, 0))
    a = link.transit(1230, 0)
    b = link.transit(1230, 0)
    assert b - a == 328


def test_certain_loss_always_drops():
    link = _link(LinkProfile(1e9, 1000, 100, RandomLoss(1.0)))
    assert all(link.transit(100, t) is None for t in range(0, 5000, 10))
    assert link.dropped == link.accepted == 500


def test_zero_jitter_delay_is_exact():
    link = _link(LinkProfile(8e9, 2_000, 0))  # 1 byte = 1 ns
    assert link.transit(1000, 100) == 100 + 1 + 2_000


def test_table_presets():
    assert preset("sub6") == LinkProfile(1100e6, 27_400, 6_400, RandomLoss(0.001))
    assert preset("wifi") == LinkProfile(30e6, 20_000, 10_000, RandomLoss(0.007))
    assert preset("mmwave") == LinkProfile(2500e6, 2_000, 1_000, RandomLoss(0.001))
    with pytest.raises(KeyError):
        preset("lte")


def test_loss_label():
    assert loss_label(RandomLoss(0.01)) == ("random", 0.01)
    assert loss_label(burst_preset(0.05)) == ("burst", 0.05)


def test_link_owns_its_chain_state():
    ge = burst_preset(0.1)
    link = _link(LinkProfile(1e9, 0, 0, ge))
    for t in range(2000):
        link.transit(100, t)
    assert ge.state == GOOD


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(sorted(PRESETS)), st.integers(0, 10**6),
       st.lists(st.tuples(st.integers(0, 3000), st.integers(41, 1230)), min_size=1, max_size=200))
def test_arrivals_are_fifo_and_never_early(name, seed, sends):
    prof = PRESETS[name].with_loss(RandomLoss(0.0))
    link = _link(prof, seed)
    now, last = 0, -1
    for gap, size in sends:
        now += gap
        arr = link.transit(size, now)
        assert arr >= last
        # truncated delay: never earlier than serialization alone allows
        assert arr >= now + math.ceil(link.serialization_ns(size) / 1000)
        last = arr
