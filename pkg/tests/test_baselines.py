from fractions import Fraction

import numpy as np
import pytest

from popstab.baselines import (
    BaselineKernel,
    BaselineOptions,
    BaselineState,
    attempt1_message,
    attempt1_step,
    attempt2_step,
)
from popstab.core import validate_and_derive
from popstab.engine import RunConfig, Simulation, run_simulation
from popstab.protocol import ACT_DIE_EVAL, ACT_SPLIT, AgentAction
from popstab.scheduler import partner_indices
from popstab.streams import seed_streams


@pytest.fixture
def p12():
    return validate_and_derive({"n_target": 4096, "gamma": 1, "adversary_budget": 8, "alpha": "1/10"})


def test_coin_holder_transmits_one():
    assert attempt1_message(BaselineState("attempt1", phase_round=3, coin=1)) == 1
    assert attempt1_message(BaselineState("attempt1", phase_round=3, seen_one=1)) == 1
    assert attempt1_message(BaselineState("attempt1", phase_round=3)) == 0


def test_seen_one_is_sticky(p12):
    s = BaselineState("attempt1", phase_round=1)
    s, _ = attempt1_step(s, 1, p12, seed_streams(0, 1, 0))
    for r in range(2, 10):
        s, act = attempt1_step(s, 0, p12, seed_streams(0, r, 0))
        assert s.seen_one == 1 and act is AgentAction.NONE
    s, _ = attempt1_step(s, None, p12, seed_streams(0, 10, 0))
    assert s.seen_one == 1


def _attempt2_to_last(p12, color, first, second):
    opts = BaselineOptions()
    s = BaselineState("attempt2", phase_round=1, color=color)
    s, _ = attempt2_step(s, first, p12, seed_streams(0, 0, 0), opts)
    s, _ = attempt2_step(s, second, p12, seed_streams(0, 0, 0), opts)
    return s


def test_attempt2_equal_colours_split(p12):
    s = _attempt2_to_last(p12, 0, 1, 1)
    assert s.phase_round == 3 and s.same_color == 1
    # 1 - 2/N split probability: find a stream that allows it
    out, act = attempt2_step(s, None, p12, seed_streams(0, 3, 0))
    assert act is AgentAction.SPLIT and out.phase_round == 0


def test_attempt2_unequal_colours_die(p12):
    s = _attempt2_to_last(p12, 0, 1, 0)
    _, act = attempt2_step(s, None, p12, seed_streams(0, 3, 0))
    assert act is AgentAction.DIE


def test_attempt2_too_few_meetings_nothing(p12):
    s = _attempt2_to_last(p12, 0, None, 1)
    assert s.seen_count == 1
    _, act = attempt2_step(s, None, p12, seed_streams(0, 3, 0))
    assert act is AgentAction.NONE


@pytest.mark.parametrize("variant", ["attempt1", "attempt2"])
@pytest.mark.parametrize("seed", range(3))
def test_kernel_matches_scalar(p12, variant, seed):
    rng = np.random.default_rng(seed)
    kernel = BaselineKernel(p12, variant)
    n = 240
    cols = kernel.empty_columns(n)
    cols["phase_round"][:] = rng.integers(0, kernel.period, n)
    for name in ("coin", "seen_one", "color", "first_color", "same_color"):
        cols[name][:] = rng.integers(0, 2, n)
    cols["seen_count"][:] = rng.integers(0, 3, n)
    # force many decisions in attempt 1 (grow/shrink draws are rare otherwise)
    opts = BaselineOptions(attempt1_shrink=0.3, attempt1_grow=0.4)
    kernel = BaselineKernel(p12, variant, opts)
    partner = partner_indices(n, Fraction(3, 4), rng)
    handles = np.arange(1000, 1000 + n, dtype=np.int64)
    res = kernel.step(cols, partner, 77, seed, handles)
    step = attempt1_step if variant == "attempt1" else attempt2_step
    msgs = kernel.messages(cols)
    for i in range(n):
        nbr = int(msgs[partner[i]]) if partner[i] >= 0 else None
        out, act = step(kernel.state_at(cols, i), nbr, p12, seed_streams(seed, 77, int(handles[i])), opts)
        assert kernel.state_at(res.columns, i) == out
        code = {AgentAction.NONE: 0, AgentAction.SPLIT: ACT_SPLIT, AgentAction.DIE: ACT_DIE_EVAL}[act]
        assert res.action[i] == code


def test_same_colour_pair_probability():
    # exact: (C(a,2) + C(b,2)) / C(m,2) for fixed colour counts a, b
    params = validate_and_derive({"n_target": 4096, "gamma": 1, "adversary_budget": 0, "alpha": "1/10"})
    kernel = BaselineKernel(params, "attempt2")
    a, b = 4, 2
    m = a + b
    exact = (a * (a - 1) / 2 + b * (b - 1) / 2) / (m * (m - 1) / 2)
    assert exact == pytest.approx(7 / 15)
    rng = np.random.default_rng(9)
    cols = kernel.empty_columns(m)
    cols["phase_round"][:] = 1
    cols["color"][:] = [0] * a + [1] * b
    same = total = 0
    for t in range(20000):
        partner = partner_indices(m, Fraction(1), rng)
        res = kernel.step(cols, partner, t, 0, np.arange(m, dtype=np.int64))
        same += int(np.count_nonzero(res.columns["first_color"] == cols["color"]))
        total += m
    assert abs(same / total - exact) < 0.01
    # the bias over 1/2 is of order 1/m
    assert exact - 0.5 == pytest.approx(-1 / (2 * (m - 1)) + (a - b) ** 2 / (2 * m * (m - 1)))


def test_attempt1_grows_under_leader_assassin(p12):
    kernel = BaselineKernel(p12, "attempt1")
    L = kernel.period
    res = run_simulation(RunConfig(p12, seed=3, max_rounds=20 * L, protocol="attempt1", strategy="leader_assassin"))
    sizes = [o.population_size for o in res.trajectory if o.round_index % L == L - 1]
    assert all(b >= a for a, b in zip(sizes, sizes[1:]))
    assert sum(o.deaths_eval for o in res.trajectory) == 0
    assert sizes[-1] > 1.3 * 4096


def test_same_engine_config_switch(p12):
    for protocol in ("main", "attempt1", "attempt2"):
        sim = Simulation(RunConfig(p12, seed=1, max_rounds=10, protocol=protocol))
        assert sim.kernel.name == protocol
        assert len(sim.run().trajectory) == 10


def test_attempt2_exits_fast(p12):
    res = run_simulation(RunConfig(p12, seed=1, max_rounds=10**5, protocol="attempt2", stop_on_violation=True))
    assert res.first_violation_round is not None and res.first_violation_round < 10**5


def test_options_validation(p12):
    with pytest.raises(ValueError):
        BaselineKernel(p12, "attempt3")
    with pytest.raises(ValueError):
        BaselineKernel(p12, "attempt2", BaselineOptions(attempt2_phase_rounds=2))
