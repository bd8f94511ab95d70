import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_hp
from refine_rl.data import NormStats
from refine_rl.envs import POINTMASS, ReferenceScores
from refine_rl.evaluation import EvalReport, aggregate, evaluate_policy, normalized_score
from refine_rl.nn import flatten
from refine_rl.training import init_agent

REFS = ReferenceScores("pointmass", -300.0, -20.0)


def report(returns, env="pointmass", seed=0):
    return EvalReport(env, list(returns), float(np.mean(returns)), float(np.std(returns)),
                      len(returns), seed)


def test_evaluate_policy_contracts():
    agent = init_agent(POINTMASS, tiny_hp(), 0)
    stats = NormStats.identity(6)
    before = b"".join(flatten(n).tobytes() for n in agent.networks())
    one = evaluate_policy(agent, POINTMASS, stats, 1, 5)
    assert one.std == 0.0 and one.episodes == 1
    rep = evaluate_policy(agent, POINTMASS, stats, 4, 5)
    assert rep == evaluate_policy(agent, POINTMASS, stats, 4, 5)
    assert rep.mean == pytest.approx(sum(rep.returns) / 4, rel=1e-15)
    # adding episodes never shifts the earlier ones
    assert rep.returns[0] == one.returns[0]
    assert b"".join(flatten(n).tobytes() for n in agent.networks()) == before
    with pytest.raises(ValueError):
        evaluate_policy(agent, POINTMASS, stats, 0, 5)


def test_normalized_score_examples():
    assert normalized_score(-300.0, REFS) == 0.0
    assert normalized_score(-20.0, REFS) == 100.0
    assert normalized_score(-160.0, REFS) == 50.0
    assert normalized_score(-580.0, REFS) == -100.0
    with pytest.raises(ValueError):
        normalized_score(0.0, SimpleNamespace(env="x", random_return=1.0, expert_return=1.0))


@given(st.floats(0.0, 1.0))
def test_normalized_score_is_affine(t):
    raw = (1 - t) * REFS.random_return + t * REFS.expert_return
    assert normalized_score(raw, REFS) == pytest.approx(100 * t, abs=1e-9)


def test_aggregate_examples():
    agg = aggregate([report([1.0, 3.0]), report([5.0, 7.0], seed=1)], REFS)
    assert agg.mean == 4.0
    assert agg.std == pytest.approx(math.sqrt(5.0), rel=1e-15)
    assert agg.normalized_std == pytest.approx(100 * math.sqrt(5.0) / 280.0, rel=1e-12)
    single = report([-50.0, -70.0, -90.0])
    agg = aggregate([single], REFS)
    assert (agg.mean, agg.std) == (single.mean, single.std)
    agg = aggregate([report([-5.0] * 3), report([-5.0] * 4)], REFS)
    assert (agg.mean, agg.std) == (-5.0, 0.0)


def test_aggregate_errors():
    with pytest.raises(ValueError):
        aggregate([], REFS)
    with pytest.raises(ValueError):
        aggregate([report([1.0]), report([2.0], env="pendulum")], REFS)


@given(st.lists(st.lists(st.floats(-500, 0), min_size=1, max_size=6), min_size=1, max_size=5),
       st.randoms())
def test_aggregate_permutation_invariant(groups, rnd):
    reps = [report(g) for g in groups]
    a = aggregate(reps, REFS)
    shuffled = [report(rnd.sample(g, len(g))) for g in groups]
    rnd.shuffle(shuffled)
    b = aggregate(shuffled, REFS)
    assert a.mean == pytest.approx(b.mean, rel=1e-12, abs=1e-9)
    assert a.std == pytest.approx(b.std, rel=1e-9, abs=1e-9)
