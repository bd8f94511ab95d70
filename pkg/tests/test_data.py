import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_dataset
from refine_rl.data import (
    MAGIC, DatasetError, NormStats, ReplayBuffer, TransitionDataset, compute_norm_stats,
    concatenate, load_dataset, meta_path, normalize_state, read_meta, sample_minibatch,
    save_dataset,
)
from refine_rl.rng import Rng


def dataset_from_states(states) -> TransitionDataset:
    s = np.asarray(states, dtype=np.float32).reshape(len(states), -1)
    n = len(s)
    return TransitionDataset("pointmass", "medium", s, np.zeros((n, 1)), np.zeros(n),
                             s + 100.0, np.zeros(n, bool))


def test_norm_stats_examples():
    st0 = compute_norm_stats(dataset_from_states([[0.0], [2.0]]))
    assert st0.mu.tolist() == [1.0] and st0.sigma.tolist() == [1.0]
    same = compute_norm_stats(dataset_from_states([[3.0, -1.0]] * 4))
    assert same.sigma.tolist() == [0.0, 0.0]
    assert normalize_state(same, [3.0, -1.0]).tolist() == [0.0, 0.0]


def test_norm_stats_ignore_next_states(pm_dataset):
    st_ = compute_norm_stats(pm_dataset)
    s = pm_dataset.obs.astype(np.float64)
    # brute-force two-pass mean and population std
    n = len(s)
    mu = [sum(s[:, j]) / n for j in range(s.shape[1])]
    sd = [(sum((s[:, j] - mu[j]) ** 2) / n) ** 0.5 for j in range(s.shape[1])]
    np.testing.assert_allclose(st_.mu, mu, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(st_.sigma, sd, rtol=1e-10)


def test_normalize_state_examples():
    assert normalize_state(NormStats(np.zeros(1), np.array([0.999])), [1.0]).tolist() == [1.0]
    assert normalize_state(NormStats(np.array([5.0]), np.zeros(1)), [5.0]).tolist() == [0.0]
    stats = NormStats(np.array([1.0, 2.0]), np.array([0.5, 3.0]))
    assert np.all(normalize_state(stats, stats.mu) == 0)
    with pytest.raises(DatasetError):
        normalize_state(stats, [1.0, 2.0, 3.0])


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(2, 40), st.integers(1, 4)),
              elements=st.floats(-100, 100, width=32)))
def test_normalized_dataset_moments(states):
    stats = compute_norm_stats(dataset_from_states(states))
    z = normalize_state(stats, states.astype(np.float64))
    assert np.all(np.abs(z.mean(axis=0)) <= 1e-9)
    np.testing.assert_allclose(z.std(axis=0), stats.sigma / (stats.sigma + 1e-3),
                               rtol=1e-9, atol=1e-12)


def test_sample_minibatch_size_one_source():
    ds = dataset_from_states([[4.0]])
    b = sample_minibatch(ds, 7, Rng(0))
    assert b.s.shape == (7, 1) and np.all(b.s == 4.0) and np.all(b.s_next == 104.0)


def test_sample_minibatch_repeatable_and_normalized(pm_dataset):
    stats = compute_norm_stats(pm_dataset)
    a = sample_minibatch(pm_dataset, 16, Rng(3), stats)
    b = sample_minibatch(pm_dataset, 16, Rng(3), stats)
    assert a.s.tobytes() == b.s.tobytes() and a.a.tobytes() == b.a.tobytes()
    idx = Rng(3).integers(pm_dataset.size, 16)
    np.testing.assert_array_equal(a.s, stats.normalize(pm_dataset.obs[idx].astype(float)))
    np.testing.assert_array_equal(a.s_next, stats.normalize(pm_dataset.next_obs[idx].astype(float)))
    np.testing.assert_array_equal(a.r, pm_dataset.rewards[idx])


def test_sampling_is_uniform():
    ds = dataset_from_states([[float(i)] for i in range(10)])
    b = sample_minibatch(ds, 1_000_000, Rng(2024))
    counts = np.bincount(b.s[:, 0].astype(int), minlength=10)
    expected = 100_000
    sd = (1_000_000 * 0.1 * 0.9) ** 0.5
    assert np.all(np.abs(counts - expected) <= 3 * sd)
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    # upper 0.001 quantile of chi-square with 9 degrees of freedom
    assert chi2 < 27.877


def test_sampling_empty_source():
    with pytest.raises(DatasetError):
        sample_minibatch(ReplayBuffer(4, 1, 1), 2, Rng(0))


def push_n(buf, n, start=0):
    for i in range(start, start + n):
        buf.push([i], [i], float(i), [i + 1], False)


def test_ring_buffer_semantics():
    buf = ReplayBuffer(2, 1, 1)
    push_n(buf, 3, start=1)
    assert sorted(buf.rewards.tolist()) == [2.0, 3.0]
    buf = ReplayBuffer(10, 1, 1)
    push_n(buf, 4)
    assert buf.size == 4
    buf = ReplayBuffer(5, 1, 1)
    push_n(buf, 6)
    assert buf.write_head == 1 and buf.size == 5


@settings(max_examples=30)
@given(st.integers(1, 20), st.integers(0, 60))
def test_ring_buffer_keeps_newest(capacity, n):
    buf = ReplayBuffer(capacity, 1, 1)
    push_n(buf, n)
    assert buf.size == min(n, capacity)
    assert buf.write_head == n % capacity
    assert sorted(buf.rewards[:buf.size].tolist()) == list(map(float, range(max(0, n - capacity), n)))


def test_dataset_validation():
    with pytest.raises(DatasetError):
        TransitionDataset("pointmass", "bogus", np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1),
                          np.zeros((1, 1)), np.zeros(1, bool))
    with pytest.raises(DatasetError):
        TransitionDataset("pointmass", "medium", np.zeros((0, 1)), np.zeros((0, 1)), np.zeros(0),
                          np.zeros((0, 1)), np.zeros(0, bool))
    with pytest.raises(DatasetError):
        TransitionDataset("pointmass", "medium", np.zeros((2, 1)), np.zeros((1, 1)), np.zeros(2),
                          np.zeros((2, 1)), np.zeros(2, bool))


def test_concatenate_preserves_order():
    a, b = random_dataset(1, seed=1), random_dataset(1, seed=2, level="expert")
    ab = concatenate(a, b, "medium_expert")
    assert ab.size == a.size + b.size
    np.testing.assert_array_equal(ab.obs[:a.size], a.obs)
    np.testing.assert_array_equal(ab.obs[a.size:], b.obs)


def test_file_round_trip_and_layout(tmp_path):
    ds = random_dataset(2, seed=5)
    ds.terminals[3] = True
    path = tmp_path / "d.ofrl"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.equals(ds)
    assert meta_path(path).exists() and read_meta(meta_path(path))["level"] == "medium"

    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    obs_dim, act_dim, count = struct.unpack("<IIQ", raw[8:24])
    assert (obs_dim, act_dim, count) == (6, 2, ds.size)
    rec = 4 * (2 * obs_dim + act_dim + 1) + 1
    assert len(raw) == 24 + count * rec
    first = raw[24:24 + rec]
    vals = struct.unpack("<" + "f" * (2 * obs_dim + act_dim + 1) + "B", first)
    assert vals[:6] == tuple(ds.obs[0].tolist())
    assert vals[6:8] == tuple(ds.actions[0].tolist())
    assert vals[8] == ds.rewards[0]
    assert vals[9:15] == tuple(ds.next_obs[0].tolist())
    assert vals[15] == 0


def test_load_rejects_bad_files(tmp_path):
    bad = tmp_path / "x.ofrl"
    bad.write_bytes(b"NOTADATA" + bytes(16))
    with pytest.raises(DatasetError):
        load_dataset(bad)
    ds = random_dataset(1)
    path = tmp_path / "t.ofrl"
    save_dataset(ds, path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(DatasetError):
        load_dataset(path)
