from fractions import Fraction

import numpy as np
import pytest

from crowdrl.errors import InputError
from crowdrl.qnetwork import QNetwork, QNetworkConfig
from crowdrl.worker_mdp import (
    GapHistogram,
    ReplayBuffer,
    TransitionRecord,
    predict_future_states_w,
    reward_w,
    store_feedback_w,
    td_target_w,
    train_step_w,
    worker_gap_histogram,
)


def make_record(rng, pool=4, feat_dim=5, timestamp=1000, deadlines=None,
                reward=1.0, action=0):
    feats = rng.random((pool, feat_dim))
    if deadlines is None:
        deadlines = timestamp + rng.integers(100, 20000, size=pool)
    worker = rng.random(feat_dim)
    future = rng.random(feat_dim) if reward > 0 else worker
    return TransitionRecord(
        worker_id=1, timestamp=timestamp, task_ids=list(range(pool)),
        task_feats=feats, deadlines=np.asarray(deadlines, dtype=np.int64),
        task_qualities=np.zeros(pool), worker_feat=worker, worker_quality=0.5,
        action_row=action, reward=reward, future_worker_feat=future,
        future_task_qualities=np.zeros(pool))


def constant_q_net(row_dim, value):
    """A real network forced to output a constant: zero final weight,
    bias = value."""
    net = QNetwork(QNetworkConfig(row_dim, d_model=8, n_heads=2,
                                  dtype=np.float64))
    net.online.values["head_w"][...] = 0.0
    net.online.values["head_b"][...] = value
    net.copy_to_target()
    return net


class TestRewardW:
    def test_completed(self):
        assert reward_w(True) == 1.0

    def test_skipped(self):
        assert reward_w(False) == 0.0


class TestGapHistogram:
    def test_unsmoothed_ratio(self):
        hist = GapHistogram(1, 10080, smoothing=0)
        for _ in range(3):
            hist.update(1440)
        hist.update(2880)
        assert hist.prob(1440) == 0.75
        assert hist.prob(2880) == 0.25

    def test_fresh_histogram_is_uniform(self):
        hist = worker_gap_histogram()
        assert hist.prob(1) == pytest.approx(1 / 10080)
        assert hist.prob(9999) == pytest.approx(1 / 10080)

    def test_probabilities_sum_to_one_after_updates(self):
        rng = np.random.default_rng(0)
        hist = worker_gap_histogram()
        for _ in range(200):
            hist.update(int(rng.integers(-5, 20000)))
        assert abs(hist.prob_array().sum() - 1.0) < 1e-9
        assert hist.mass_exact(1, 10080) == 1

    def test_nonpositive_gap_clamped_with_warning(self):
        hist = worker_gap_histogram()
        hist.update(0)
        hist.update(-3)
        assert hist.clamp_warnings == 2
        assert hist.counts[0] == 2

    def test_exact_mass_matches_per_minute_sum(self):
        rng = np.random.default_rng(1)
        hist = worker_gap_histogram()
        for _ in range(50):
            hist.update(int(rng.integers(1, 10081)))
        denom = hist.total + hist.smoothing * hist.size
        for lo, hi in ((1, 100), (37, 9000), (1, 10080)):
            per_minute = sum(
                (int(hist.counts[g - 1]) + hist.smoothing) / denom
                for g in range(lo, hi + 1))
            assert hist.mass_exact(lo, hi) == per_minute

    def test_state_dict_round_trip(self):
        hist = worker_gap_histogram()
        hist.update(12)
        clone = GapHistogram.from_state_dict(hist.state_dict())
        assert np.array_equal(clone.counts, hist.counts)
        assert clone.prob(12) == hist.prob(12)


class TestPredictFutureStatesW:
    def test_no_expiry_single_state(self):
        rng = np.random.default_rng(2)
        rec = make_record(rng, deadlines=[10**7] * 4)
        futures = predict_future_states_w(rec, worker_gap_histogram())
        assert len(futures) == 1
        assert futures[0].prob == pytest.approx(1.0)
        assert futures[0].state.n_active == 4

    def test_two_breakpoints_exact_masses(self):
        rng = np.random.default_rng(3)
        hist = worker_gap_histogram()
        for _ in range(100):
            hist.update(int(rng.integers(1, 10081)))
        t0 = 500
        rec = make_record(rng, pool=2, timestamp=t0,
                          deadlines=[t0 + 100, t0 + 5000])
        futures = predict_future_states_w(rec, hist)
        assert len(futures) == 3
        assert futures[0].state.n_active == 2   # both alive
        assert futures[1].state.n_active == 1   # first expired
        assert futures[2].state is None          # everything gone
        assert futures[0].prob == pytest.approx(float(hist.mass_exact(1, 99)))
        assert futures[1].prob == pytest.approx(float(hist.mass_exact(100, 4999)))
        assert futures[2].prob == pytest.approx(float(hist.mass_exact(5000, 10080)))

    def test_grouped_masses_equal_brute_force_exactly(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            hist = worker_gap_histogram()
            for _ in range(int(rng.integers(0, 40))):
                hist.update(int(rng.integers(1, 10081)))
            pool = int(rng.integers(1, 6))
            t0 = 100
            deadlines = t0 + rng.integers(-50, 15000, size=pool)
            deadlines = np.maximum(deadlines, t0 + 1)
            rec = make_record(rng, pool=pool, timestamp=t0, deadlines=deadlines)
            futures = predict_future_states_w(rec, hist)
            # brute force: walk every minute gap, keyed by the alive set
            offsets = rec.deadlines - t0
            brute: dict[tuple, Fraction] = {}
            for g in range(1, 10081):
                key = tuple(np.flatnonzero(offsets > g))
                brute[key] = brute.get(key, Fraction(0)) + hist.mass_exact(g, g)
            got = {}
            for f in futures:
                key = tuple(f.survivors) if f.state is not None else ()
                got[key] = got.get(key, 0.0) + f.prob
            assert set(got) == set(brute)
            for key, frac in brute.items():
                assert got[key] == float(frac)
            assert abs(sum(f.prob for f in futures) - 1.0) < 1e-9
            assert len(futures) <= pool + 1

    def test_zero_reward_keeps_worker_feature(self):
        rng = np.random.default_rng(5)
        rec = make_record(rng, reward=0.0)
        futures = predict_future_states_w(rec, worker_gap_histogram())
        feat_block = futures[0].state.x[0, rec.task_feats.shape[1]:]
        assert np.allclose(feat_block, rec.worker_feat)


class TestTdTargetW:
    def test_gamma_zero_returns_reward(self):
        rng = np.random.default_rng(6)
        rec = make_record(rng, reward=1.0)
        net = constant_q_net(10, 3.0)
        futures = predict_future_states_w(rec, worker_gap_histogram())
        assert td_target_w(rec, futures, net, 0.0) == 1.0

    def test_constant_target_single_state(self):
        rng = np.random.default_rng(7)
        rec = make_record(rng, deadlines=[10**7] * 4, reward=1.0)
        net = constant_q_net(10, 2.5)
        futures = predict_future_states_w(rec, worker_gap_histogram())
        y = td_target_w(rec, futures, net, gamma=0.5)
        assert y == pytest.approx(1.0 + 0.5 * 2.5)

    def test_matches_per_minute_brute_force(self):
        rng = np.random.default_rng(8)
        hist = worker_gap_histogram()
        for _ in range(60):
            hist.update(int(rng.integers(1, 10081)))
        t0 = 200
        rec = make_record(rng, pool=3, timestamp=t0,
                          deadlines=[t0 + 700, t0 + 4000, t0 + 20000])
        net = QNetwork(QNetworkConfig(10, d_model=8, n_heads=2, dtype=np.float64))
        net.online.values["rff1_w"][...] *= 1.3  # decorrelate online and target
        futures = predict_future_states_w(rec, hist)
        got = td_target_w(rec, futures, net, gamma=0.7)

        from crowdrl.qnetwork import StateTensor
        from crowdrl.worker_mdp import _assemble_rows

        offsets = rec.deadlines - t0
        expected = Fraction(0)
        cache = {}
        for g in range(1, 10081):
            alive = tuple(np.flatnonzero(offsets > g))
            if alive not in cache:
                if not alive:
                    cache[alive] = 0.0
                else:
                    x = _assemble_rows(rec.task_feats[list(alive)],
                                       rec.future_worker_feat, None, 0.5)
                    st = StateTensor(x=x, n_active=len(alive))
                    best = int(net.forward(st).argmax())
                    cache[alive] = float(net.forward(st, use_target=True)[best])
            expected += hist.mass_exact(g, g) * Fraction(cache[alive])
        assert got == pytest.approx(rec.reward + 0.7 * float(expected), rel=1e-9)

    def test_monotone_in_reward(self):
        rng = np.random.default_rng(9)
        rec_lo = make_record(rng, reward=0.0)
        rec_hi = TransitionRecord(**{**rec_lo.__dict__, "reward": 1.0,
                                     "priority": 1.0})
        net = QNetwork(QNetworkConfig(10, d_model=8, n_heads=2, dtype=np.float64))
        hist = worker_gap_histogram()
        futures = predict_future_states_w(rec_lo, hist)
        assert (td_target_w(rec_hi, futures, net, 0.4)
                > td_target_w(rec_lo, futures, net, 0.4))


class TestReplayBuffer:
    def test_capacity_and_oldest_first_eviction(self):
        rng = np.random.default_rng(10)
        buffer = ReplayBuffer(capacity=3)
        for i in range(5):
            buffer.add(make_record(rng, timestamp=1000 + i))
        assert len(buffer) == 3
        assert sorted(r.timestamp for r in buffer.records) == [1002, 1003, 1004]

    def test_new_records_enter_at_max_priority(self):
        rng = np.random.default_rng(11)
        buffer = ReplayBuffer(capacity=10)
        buffer.add(make_record(rng))
        buffer.update_priority(0, td_error=7.0)
        buffer.add(make_record(rng))
        assert buffer.records[1].priority == buffer.records[0].priority

    def test_priorities_stay_positive(self):
        rng = np.random.default_rng(12)
        buffer = ReplayBuffer(capacity=4)
        buffer.add(make_record(rng))
        buffer.update_priority(0, td_error=0.0)
        assert buffer.records[0].priority > 0

    def test_sampling_prefers_high_priority(self):
        rng = np.random.default_rng(13)
        buffer = ReplayBuffer(capacity=2, alpha=1.0)
        buffer.add(make_record(rng))
        buffer.add(make_record(rng))
        buffer.update_priority(0, 9.0)
        buffer.update_priority(1, 1.0)
        picks = buffer.sample(4000, np.random.default_rng(0))
        share = picks.count(0) / len(picks)
        assert 0.85 < share < 0.95

    def test_sample_empty_rejected(self):
        with pytest.raises(InputError):
            ReplayBuffer().sample(1, np.random.default_rng(0))

    def test_dump_line_delimited(self, tmp_path):
        rng = np.random.default_rng(14)
        buffer = ReplayBuffer()
        buffer.add(make_record(rng))
        path = tmp_path / "buffer.jsonl"
        buffer.dump(str(path))
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 1
        assert '"reward"' in lines[0]


def feedback_context(rng, pool=5, feat_dim=5):
    feats = rng.random((pool, feat_dim))
    worker = rng.random(feat_dim)
    return {
        "worker_id": 3, "timestamp": 100, "task_ids": list(range(pool)),
        "task_feats": feats,
        "deadlines": np.full(pool, 10**6, dtype=np.int64),
        "task_qualities": np.zeros(pool), "worker_feat": worker,
        "worker_quality": 0.5, "future_worker_feat": rng.random(feat_dim),
        "future_task_qualities": np.zeros(pool),
    }


class TestStoreFeedback:
    def test_cascade_stores_examined_prefix(self):
        rng = np.random.default_rng(15)
        buffer = ReplayBuffer()
        n = store_feedback_w(buffer, feedback_context(rng), [4, 2, 0, 1, 3],
                             completed_pos=1, single_task=False)
        assert n == 2
        first, second = buffer.records
        assert (first.action_row, first.reward) == (4, 0.0)
        assert (second.action_row, second.reward) == (2, 1.0)

    def test_failed_transitions_keep_worker_feature(self):
        rng = np.random.default_rng(16)
        buffer = ReplayBuffer()
        ctx = feedback_context(rng)
        store_feedback_w(buffer, ctx, [0, 1], completed_pos=1, single_task=False)
        assert np.array_equal(buffer.records[0].future_worker_feat,
                              ctx["worker_feat"])
        assert np.array_equal(buffer.records[1].future_worker_feat,
                              ctx["future_worker_feat"])

    def test_single_task_failure_stores_one_record(self):
        rng = np.random.default_rng(17)
        buffer = ReplayBuffer()
        n = store_feedback_w(buffer, feedback_context(rng), [2],
                             completed_pos=None, single_task=True)
        assert n == 1
        assert buffer.records[0].reward == 0.0

    def test_list_with_no_completion_stores_every_rank(self):
        rng = np.random.default_rng(18)
        buffer = ReplayBuffer()
        n = store_feedback_w(buffer, feedback_context(rng), [0, 1, 2],
                             completed_pos=None, single_task=False)
        assert n == 3
        assert all(r.reward == 0.0 for r in buffer.records)

    def test_buffer_eviction_at_capacity(self):
        rng = np.random.default_rng(19)
        buffer = ReplayBuffer(capacity=2)
        store_feedback_w(buffer, feedback_context(rng), [0, 1, 2],
                         completed_pos=2, single_task=False)
        assert len(buffer) == 2
        assert sorted(r.action_row for r in buffer.records) == [1, 2]


class TestTrainStepW:
    def test_gamma_zero_regresses_to_reward(self):
        rng = np.random.default_rng(20)
        buffer = ReplayBuffer()
        rec = make_record(rng, reward=1.0)
        buffer.add(rec)
        net = QNetwork(QNetworkConfig(10, d_model=16, n_heads=2,
                                      dtype=np.float64))
        hist = worker_gap_histogram()
        step_rng = np.random.default_rng(0)
        for _ in range(400):
            loss = train_step_w(buffer, net, hist, 0.0, 0.05, 4, step_rng)
            assert np.isfinite(loss) and loss >= 0.0
        q = net.forward(rec.state())
        assert abs(q[rec.action_row] - rec.reward) < 0.05

    def test_discount_defaults_documented(self):
        # train with the production default gamma for the worker side
        rng = np.random.default_rng(21)
        buffer = ReplayBuffer()
        buffer.add(make_record(rng, deadlines=[10**7] * 4))
        net = QNetwork(QNetworkConfig(10, d_model=8, n_heads=2,
                                      dtype=np.float64))
        loss = train_step_w(buffer, net, worker_gap_histogram(), 0.3, 1e-3, 2,
                            np.random.default_rng(1))
        assert np.isfinite(loss)
