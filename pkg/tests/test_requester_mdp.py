import math

import numpy as np
import pytest

from crowdrl.errors import ConfigError, InputError
from crowdrl.qnetwork import QNetwork, QNetworkConfig
from crowdrl.requester_mdp import (
    ArrivalModel,
    WorkerDirectory,
    arrival_gap_histogram,
    next_worker_distribution,
    predict_future_states_r,
    reward_r,
    task_quality,
    td_target_r,
    train_step_r,
    update_arrival_model,
    updated_task_quality,
)
from crowdrl.worker_mdp import ReplayBuffer, TransitionRecord


class TestTaskQuality:
    def test_p1_is_plain_sum(self):
        assert task_quality([0.3, 0.5], 1) == pytest.approx(0.8)

    def test_p_infinity_is_max(self):
        assert task_quality([0.3, 0.9], math.inf) == 0.9

    def test_p2_pythagorean(self):
        assert task_quality([0.6, 0.8], 2) == pytest.approx(1.0, abs=1e-9)

    def test_empty_set_is_zero(self):
        assert task_quality([], 2) == 0.0

    def test_p_below_one_rejected(self):
        with pytest.raises(ConfigError):
            task_quality([0.5], 0.5)

    def test_quality_out_of_range_rejected(self):
        with pytest.raises(InputError):
            task_quality([1.5], 2)

    def test_monotone_in_each_argument_and_under_addition(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            qs = rng.random(int(rng.integers(1, 6)))
            p = float(rng.uniform(1, 8))
            base = task_quality(qs, p)
            assert task_quality(list(qs) + [rng.random()], p) >= base
            bumped = qs.copy()
            i = rng.integers(len(qs))
            bumped[i] = min(1.0, bumped[i] + 0.1)
            assert task_quality(bumped, p) >= base

    def test_p64_close_to_max_on_separated_sets(self):
        # the p -> inf limit is slow when the top two qualities almost tie,
        # so the generator enforces second_max <= 0.9 * max
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n = int(rng.integers(1, 9))
            qs = rng.random(n)
            top = qs.max()
            rest = np.minimum(qs, 0.9 * top)
            rest[qs.argmax()] = top
            assert abs(task_quality(rest, 64) - top) < 1e-3


class TestRewardR:
    def test_first_completer_gains_their_quality(self):
        assert reward_r(0.0, 0.6, 2) == pytest.approx(0.6)

    def test_second_completer_diminishing_gain(self):
        q1 = updated_task_quality(0.0, 0.6, 2)
        assert reward_r(q1, 0.8, 2) == pytest.approx(1.0 - 0.6)

    def test_skip_is_zero(self):
        assert reward_r(0.7, None, 2) == 0.0

    def test_gain_never_negative(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            old = float(rng.uniform(0, 3))
            assert reward_r(old, float(rng.random()), float(rng.uniform(1, 16))) >= 0


class TestArrivalModel:
    def test_same_worker_gap_counted(self):
        model = ArrivalModel(feature_dim=3)
        model.observe(1, 100, np.zeros(3), 0.5)
        model.observe(1, 105, np.zeros(3), 0.5)
        assert model.phi_worker.counts[4] == 1  # gap 5 sits at support index 4

    def test_any_arrival_gap_counted(self):
        model = ArrivalModel(feature_dim=3)
        model.observe(1, 100, np.zeros(3), 0.5)
        model.observe(2, 107, np.zeros(3), 0.5)
        assert model.phi_arrival.counts[7] == 1

    def test_first_worker_counts_as_new(self):
        model = ArrivalModel(feature_dim=3)
        model.observe(1, 100, np.zeros(3), 0.5)
        assert model.new_worker_count == 1
        assert model.arrival_count == 1

    def test_p_new_equals_recount(self):
        rng = np.random.default_rng(3)
        model = ArrivalModel(feature_dim=2)
        seen = set()
        new = 0
        t = 0
        for _ in range(500):
            wid = int(rng.integers(40))
            t += int(rng.integers(0, 30))
            if wid not in seen:
                new += 1
                seen.add(wid)
            model.observe(wid, t, rng.random(2), float(rng.random()))
        assert model.p_new == pytest.approx(new / 500)

    def test_time_regression_rejected(self):
        model = ArrivalModel(feature_dim=1)
        model.observe(1, 100, np.zeros(1), 0.5)
        with pytest.raises(InputError):
            model.observe(2, 99, np.zeros(1), 0.5)

    def test_replaying_sorted_stream_reproduces_state(self):
        rng = np.random.default_rng(4)
        stream = []
        t = 0
        for _ in range(120):
            t += int(rng.integers(0, 40))
            stream.append((int(rng.integers(10)), t, rng.random(2),
                           float(rng.random())))
        a, b = ArrivalModel(2), ArrivalModel(2)
        for model in (a, b):
            for wid, tt, feat, q in stream:
                update_arrival_model(model, wid, tt, feat, q)
        assert np.array_equal(a.phi_worker.counts, b.phi_worker.counts)
        assert np.allclose(a.mean_worker_feature, b.mean_worker_feature)
        assert a.p_new == b.p_new

    def test_mean_feature_is_running_mean(self):
        model = ArrivalModel(feature_dim=2)
        feats = [np.array([1.0, 0.0]), np.array([0.0, 1.0]),
                 np.array([1.0, 1.0])]
        for i, f in enumerate(feats):
            model.observe(i, i * 10, f, 0.5)
        assert np.allclose(model.mean_worker_feature,
                           np.mean(feats, axis=0))

    def test_save_load_round_trip(self, tmp_path):
        model = ArrivalModel(feature_dim=2)
        model.observe(1, 5, np.array([0.5, 0.5]), 0.7)
        model.observe(1, 35, np.array([0.2, 0.8]), 0.7)
        path = str(tmp_path / "arrivals.json")
        model.save(path)
        loaded = ArrivalModel.load(path)
        assert loaded.p_new == model.p_new
        assert np.array_equal(loaded.phi_worker.counts, model.phi_worker.counts)
        assert loaded.last_arrival == model.last_arrival


class TestNextWorkerDistribution:
    def test_single_old_worker_split(self):
        model = ArrivalModel(feature_dim=2)
        directory = WorkerDirectory(2)
        for t in (0, 100, 200):  # three arrivals, one new worker
            model.observe(7, t, np.zeros(2), 0.5)
        directory.upsert(7, np.zeros(2), 0.5)
        # p_new = 1/3 after three arrivals of the same worker
        dist = dict(next_worker_distribution(model, directory, 300))
        assert dist[7] == pytest.approx(2 / 3)
        assert dist[None] == pytest.approx(1 / 3)

    def test_two_workers_with_equal_gap_mass_split_evenly(self):
        model = ArrivalModel(feature_dim=1)
        directory = WorkerDirectory(1)
        for wid, t in ((1, 0), (2, 0), (1, 1000), (2, 1000)):
            model.observe(wid, t, np.zeros(1), 0.5)
            directory.upsert(wid, np.zeros(1), 0.5)
        # both workers sit at the same candidate gap, so they split evenly
        dist = dict(next_worker_distribution(model, directory, 2000))
        p_new = model.p_new
        assert dist[1] == pytest.approx(dist[2])
        assert dist[1] == pytest.approx((1 - p_new) / 2)

    def test_masses_sum_to_one(self):
        rng = np.random.default_rng(5)
        model = ArrivalModel(feature_dim=2)
        directory = WorkerDirectory(2)
        t = 0
        for _ in range(300):
            wid = int(rng.integers(25))
            t += int(rng.integers(0, 45))
            model.observe(wid, t, rng.random(2), float(rng.random()))
            directory.upsert(wid, rng.random(2), float(rng.random()))
        dist = next_worker_distribution(model, directory, t + 10)
        assert abs(sum(p for _, p in dist) - 1.0) < 1e-9
        new_probs = [p for wid, p in dist if wid is None]
        assert new_probs == [pytest.approx(model.p_new)]

    def test_no_old_workers_means_certain_newcomer(self):
        model = ArrivalModel(feature_dim=1)
        assert next_worker_distribution(model, WorkerDirectory(1), 10) == [(None, 1.0)]


def requester_record(rng, pool=3, feat_dim=4, timestamp=1000, deadlines=None):
    if deadlines is None:
        deadlines = [timestamp + 10**6] * pool
    feats = rng.random((pool, feat_dim))
    quals = rng.random(pool)
    return TransitionRecord(
        worker_id=0, timestamp=timestamp, task_ids=list(range(pool)),
        task_feats=feats, deadlines=np.asarray(deadlines, dtype=np.int64),
        task_qualities=quals, worker_feat=rng.random(feat_dim),
        worker_quality=0.6, action_row=0, reward=0.4,
        future_worker_feat=rng.random(feat_dim),
        future_task_qualities=quals)


def populated_model(rng, feat_dim=4, n_workers=6, arrivals=80):
    model = ArrivalModel(feat_dim)
    directory = WorkerDirectory(feat_dim)
    t = 0
    for _ in range(arrivals):
        wid = int(rng.integers(n_workers))
        t += int(rng.integers(0, 20))
        feat = rng.random(feat_dim)
        q = float(rng.random())
        model.observe(wid, t, feat, q)
        directory.upsert(wid, feat, q)
    return model, directory, t


class TestPredictFutureStatesR:
    def test_expectation_mode_state_count_bounded(self):
        rng = np.random.default_rng(6)
        model, directory, t = populated_model(rng)
        rec = requester_record(rng, timestamp=t)
        futures = predict_future_states_r(rec, model, directory)
        assert len(futures) <= 61

    def test_single_old_worker_no_newcomers_modes_coincide(self):
        rng = np.random.default_rng(7)
        model = ArrivalModel(2)
        directory = WorkerDirectory(2)
        feat = np.array([0.3, 0.7])
        t = 0
        for t in (0, 60, 180, 240):
            model.observe(5, t, feat, 0.4)
        directory.upsert(5, feat, 0.4)
        model.new_worker_count = 0  # pretend the worker was always known
        rec = requester_record(rng, feat_dim=2, timestamp=t + 5)
        exact = predict_future_states_r(rec, model, directory, mode="exact")
        expect = predict_future_states_r(rec, model, directory,
                                         mode="expectation")
        assert len(exact) == len(expect)
        for fe, fx in zip(expect, exact):
            assert fe.prob == pytest.approx(fx.prob)
            assert np.allclose(fe.state.x, fx.state.x)

    def test_expectation_feature_is_probability_weighted_mean(self):
        rng = np.random.default_rng(8)
        model, directory, t = populated_model(rng)
        rec = requester_record(rng, timestamp=t,
                               deadlines=[t + 10**6] * 3)  # one pool cell
        exact = predict_future_states_r(rec, model, directory, mode="exact",
                                        worker_prob_threshold=0.0,
                                        max_workers=10**9)
        expect = predict_future_states_r(rec, model, directory,
                                         mode="expectation")
        assert len(expect) == 1
        total = sum(f.prob for f in exact)
        assert total == pytest.approx(1.0, abs=1e-9)
        feat_dim = rec.task_feats.shape[1]
        worker_block = slice(feat_dim, 2 * feat_dim)
        mean_feat = sum(f.prob * f.state.x[0, worker_block] for f in exact)
        assert np.allclose(expect[0].state.x[0, worker_block], mean_feat,
                           atol=1e-9)

    def test_both_modes_emit_unit_mass(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            model, directory, t = populated_model(
                rng, n_workers=int(rng.integers(2, 10)),
                arrivals=int(rng.integers(10, 60)))
            deadlines = t + rng.integers(1, 200, size=3)
            rec = requester_record(rng, timestamp=t, deadlines=deadlines)
            for mode in ("expectation", "exact"):
                futures = predict_future_states_r(rec, model, directory,
                                                  mode=mode)
                assert abs(sum(f.prob for f in futures) - 1.0) < 1e-9

    def test_truncation_preserves_relative_weights(self):
        rng = np.random.default_rng(10)
        model, directory, t = populated_model(rng, n_workers=30, arrivals=300)
        rec = requester_record(rng, timestamp=t, deadlines=[t + 10**6] * 3)
        full = predict_future_states_r(rec, model, directory, mode="exact",
                                       worker_prob_threshold=0.0,
                                       max_workers=10**9)
        cut = predict_future_states_r(rec, model, directory, mode="exact",
                                      worker_prob_threshold=0.0, max_workers=5)
        # retained old workers share one rescale factor; the newcomer state
        # keeps p_new untouched
        newcomer = tuple(np.round(model.mean_worker_feature, 12))

        def worker_feats(futures):
            feat_dim = rec.task_feats.shape[1]
            return [(tuple(np.round(f.state.x[0, feat_dim:2 * feat_dim], 12)),
                     f.prob) for f in futures]

        full_map = dict(worker_feats(full))
        ratios = [p / full_map[k] for k, p in worker_feats(cut)
                  if k in full_map and k != newcomer and full_map[k] > 0]
        new_probs = [p for k, p in worker_feats(cut) if k == newcomer]
        assert len(ratios) == 5
        assert np.allclose(ratios, ratios[0], rtol=1e-9)
        assert new_probs[0] == pytest.approx(model.p_new)

    def test_quality_dims_present_in_rows(self):
        rng = np.random.default_rng(11)
        model, directory, t = populated_model(rng)
        rec = requester_record(rng, timestamp=t)
        futures = predict_future_states_r(rec, model, directory)
        feat_dim = rec.task_feats.shape[1]
        assert futures[0].state.row_dim == 2 * feat_dim + 2


class TestTrainStepR:
    def test_gamma_zero_regresses_to_gains(self):
        rng = np.random.default_rng(12)
        model, directory, t = populated_model(rng)
        buffer = ReplayBuffer()
        rec = requester_record(rng, timestamp=t)
        buffer.add(rec)
        net = QNetwork(QNetworkConfig(10, d_model=16, n_heads=2,
                                      dtype=np.float64))
        step_rng = np.random.default_rng(1)
        for _ in range(400):
            loss = train_step_r(buffer, net, model, directory, 0.0, 0.05, 4,
                                step_rng)
            assert np.isfinite(loss)
        q = net.forward(rec.state(quality_mode=True))
        assert abs(q[rec.action_row] - rec.reward) < 0.05

    def test_zero_gains_leave_only_future_term(self):
        rng = np.random.default_rng(13)
        model, directory, t = populated_model(rng)
        rec = requester_record(rng, timestamp=t)
        rec = TransitionRecord(**{**rec.__dict__, "reward": 0.0, "priority": 1.0})
        from tests.test_worker_mdp import constant_q_net

        net = constant_q_net(10, 4.0)
        futures = predict_future_states_r(rec, model, directory)
        y = td_target_r(rec, futures, net, gamma=0.5)
        assert y == pytest.approx(0.5 * 4.0)

    def test_loss_finite_every_step(self):
        rng = np.random.default_rng(14)
        model, directory, t = populated_model(rng)
        buffer = ReplayBuffer()
        for _ in range(5):
            buffer.add(requester_record(rng, timestamp=t))
        net = QNetwork(QNetworkConfig(10, d_model=8, n_heads=2,
                                      dtype=np.float64))
        step_rng = np.random.default_rng(2)
        for _ in range(20):
            loss = train_step_r(buffer, net, model, directory, 0.5, 1e-3, 4,
                                step_rng)
            assert np.isfinite(loss)
