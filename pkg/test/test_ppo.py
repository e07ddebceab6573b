import math
import os
import tempfile
import unittest

import numpy as np

import fcca_rewardgen.world as world
from fcca_rewardgen.exception import ConfigurationError, InputError
from fcca_rewardgen.nn import CheckpointError
from fcca_rewardgen.ppo import (AgentTeam, ConvergenceMonitor, PpoConfig, PpoError, RewardEvaluationError,
                                collect_batch, collect_episode, compute_gae, compute_td_errors,
                                encode_global_state, global_state_size, normalize_advantages,
                                ppo_policy_loss, shared_reward, train_iteration, train_until_converged,
                                value_loss)
from fcca_rewardgen.rewarddsl import DslDomainError, compile_reward
from fcca_rewardgen.world import ObstacleScript

def small_config(**changes):
    options = dict(episodes_per_batch=2, epochs_per_batch=2, minibatch_size=16,
                   policy_hidden=8, value_hidden=8, value_obstacle_slots=2, max_batches=3)
    options.update(changes)
    return PpoConfig(**options)

def small_world(steps=12):
    """ Agents 4m apart, so short episodes always end in a timeout """
    return world.preset('empty').replace(max_steps=steps,
                                         start_positions=((6.0, 3.0), (10.0, 3.0), (14.0, 3.0)))

def snapshot(team):
    return [p.copy() for net in team.nets().values() for p in net.parameters()]

class MetricsSink:

    def __init__(self):
        self.records = []

    def write(self, record):
        self.records.append(record)

class TdErrorTest(unittest.TestCase):

    def test_zero(self):
        np.testing.assert_array_equal(compute_td_errors([0, 0], [0, 0, 0], [False, False], 0.99), [0, 0])

    def test_bootstrapped(self):
        deltas = compute_td_errors([1.0], [0.5, 0.2], [False], 0.99)
        self.assertAlmostEqual(0.698, deltas[0], places=12)

    def test_terminal(self):
        deltas = compute_td_errors([1.0], [0.5, 123.0], [True], 0.99)
        self.assertEqual(0.5, deltas[0])

    def test_length_mismatch(self):
        with self.assertRaises(InputError):
            compute_td_errors([1.0, 2.0], [0.0, 0.0], [False, False], 0.99)

class GaeTest(unittest.TestCase):

    def test_single_delta(self):
        np.testing.assert_allclose(compute_gae([1.0, 0.0], 0.99, 0.95, [False, False]), [1.0, 0.0])

    def test_hand_computed(self):
        deltas = compute_td_errors([1.0, 1.0], [0.5, 0.5, 0.0], [False, False], 0.99)
        np.testing.assert_allclose(deltas, [0.995, 0.5], atol=1e-12)
        np.testing.assert_allclose(compute_gae(deltas, 0.99, 0.95, [False, False]), [1.46525, 0.5], atol=1e-12)

    def test_all_zero(self):
        self.assertTrue(np.all(compute_gae(np.zeros(7), 0.99, 0.95, np.zeros(7, dtype=bool)) == 0.0))

    def test_matches_discounted_sum(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            length = int(rng.integers(1, 33))
            deltas = rng.normal(size=length)
            dones = rng.random(length) < 0.15
            gamma = rng.uniform(0.8, 1.0)
            lam = rng.uniform(0.0, 1.0)
            expected = np.zeros(length)
            for t in range(length):
                total = 0.0
                for l in range(length - t):
                    total += (gamma * lam) ** l * deltas[t + l]
                    if dones[t + l]:
                        break
                expected[t] = total
            np.testing.assert_allclose(compute_gae(deltas, gamma, lam, dones), expected, rtol=0, atol=1e-9)

    def test_normalization(self):
        result = normalize_advantages(np.array([1.0, 2.0, 3.0, 6.0]))
        self.assertAlmostEqual(0.0, float(result.mean()), places=12)
        self.assertAlmostEqual(1.0, float(result.std()), places=6)
        np.testing.assert_array_equal(normalize_advantages(np.full(4, 2.5)), np.zeros(4))

    def test_normalization_keeps_gradient_signs(self):
        rng = np.random.default_rng(1)
        advantages = rng.normal(size=50)
        advantages -= advantages.mean()
        logp = rng.normal(scale=0.05, size=50)
        _, raw = ppo_policy_loss(logp, np.zeros(50), advantages, 0.2)
        _, scaled = ppo_policy_loss(logp, np.zeros(50), normalize_advantages(advantages), 0.2)
        np.testing.assert_array_equal(np.sign(raw), np.sign(scaled))

class PolicyLossTest(unittest.TestCase):

    def test_identity_ratio(self):
        advantages = np.array([1.0, -2.0, 0.5])
        loss, grad = ppo_policy_loss(np.zeros(3), np.zeros(3), advantages, 0.2)
        self.assertAlmostEqual(-float(advantages.mean()), loss, places=12)
        np.testing.assert_allclose(grad, -advantages / 3.0)

    def test_clipped_positive_advantage(self):
        loss, grad = ppo_policy_loss([math.log(1.5)], [0.0], [2.0], 0.2)
        self.assertAlmostEqual(-2.4, loss, places=12)
        self.assertEqual(0.0, grad[0])

    def test_clipped_negative_advantage(self):
        loss, grad = ppo_policy_loss([math.log(0.5)], [0.0], [-1.0], 0.2)
        self.assertAlmostEqual(0.8, loss, places=12)
        self.assertEqual(0.0, grad[0])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        new = rng.normal(scale=0.1, size=8)
        old = rng.normal(scale=0.1, size=8)
        advantages = rng.normal(size=8)
        _, grad = ppo_policy_loss(new, old, advantages, 0.2)
        h = 1e-6
        for k in range(8):
            plus = new.copy()
            plus[k] += h
            minus = new.copy()
            minus[k] -= h
            numeric = (ppo_policy_loss(plus, old, advantages, 0.2)[0]
                       - ppo_policy_loss(minus, old, advantages, 0.2)[0]) / (2 * h)
            self.assertAlmostEqual(numeric, grad[k], delta=1e-6)

    def test_non_finite_ratio(self):
        with self.assertRaises(PpoError):
            ppo_policy_loss([0.0, 1000.0], [0.0, 0.0], [1.0, 1.0], 0.2)

class ValueLossTest(unittest.TestCase):

    def test_exact(self):
        self.assertEqual(0.0, value_loss([1.0, 2.0], [1.0, 2.0])[0])

    def test_single(self):
        self.assertEqual(4.0, value_loss([0.0], [2.0])[0])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        pred = rng.normal(size=5)
        target = rng.normal(size=5)
        _, grad = value_loss(pred, target)
        h = 1e-6
        for k in range(5):
            plus = pred.copy()
            plus[k] += h
            minus = pred.copy()
            minus[k] -= h
            numeric = (value_loss(plus, target)[0] - value_loss(minus, target)[0]) / (2 * h)
            self.assertAlmostEqual(numeric, grad[k], delta=1e-6)

class GlobalStateTest(unittest.TestCase):

    def test_size_and_padding(self):
        config = world.preset('simple')
        state = world.reset(config, 0)
        encoded = encode_global_state(state, 5)
        self.assertEqual(global_state_size(3, 5), encoded.shape[0])
        presence = encoded[14:].reshape(5, 5)[:, 4]
        np.testing.assert_array_equal(presence, [1.0, 1.0, 1.0, 0.0, 0.0])

    def test_nearest_obstacles_first(self):
        scripts = (ObstacleScript((2.0, 10.0)), ObstacleScript((10.0, 5.0)), ObstacleScript((15.0, 15.0)))
        config = small_world().replace(obstacle_scripts=scripts)
        encoded = encode_global_state(world.reset(config, 0), 2)
        slots = encoded[14:].reshape(2, 5)
        np.testing.assert_allclose(slots[0, :2], [0.0, 2.0])
        np.testing.assert_allclose(slots[1, :2], [-8.0, 7.0])

class SharedRewardTest(unittest.TestCase):

    def test_mean_of_agents(self):
        program = compile_reward('-goal_dist')
        state = world.reset(small_world(), 0)
        state, outcome = world.step(state, [(1.0, 0.0)] * 3)
        values, shared = shared_reward(program, state, outcome)
        self.assertEqual(3, len(values))
        self.assertAlmostEqual(sum(values) / 3.0, shared, places=12)

    def test_agent_permutation(self):
        program = compile_reward('-goal_dist + 0.1 * speed - 0.01 * accel')
        base = small_world()
        order = [2, 0, 1]
        permuted = base.replace(start_positions=tuple(base.start_positions[i] for i in order))
        actions = [(1.0, 1.2), (0.4, 1.6), (0.9, 2.0)]
        a = world.reset(base, 0)
        b = world.reset(permuted, 0)
        for _ in range(5):
            a, a_outcome = world.step(a, actions)
            b, b_outcome = world.step(b, [actions[i] for i in order])
            a_values, a_shared = shared_reward(program, a, a_outcome)
            b_values, b_shared = shared_reward(program, b, b_outcome)
            self.assertEqual(a_shared, b_shared)
            self.assertEqual([a_values[i] for i in order], b_values)

    def test_domain_error_aborts(self):
        program = compile_reward('log(speed - speed)')
        state, outcome = world.step(world.reset(small_world(), 0), [(1.0, 0.0)] * 3)
        with self.assertRaises(RewardEvaluationError) as cm:
            shared_reward(program, state, outcome, seed=17)
        self.assertEqual('episode seed 17', cm.exception.location)

class RolloutTest(unittest.TestCase):

    def test_episode_layout(self):
        config = small_config()
        team = AgentTeam.create(small_world(), config, 0)
        episode = collect_episode(team.policies, small_world(), compile_reward('-goal_dist'), 5, 2)
        self.assertEqual('timeout', episode.status)
        self.assertEqual(12, episode.length)
        self.assertEqual((13, global_state_size(3, 2)), episode.global_states.shape)
        self.assertEqual((3, 12, 2), episode.pre_squash.shape)
        self.assertFalse(np.any(episode.dones))
        for batch in episode.observations:
            self.assertEqual(12, batch.size)

    def test_parallel_collection_matches_serial(self):
        team = AgentTeam.create(small_world(), small_config(), 0)
        program = compile_reward('-goal_dist')
        seeds = [11, 12, 13]
        serial = collect_batch(team.policies, small_world(), program, seeds, small_config())
        parallel = collect_batch(team.policies, small_world(), program, seeds, small_config(num_workers=2))
        for a, b in zip(serial, parallel):
            np.testing.assert_array_equal(a.rewards, b.rewards)
            np.testing.assert_array_equal(a.pre_squash, b.pre_squash)

class TrainIterationTest(unittest.TestCase):

    def test_zero_reward_leaves_parameters(self):
        config = small_config(entropy_coeff=0.0)
        team = AgentTeam.create(small_world(), config, 1)
        before = snapshot(team)
        stats = train_iteration(team, small_world(), compile_reward('0'), config, 1)
        for a, b in zip(before, snapshot(team)):
            np.testing.assert_array_equal(a, b)
        self.assertEqual(0.0, stats.mean_reward)

    def test_deterministic(self):
        config = small_config()
        program = compile_reward('-goal_dist')
        teams = [AgentTeam.create(small_world(), config, 4) for _ in range(2)]
        stats = [train_iteration(t, small_world(), program, config, 4) for t in teams]
        for a, b in zip(snapshot(teams[0]), snapshot(teams[1])):
            np.testing.assert_array_equal(a, b)
        self.assertEqual(stats[0].to_record(), stats[1].to_record())

    def test_parameters_change(self):
        config = small_config()
        team = AgentTeam.create(small_world(), config, 2)
        before = snapshot(team)
        train_iteration(team, small_world(), compile_reward('-goal_dist'), config, 2)
        self.assertTrue(any(not np.array_equal(a, b) for a, b in zip(before, snapshot(team))))

    def test_domain_error_surfaces(self):
        config = small_config()
        team = AgentTeam.create(small_world(), config, 0)
        with self.assertRaises(RewardEvaluationError):
            train_iteration(team, small_world(), compile_reward('sqrt(-1 - speed)'), config, 0)

    def test_domain_error_crosses_worker_processes(self):
        config = small_config(num_workers=2)
        team = AgentTeam.create(small_world(), config, 0)
        with self.assertRaises(RewardEvaluationError) as cm:
            train_iteration(team, small_world(), compile_reward('log(goal_dist - 100)'), config, 0)
        self.assertIsInstance(cm.exception.cause, DslDomainError)
        self.assertIn('log', cm.exception.reason)

class ConvergenceTest(unittest.TestCase):

    def test_constant_loss(self):
        monitor = ConvergenceMonitor(window=10, tolerance=0.02, patience=3)
        results = [monitor.update(1.0) for _ in range(40)]
        self.assertFalse(any(results[:39]))
        self.assertTrue(results[39])

    def test_streak_advances_once_per_window(self):
        monitor = ConvergenceMonitor(window=2, tolerance=0.02, patience=2)
        results = [monitor.update(1.0) for _ in range(6)]
        self.assertEqual([False] * 5 + [True], results)
        self.assertEqual(2, monitor.streak)

    def test_change_inside_window_resets(self):
        monitor = ConvergenceMonitor(window=2, tolerance=0.02, patience=2)
        results = [monitor.update(v) for v in (1.0, 1.0, 1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 3.0, 3.0)]
        self.assertEqual([False] * 10, results)
        self.assertEqual(1, monitor.streak)

    def test_growing_loss(self):
        monitor = ConvergenceMonitor(window=3, tolerance=0.02, patience=2)
        self.assertFalse(any(monitor.update(1.5 ** k) for k in range(50)))

    def test_streak_resets(self):
        monitor = ConvergenceMonitor(window=1, tolerance=0.02, patience=2)
        self.assertEqual([False, False, False, False, True],
                         [monitor.update(v) for v in (1.0, 1.0, 2.0, 2.0, 2.0)])

    def test_batch_cap(self):
        config = small_config(max_batches=2)
        team = AgentTeam.create(small_world(), config, 0)
        metrics = MetricsSink()
        summary = train_until_converged(team, small_world(), compile_reward('-goal_dist'), config, 0,
                                        metrics=metrics, label='init-1')
        self.assertEqual(2, summary.batches)
        self.assertFalse(summary.converged)
        self.assertEqual([0, 1], [r['batch'] for r in metrics.records])
        self.assertEqual({'init-1'}, {r['phase'] for r in metrics.records})
        self.assertEqual(2, summary.policy_summary()['batches'])

class TeamTest(unittest.TestCase):

    def test_round_trip(self):
        config = small_config()
        team = AgentTeam.create(small_world(), config, 3)
        train_iteration(team, small_world(), compile_reward('-goal_dist'), config, 3)
        again = AgentTeam.from_bytes(team.to_bytes({'k': 1}), config)
        for a, b in zip(snapshot(team), snapshot(again)):
            np.testing.assert_array_equal(a, b)
        self.assertEqual(team.to_bytes({'k': 1}), again.to_bytes({'k': 1}))
        self.assertEqual(team.policy_optimizers[0].step, again.policy_optimizers[0].step)

    def test_incompatible_world(self):
        team = AgentTeam.from_bytes(AgentTeam.create(small_world(), small_config(), 0).to_bytes(),
                                    small_config(value_obstacle_slots=4))
        with self.assertRaises(CheckpointError):
            team.check_compatible(small_world())

    def test_config_validation(self):
        with self.assertRaises(ConfigurationError):
            PpoConfig(gamma=0.0)
        with self.assertRaises(ConfigurationError):
            PpoConfig(clip_eps=0.0)
        with self.assertRaises(ConfigurationError):
            PpoConfig(epochs_per_batch=0)

    def test_load_reports_path(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'team.ckpt')
            data = AgentTeam.create(small_world(), small_config(), 0).to_bytes()
            with open(path, 'wb') as f:
                f.write(data[:-4])
            with self.assertRaises(CheckpointError) as ctx:
                AgentTeam.load(path)
            self.assertEqual(path, ctx.exception.location)
            self.assertIn(path, str(ctx.exception))
