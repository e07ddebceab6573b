import math
import os
import random
import tempfile
import unittest

import numpy as np

import fcca_rewardgen.world as world
from fcca_rewardgen.evaluation import (EvalConfig, EvalReport, TraceError, accumulate_metrics, aggregate,
                                       episode_seeds, evaluate_traces, load_traces, run_episode,
                                       run_evaluation, split_episodes)
from fcca_rewardgen.exception import ConfigurationError
from fcca_rewardgen.files import dump_records
from fcca_rewardgen.formation import FormationSpec, equilateral_triangle
from fcca_rewardgen.ppo import AgentTeam, PpoConfig
from fcca_rewardgen.world import ObstacleScript

TRIANGLE = [[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3.0) / 2.0]]

def header(max_steps=10):
    return {'kind': 'header', 'dt': 0.1, 'max_steps': max_steps, 'agent_radius': 0.175,
            'obstacle_radius': 0.175, 'goal': [10.0, 17.0], 'formation': TRIANGLE}

def state(t, positions, velocities=None, obstacles=(), **flags):
    velocities = velocities or [(0.0, 0.0)] * len(positions)
    record = {'kind': 'step', 't': t,
              'agents': [[p[0], p[1], v[0], v[1], 0.0] for p, v in zip(positions, velocities)],
              'obstacles': [list(o) for o in obstacles],
              'collision': False, 'goal_reached': False, 'timeout': False}
    record.update(flags)
    return record

def shifted(dx, dy=0.0):
    return [(x + dx, y + dy) for (x, y) in TRIANGLE]

def hazard_trace(inside_steps, length=8):
    """ A timeout trace where agent 0 is 0.5m from an obstacle at the listed steps """
    records = [header(max_steps=length - 1)]
    for t in range(length):
        obstacle = (0.0, -0.5) if t in inside_steps else (0.0, -5.0)
        records.append(state(t, TRIANGLE, obstacles=[obstacle], timeout=(t == length - 1)))
    return records

STRETCHED = [(0.0, 0.0), (1.5, 0.0), (0.75, 0.6)]

def three_step_trace():
    deformed = [(0.2, 0.0), (1.2, 0.0), (0.7, 1.2)]
    moving = [(1.0, 0.0)] * 3
    return [header(),
            state(0, TRIANGLE, obstacles=[(5.0, -5.0)]),
            state(1, shifted(0.1), moving, obstacles=[(0.1, -0.5)]),
            state(2, deformed, moving, obstacles=[(0.2, -0.5)]),
            state(3, STRETCHED, [(0.0, 1.0)] * 3, obstacles=[(10.0, 10.0)], goal_reached=True)]

def straight_ahead(agent_obs, obstacles):
    return (1.0, math.pi / 2.0)

def standing_still(agent_obs, obstacles):
    return (0.0, 0.0)

class AccumulateMetricsTest(unittest.TestCase):

    def test_hand_computed_trace(self):
        metrics = accumulate_metrics(three_step_trace(), EvalConfig())
        self.assertEqual('goal', metrics.status)
        self.assertTrue(metrics.success)
        self.assertEqual(1, metrics.hazards)
        self.assertEqual(3, metrics.steps)
        self.assertEqual(3 * 0.1, metrics.time)

        spec = FormationSpec.from_config(TRIANGLE)
        errors = [spec.error_of(TRIANGLE), spec.error_of(shifted(0.1)),
                  spec.error_of([(0.2, 0.0), (1.2, 0.0), (0.7, 1.2)])]
        self.assertAlmostEqual(0.0, errors[0], places=12)
        self.assertGreater(errors[2], 0.0)
        self.assertEqual(math.fsum(errors), metrics.formation_error_sum)
        self.assertEqual(math.fsum(errors) / 3, metrics.formation_error_mean)

        # 10 m/s^2 for each agent on the first step, none on the second, sqrt(2)*10 on the third
        expected = (3 * 10.0 + 3 * math.sqrt(2.0) * 10.0) / 9
        self.assertAlmostEqual(expected, metrics.avg_acceleration, places=9)

    def test_arrival_state_not_in_formation_error(self):
        spec = FormationSpec.from_config(TRIANGLE)
        self.assertGreater(spec.error_of(STRETCHED), 0.05)
        arrived = [header(), state(0, TRIANGLE), state(1, TRIANGLE), state(2, STRETCHED, goal_reached=True)]
        metrics = accumulate_metrics(arrived, EvalConfig())
        self.assertAlmostEqual(0.0, metrics.formation_error_sum, places=12)
        timed_out = [header(max_steps=2), state(0, TRIANGLE), state(1, TRIANGLE), state(2, STRETCHED, timeout=True)]
        metrics = accumulate_metrics(timed_out, EvalConfig())
        self.assertAlmostEqual(spec.error_of(STRETCHED) / 3, metrics.formation_error_mean, places=12)

    def test_graze_counts_once(self):
        metrics = accumulate_metrics(hazard_trace({2, 3, 4, 5, 6}), EvalConfig())
        self.assertEqual(1, metrics.hazards)

    def test_each_entry_counts(self):
        metrics = accumulate_metrics(hazard_trace({1, 2, 4, 6}), EvalConfig())
        self.assertEqual(3, metrics.hazards)

    def test_inside_at_reset_counts(self):
        metrics = accumulate_metrics(hazard_trace({0, 1}), EvalConfig())
        self.assertEqual(1, metrics.hazards)

    def test_margin_widens_zone(self):
        trace = hazard_trace(set())
        self.assertEqual(0, accumulate_metrics(trace, EvalConfig()).hazards)
        # the far obstacle is 5m away
        self.assertEqual(1, accumulate_metrics(trace, EvalConfig(hazard_margin=4.7)).hazards)

    def test_constant_velocity(self):
        moving = [(1.0, 0.0)] * 3
        trace = [header(max_steps=3)] + [state(t, shifted(0.1 * t), moving, timeout=(t == 3)) for t in range(4)]
        self.assertEqual(0.0, accumulate_metrics(trace, EvalConfig()).avg_acceleration)

    def test_timeout(self):
        metrics = accumulate_metrics(hazard_trace(set(), length=8), EvalConfig())
        self.assertEqual('timeout', metrics.status)
        self.assertFalse(metrics.success)
        self.assertEqual(7 * 0.1, metrics.time)
        self.assertIsNotNone(metrics.formation_error_mean)

    def test_collision_has_no_formation_error(self):
        trace = [header(), state(0, TRIANGLE), state(1, shifted(0.1), collision=True)]
        metrics = accumulate_metrics(trace, EvalConfig())
        self.assertEqual('collision', metrics.status)
        self.assertFalse(metrics.success)
        self.assertIsNone(metrics.formation_error_mean)
        self.assertIsNone(metrics.formation_error_sum)
        self.assertEqual(10 * 0.1, metrics.time)

    def test_single_state(self):
        metrics = accumulate_metrics([header(), state(0, TRIANGLE, goal_reached=True)], EvalConfig())
        self.assertTrue(metrics.success)
        self.assertEqual(0.0, metrics.time)
        self.assertEqual(0.0, metrics.avg_acceleration)

    def test_identical_traces_identical_metrics(self):
        self.assertEqual(accumulate_metrics(three_step_trace(), EvalConfig()),
                         accumulate_metrics(three_step_trace(), EvalConfig()))

class MalformedTraceTest(unittest.TestCase):

    def assertMalformed(self, trace):
        with self.assertRaises(TraceError):
            accumulate_metrics(trace, EvalConfig())

    def test_missing_header(self):
        self.assertMalformed(three_step_trace()[1:])

    def test_header_without_formation(self):
        trace = three_step_trace()
        del trace[0]['formation']
        self.assertMalformed(trace)

    def test_no_states(self):
        self.assertMalformed([header()])

    def test_gap_in_time(self):
        trace = three_step_trace()
        del trace[2]
        self.assertMalformed(trace)

    def test_continues_after_end(self):
        trace = three_step_trace()
        trace[2]['collision'] = True
        self.assertMalformed(trace)

    def test_ends_early(self):
        self.assertMalformed(three_step_trace()[:-1])

    def test_error_names_record(self):
        trace = three_step_trace()
        trace[3]['t'] = 7
        with self.assertRaises(TraceError) as ctx:
            accumulate_metrics(trace, EvalConfig())
        self.assertEqual('record 3', ctx.exception.location)

class AggregateTest(unittest.TestCase):

    def metrics(self):
        return [accumulate_metrics(three_step_trace(), EvalConfig()),
                accumulate_metrics(hazard_trace({1, 2, 4}), EvalConfig()),
                accumulate_metrics([header(), state(0, TRIANGLE), state(1, TRIANGLE, collision=True)],
                                   EvalConfig()),
                accumulate_metrics(hazard_trace({0}, length=5), EvalConfig())]

    def test_means(self):
        metrics = self.metrics()
        report = aggregate(metrics)
        self.assertEqual(4, report.episodes)
        self.assertEqual(0.25, report.success_rate)
        self.assertEqual((1 + 2 + 0 + 1) / 4, report.hazard_incidents)
        formed = [m for m in metrics if m.status != 'collision']
        self.assertEqual(math.fsum(m.formation_error_mean for m in formed) / 3, report.formation_error_mean)
        self.assertEqual(math.fsum(m.time for m in metrics) / 4, report.total_time_mean)
        self.assertEqual(metrics, report.details)

    def test_order_does_not_matter(self):
        metrics = self.metrics()
        report = aggregate(metrics)
        rng = random.Random(3)
        for _ in range(10):
            rng.shuffle(metrics)
            shuffled = aggregate(metrics)
            self.assertEqual(report.to_record(), shuffled.to_record())
            self.assertEqual(report.serialize(), shuffled.serialize())

    def test_only_collisions(self):
        collision = [header(), state(0, TRIANGLE), state(1, TRIANGLE, collision=True)]
        report = aggregate([accumulate_metrics(collision, EvalConfig())])
        self.assertEqual(0.0, report.success_rate)
        self.assertEqual(0.0, report.formation_error_mean)

    def test_empty(self):
        with self.assertRaises(TraceError):
            aggregate([])

class ReportTest(unittest.TestCase):

    def test_serialize(self):
        report = EvalReport(episodes=2, success_rate=0.5, hazard_incidents=1.0, formation_error_mean=0.125,
                            formation_error_sum=3.0, total_time_mean=12.25, avg_acceleration=0.0)
        self.assertEqual('episodes: 2\n'
                         'success_rate: 0.5\n'
                         'hazard_incidents: 1\n'
                         'formation_error_mean: 0.125\n'
                         'formation_error_sum: 3\n'
                         'total_time_mean: 12.25\n'
                         'avg_acceleration: 0\n', report.serialize())

    def test_record(self):
        report = aggregate([accumulate_metrics(three_step_trace(), EvalConfig())])
        self.assertEqual(report, EvalReport.from_record(report.to_record()))

    def test_incomplete_record(self):
        record = aggregate([accumulate_metrics(three_step_trace(), EvalConfig())]).to_record()
        del record['total_time_mean']
        with self.assertRaises(TraceError):
            EvalReport.from_record(record)

class EvalConfigTest(unittest.TestCase):

    def test_protocols(self):
        config = EvalConfig(hazard_margin=0.3).with_protocol('table2')
        self.assertEqual(300, config.episodes)
        self.assertEqual((0, 1, 2), config.seeds)
        self.assertEqual(0.3, config.hazard_margin)
        self.assertEqual(20, EvalConfig().with_protocol('default').episodes)
        with self.assertRaises(ConfigurationError):
            EvalConfig().with_protocol('nope')

    def test_invalid(self):
        for changes in ({'episodes': 0}, {'seeds': []}, {'hazard_margin': -0.1}, {'num_workers': 0}):
            with self.assertRaises(ConfigurationError, msg=str(changes)):
                EvalConfig(**changes)

    def test_episode_seeds(self):
        seeds = episode_seeds(EvalConfig(episodes=2, seeds=[4, 5]))
        self.assertEqual(['4_0000', '4_0001', '5_0000', '5_0001'], [label for label, _ in seeds])
        self.assertEqual(4, len(set(seed for _, seed in seeds)))

class RunEvaluationTest(unittest.TestCase):

    def test_drive_into_obstacle(self):
        config = world.preset('empty').replace(obstacle_scripts=(ObstacleScript((10.0, 5.0), 'static'),))
        trace = run_episode([straight_ahead] * 3, config, seed=0)
        metrics = accumulate_metrics(trace, EvalConfig())
        self.assertEqual('collision', metrics.status)
        self.assertEqual(1, metrics.hazards)

        report = run_evaluation([straight_ahead] * 3, config, EvalConfig(episodes=2))
        self.assertEqual(0.0, report.success_rate)
        self.assertGreaterEqual(report.hazard_incidents, 1.0)

    def test_spawned_in_formation_at_goal(self):
        config = world.preset('empty')
        offsets = equilateral_triangle().centered_offsets()
        starts = tuple(tuple(np.array(config.goal) + o) for o in offsets)
        config = config.replace(start_positions=starts)
        report = run_evaluation([standing_still] * 3, config, EvalConfig(episodes=3))
        self.assertEqual(1.0, report.success_rate)
        self.assertEqual(0.0, report.total_time_mean)
        self.assertAlmostEqual(0.0, report.formation_error_mean, places=12)
        self.assertEqual(0.0, report.avg_acceleration)

    def test_trace_header_and_records(self):
        config = world.preset('empty').replace(max_steps=5)
        trace = run_episode([standing_still] * 3, config, seed=1)
        self.assertEqual('header', trace[0]['kind'])
        self.assertEqual([0, 1, 2, 3, 4, 5], [r['t'] for r in trace[1:]])
        self.assertTrue(trace[-1]['timeout'])

    def test_wrong_number_of_policies(self):
        with self.assertRaises(ConfigurationError):
            run_episode([standing_still] * 2, world.preset('empty'), seed=0)

    def test_deterministic_and_parallel(self):
        config = world.preset('simple').replace(max_steps=20)
        team = AgentTeam.create(config, PpoConfig(policy_hidden=8, value_hidden=8), seed=2)
        serial = run_evaluation(team.policies, config, EvalConfig(episodes=3, deterministic=False))
        again = run_evaluation(team.policies, config, EvalConfig(episodes=3, deterministic=False))
        parallel = run_evaluation(team.policies, config,
                                  EvalConfig(episodes=3, deterministic=False, num_workers=2))
        self.assertEqual(serial.to_record(), again.to_record())
        self.assertEqual(serial.details, again.details)
        self.assertEqual(serial.details, parallel.details)

    def test_trace_files_score_the_same(self):
        config = world.preset('simple').replace(max_steps=15)
        with tempfile.TemporaryDirectory() as tmp:
            eval_config = EvalConfig(episodes=2, seeds=[0, 1], trace_dir=tmp)
            report = run_evaluation([straight_ahead] * 3, config, eval_config)
            names = sorted(os.listdir(tmp))
            self.assertEqual(['episode_0_0000.jsonl', 'episode_0_0001.jsonl',
                              'episode_1_0000.jsonl', 'episode_1_0001.jsonl'], names)
            traces = [t for name in names for t in load_traces(os.path.join(tmp, name))]
        self.assertEqual(report.to_record(), evaluate_traces(traces, EvalConfig()).to_record())

class TraceFileTest(unittest.TestCase):

    def test_split(self):
        records = three_step_trace() + hazard_trace({1})
        traces = split_episodes(records)
        self.assertEqual(2, len(traces))
        self.assertEqual(5, len(traces[0]))

    def test_records_before_header(self):
        with self.assertRaises(TraceError):
            split_episodes(three_step_trace()[1:])

    def test_load(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'traces.jsonl')
            with open(path, 'w') as f:
                f.write(dump_records(three_step_trace() + hazard_trace({1})))
            report = evaluate_traces(load_traces(path), EvalConfig())
        self.assertEqual(2, report.episodes)
        self.assertEqual(0.5, report.success_rate)

    def test_truncated_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'traces.jsonl')
            with open(path, 'w') as f:
                f.write(dump_records(three_step_trace()).rstrip('\n'))
            with self.assertRaises(TraceError):
                load_traces(path)

    def test_empty_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'traces.jsonl')
            open(path, 'w').close()
            with self.assertRaises(TraceError):
                load_traces(path)
