""" Evaluation metrics over fixed-policy episode batches

An episode is recorded as a trace: a header record describing the world
followed by one record per state, starting with the state at reset. All
metrics are computed from traces alone, so traces produced elsewhere (for
example by a classical planner) can be scored the same way.

Per-episode metrics:
  success            reached the goal with no collision
  hazards            entries into the zone closer than radius sum + margin to
                     an obstacle, counted once per entry for each agent and obstacle
  formation error    mean and sum over the states before arrival (0..t_end-1)
                     on success, over 0..t_end on timeout; undefined for collisions
  time               t_end * dt on success, max_steps * dt otherwise
  acceleration       mean over steps and agents of |v_t - v_(t-1)| / dt
"""

import math
import os
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

import fcca_rewardgen.logging as logging
import fcca_rewardgen.world as world
from fcca_rewardgen.exception import ConfigurationError, RewardGenError
from fcca_rewardgen.files import write_atomically, dump_records, read_records
from fcca_rewardgen.formation import FormationSpec
from fcca_rewardgen.nn import PolicyNet, ObservationBatch, policy_act

class TraceError(RewardGenError):
    pass

_EVAL_STREAM = 7
_ACTION_STREAM = 1

PROTOCOLS = {
    'default': {'episodes': 20, 'seeds': (0,)},
    'table2': {'episodes': 300, 'seeds': (0, 1, 2)},
}

@dataclass
class EvalConfig:
    episodes: int = 20
    seeds: tuple = (0,)
    preset: str = 'simple'
    deterministic: bool = True
    hazard_margin: float = 0.2
    trace_dir: typing.Optional[str] = None
    num_workers: int = 1

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.episodes <= 0:
            raise ConfigurationError(f'episodes must be positive, got {self.episodes}')
        if not self.seeds:
            raise ConfigurationError('at least one evaluation seed is required')
        if self.hazard_margin < 0:
            raise ConfigurationError(f'hazard_margin must not be negative, got {self.hazard_margin}')
        if self.num_workers < 1:
            raise ConfigurationError(f'num_workers must be at least 1, got {self.num_workers}')

    def with_protocol(self, name):
        if name not in PROTOCOLS:
            raise ConfigurationError(f'unknown evaluation protocol "{name}", expected one of {sorted(PROTOCOLS)}')
        protocol = PROTOCOLS[name]
        return EvalConfig(episodes=protocol['episodes'], seeds=protocol['seeds'], preset=self.preset,
                          deterministic=self.deterministic, hazard_margin=self.hazard_margin,
                          trace_dir=self.trace_dir, num_workers=self.num_workers)

@dataclass
class EpisodeMetrics:
    status: str
    success: bool
    hazards: int
    formation_error_mean: typing.Optional[float]
    formation_error_sum: typing.Optional[float]
    time: float
    avg_acceleration: float
    steps: int

    def to_record(self):
        return {'status': self.status,
                'success': self.success,
                'hazards': self.hazards,
                'formation_error_mean': self.formation_error_mean,
                'formation_error_sum': self.formation_error_sum,
                'time': self.time,
                'avg_acceleration': self.avg_acceleration,
                'steps': self.steps}

REPORT_KEYS = ('episodes', 'success_rate', 'hazard_incidents', 'formation_error_mean',
               'formation_error_sum', 'total_time_mean', 'avg_acceleration')

@dataclass
class EvalReport:
    episodes: int
    success_rate: float
    hazard_incidents: float
    formation_error_mean: float
    formation_error_sum: float
    total_time_mean: float
    avg_acceleration: float
    details: typing.List[EpisodeMetrics] = field(default_factory=list, compare=False, repr=False)

    def serialize(self) -> str:
        """ One `key: value` line per metric in a fixed order """
        lines = []
        for key in REPORT_KEYS:
            value = getattr(self, key)
            lines.append(f'{key}: {value}' if key == 'episodes' else f'{key}: {value:.6g}')
        return '\n'.join(lines) + '\n'

    def to_record(self):
        return {key: getattr(self, key) for key in REPORT_KEYS}

    @staticmethod
    def from_record(record):
        missing = [k for k in REPORT_KEYS if k not in record]
        if missing:
            raise TraceError(f'report record is missing {missing}')
        return EvalReport(**{key: record[key] for key in REPORT_KEYS})

# ---------------------------------------------------------------------------
# Metrics

def _split_trace(trace):
    if not trace or trace[0].get('kind') != 'header':
        raise TraceError('trace does not start with a header record')
    header = trace[0]
    for key in ('dt', 'max_steps', 'agent_radius', 'obstacle_radius', 'formation'):
        if key not in header:
            raise TraceError(f'trace header is missing "{key}"')
    steps = trace[1:]
    if not steps:
        raise TraceError('trace has no state records')
    for expected_t, record in enumerate(steps):
        if record.get('kind') != 'step':
            raise TraceError(f'unexpected record kind {record.get("kind")!r}', location=f'record {expected_t + 1}')
        if record.get('t') != expected_t:
            raise TraceError(f'state records must be consecutive from t=0, found t={record.get("t")}',
                             location=f'record {expected_t + 1}')
        if not record.get('agents'):
            raise TraceError('state record has no agents', location=f't={expected_t}')
        finished = record.get('collision') or record.get('goal_reached') or record.get('timeout')
        if finished and expected_t != len(steps) - 1:
            raise TraceError('trace continues after the episode ended', location=f't={expected_t}')
    return header, steps

def _hazard_entries(steps, threshold):
    count = 0
    previous = None
    for record in steps:
        agents = np.array([a[:2] for a in record['agents']], dtype=np.float64)
        obstacles = np.array(record.get('obstacles', []), dtype=np.float64).reshape(-1, 2)
        if obstacles.shape[0] == 0:
            inside = np.zeros((agents.shape[0], 0), dtype=bool)
        else:
            diff = agents[:, None, :] - obstacles[None, :, :]
            inside = np.sqrt(np.sum(diff * diff, axis=2)) < threshold
        if previous is None or previous.shape != inside.shape:
            count += int(np.count_nonzero(inside))
        else:
            count += int(np.count_nonzero(inside & ~previous))
        previous = inside
    return count

def accumulate_metrics(trace, config: EvalConfig) -> EpisodeMetrics:
    """ Per-episode metrics of one complete trace """
    header, steps = _split_trace(trace)
    last = steps[-1]
    collided = any(r.get('collision') for r in steps)
    success = bool(last.get('goal_reached')) and not collided
    if collided:
        status = 'collision'
    elif success:
        status = 'goal'
    elif last.get('timeout'):
        status = 'timeout'
    else:
        raise TraceError('trace ends before the episode did', location=f't={last["t"]}')
    dt = float(header['dt'])
    t_end = int(last['t'])

    threshold = float(header['agent_radius']) + float(header['obstacle_radius']) + config.hazard_margin
    hazards = _hazard_entries(steps, threshold)

    if collided:
        fe_mean = fe_sum = None
    else:
        formation = FormationSpec.from_config(header['formation'])
        # states before arrival; an episode that starts at the goal keeps its only state
        before = steps[:-1] if success and len(steps) > 1 else steps
        errors = [formation.error_of([a[:2] for a in r['agents']], strict=False) for r in before]
        fe_sum = math.fsum(errors)
        fe_mean = fe_sum / len(errors)

    time = t_end * dt if success else int(header['max_steps']) * dt

    accelerations = []
    for prev, cur in zip(steps, steps[1:]):
        for a, b in zip(prev['agents'], cur['agents']):
            accelerations.append(math.hypot(b[2] - a[2], b[3] - a[3]) / dt)
    avg_acceleration = math.fsum(accelerations) / len(accelerations) if accelerations else 0.0

    return EpisodeMetrics(status=status, success=success, hazards=hazards,
                          formation_error_mean=fe_mean, formation_error_sum=fe_sum,
                          time=time, avg_acceleration=avg_acceleration, steps=t_end)

def aggregate(metrics: typing.List[EpisodeMetrics]) -> EvalReport:
    """ Means over episodes; exactly rounded sums make the result independent of episode order """
    n = len(metrics)
    if n == 0:
        raise TraceError('no episodes to aggregate')
    formed = [m for m in metrics if m.formation_error_mean is not None]
    return EvalReport(episodes=n,
                      success_rate=sum(1 for m in metrics if m.success) / n,
                      hazard_incidents=sum(m.hazards for m in metrics) / n,
                      formation_error_mean=(math.fsum(m.formation_error_mean for m in formed) / len(formed)
                                            if formed else 0.0),
                      formation_error_sum=(math.fsum(m.formation_error_sum for m in formed) / len(formed)
                                           if formed else 0.0),
                      total_time_mean=math.fsum(m.time for m in metrics) / n,
                      avg_acceleration=math.fsum(m.avg_acceleration for m in metrics) / n,
                      details=list(metrics))

# ---------------------------------------------------------------------------
# Running episodes

def _act(policy, state, agent_index, rng, deterministic):
    agent_obs, obstacles = world.observe(state, agent_index)
    if isinstance(policy, PolicyNet):
        features, _ = policy.features(ObservationBatch.from_observations([(agent_obs, obstacles)]))
        return policy_act(policy, features, rng, deterministic).action
    # scripted controllers map a local observation to (speed, heading)
    return tuple(policy(agent_obs, obstacles))

def run_episode(policies, world_config: world.WorldConfig, seed, deterministic=True):
    """ Roll out one episode and return its trace """
    if len(policies) != world_config.num_agents:
        raise ConfigurationError(f'{len(policies)} policies for {world_config.num_agents} agents')
    state = world.reset(world_config, seed)
    rng = np.random.default_rng(world.derive_seed(seed, _ACTION_STREAM))
    outcome = world.termination_check(state)
    trace = [world.trace_header(world_config), world.trace_record(state, outcome)]
    while not outcome.done:
        actions = [_act(p, state, i, rng, deterministic) for i, p in enumerate(policies)]
        state, outcome = world.step(state, actions)
        trace.append(world.trace_record(state, outcome))
    return trace

def _episode_job(args):
    policies, world_config, seed, deterministic = args
    return run_episode(policies, world_config, seed, deterministic)

def episode_seeds(config: EvalConfig):
    """ (label, seed) of every evaluation episode, in report order """
    return [(f'{s}_{e:04d}', world.derive_seed(s, _EVAL_STREAM, e))
            for s in config.seeds for e in range(config.episodes)]

def run_evaluation(policies, world_config: world.WorldConfig, config: EvalConfig) -> EvalReport:
    """ Run the configured episode batch and aggregate its metrics """
    seeds = episode_seeds(config)
    jobs = [(policies, world_config, seed, config.deterministic) for (_, seed) in seeds]
    if config.num_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.num_workers) as pool:
            traces = list(pool.map(_episode_job, jobs))
    else:
        traces = [_episode_job(job) for job in jobs]
    if config.trace_dir is not None:
        for (label, _), trace in zip(seeds, traces):
            write_atomically(os.path.join(config.trace_dir, f'episode_{label}.jsonl'), dump_records(trace))
    report = aggregate([accumulate_metrics(trace, config) for trace in traces])
    logging.info(f'evaluated {report.episodes} episodes: success rate {report.success_rate:.3f}')
    return report

# ---------------------------------------------------------------------------
# Externally produced traces

def split_episodes(records):
    """ Split a record stream into traces, each starting at a header record """
    traces = []
    for number, record in enumerate(records, start=1):
        if record.get('kind') == 'header':
            traces.append([record])
        elif not traces:
            raise TraceError('records before the first header', location=f'record {number}')
        else:
            traces[-1].append(record)
    return traces

def load_traces(path):
    try:
        records = read_records(path)
    except RewardGenError as err:
        raise TraceError(err.reason, location=err.location)
    traces = split_episodes(records)
    if not traces:
        raise TraceError('no episodes in trace file', location=path)
    return traces

def evaluate_traces(traces, config: EvalConfig) -> EvalReport:
    return aggregate([accumulate_metrics(trace, config) for trace in traces])
