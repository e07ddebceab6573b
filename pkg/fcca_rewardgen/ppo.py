""" Centralized-training, decentralized-execution PPO

Every agent owns a policy network and acts on its local observation only.
Training shares one reward per step (the mean of the per-agent reward
program evaluations) and one value network over a fixed-length encoding of
the global state. Advantages come from generalized advantage estimation on
the shared reward, so every agent's policy is updated against the same
advantage sequence with its own samples.
"""

import math
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

import fcca_rewardgen.logging as logging
import fcca_rewardgen.world as world
from fcca_rewardgen.exception import ConfigurationError, InputError, RewardGenError
from fcca_rewardgen.files import write_atomically, RecordWriter
from fcca_rewardgen.nn import (PolicyNet, ValueNet, ObservationBatch, AdamState, adam_step,
                               clip_gradients, policy_act, serialize_params, deserialize_params,
                               restore_params, gaussian_entropy, CheckpointError)
from fcca_rewardgen.rewarddsl import RewardProgram, DslDomainError, evaluate

class PpoError(RewardGenError):
    pass

class RewardEvaluationError(PpoError):
    """ The reward program hit a domain error during a rollout; the batch was abandoned """

    def __init__(self, cause: DslDomainError, seed):
        super().__init__(f'reward program failed during training: {cause.reason}', location=f'episode seed {seed}')
        self.cause = cause
        self.seed = seed

# stream tags mixed into derive_seed
_POLICY_STREAM = 1
_UPDATE_STREAM = 2
_INIT_STREAM = 3

@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    epochs_per_batch: int = 15
    learning_rate: float = 3e-4
    minibatch_size: int = 256
    value_loss_coeff: float = 0.5
    entropy_coeff: float = 0.01
    episodes_per_batch: int = 8
    advantage_normalization: bool = True
    max_grad_norm: float = 0.5
    max_batches: int = 200
    convergence_window: int = 10
    convergence_tolerance: float = 0.02
    convergence_patience: int = 3
    num_workers: int = 1
    value_obstacle_slots: int = 8
    policy_hidden: int = 128
    value_hidden: int = 256

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 < self.gamma <= 1:
            raise ConfigurationError(f'gamma must be in (0, 1], got {self.gamma}')
        if not 0 <= self.lam <= 1:
            raise ConfigurationError(f'lam must be in [0, 1], got {self.lam}')
        if self.clip_eps <= 0:
            raise ConfigurationError(f'clip_eps must be positive, got {self.clip_eps}')
        for name in ('epochs_per_batch', 'minibatch_size', 'episodes_per_batch', 'max_batches',
                     'convergence_window', 'convergence_patience', 'num_workers',
                     'policy_hidden', 'value_hidden'):
            if getattr(self, name) < 1:
                raise ConfigurationError(f'{name} must be at least 1, got {getattr(self, name)}')
        if self.value_obstacle_slots < 0:
            raise ConfigurationError('value_obstacle_slots must not be negative')
        if self.learning_rate <= 0:
            raise ConfigurationError(f'learning_rate must be positive, got {self.learning_rate}')

# ---------------------------------------------------------------------------
# Advantage estimation

def compute_td_errors(rewards, values, dones, gamma):
    """ delta_t = r_t + gamma * V(s_{t+1}) * (1 - done_t) - V(s_t); `values` carries the bootstrap """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if values.shape[0] != rewards.shape[0] + 1 or dones.shape[0] != rewards.shape[0]:
        raise InputError(f'{rewards.shape[0]} rewards need {rewards.shape[0] + 1} values and '
                         f'{rewards.shape[0]} done flags, got {values.shape[0]} and {dones.shape[0]}')
    next_values = np.where(dones, 0.0, values[1:])
    return rewards + gamma * next_values - values[:-1]

def compute_gae(deltas, gamma, lam, dones):
    deltas = np.asarray(deltas, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    advantages = np.zeros_like(deltas)
    running = 0.0
    for t in reversed(range(deltas.shape[0])):
        if dones[t]:
            running = 0.0
        running = deltas[t] + gamma * lam * running
        advantages[t] = running
    return advantages

def normalize_advantages(advantages):
    if advantages.size == 0:
        return advantages
    std = advantages.std()
    centered = advantages - advantages.mean()
    if std == 0.0:
        return np.zeros_like(advantages)
    return centered / (std + 1e-8)

# ---------------------------------------------------------------------------
# Losses

def ppo_policy_loss(new_logp, old_logp, advantages, clip_eps):
    """ Clipped surrogate loss and its gradient with respect to `new_logp`

    Advantages are constants. A sample contributes gradient only while its
    unclipped term is the smaller one.
    """
    new_logp = np.asarray(new_logp, dtype=np.float64)
    old_logp = np.asarray(old_logp, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    with np.errstate(over='ignore', invalid='ignore'):
        ratio = np.exp(new_logp - old_logp)
    bad = np.flatnonzero(~np.isfinite(ratio))
    if bad.size > 0:
        k = int(bad[0])
        logging.error(f'probability ratio is {ratio[k]} for sample {k}',
                      f'new log-prob {new_logp[k]}, old log-prob {old_logp[k]}')
        raise PpoError(f'non-finite probability ratio for sample {k}')
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages
    n = max(ratio.shape[0], 1)
    loss = -float(np.sum(np.minimum(unclipped, clipped))) / n
    grad = np.where(unclipped <= clipped, -unclipped / n, 0.0)
    return loss, grad

def value_loss(values_pred, return_targets):
    values_pred = np.asarray(values_pred, dtype=np.float64)
    return_targets = np.asarray(return_targets, dtype=np.float64)
    n = max(values_pred.shape[0], 1)
    diff = values_pred - return_targets
    return float(np.sum(diff * diff)) / n, 2.0 * diff / n

# ---------------------------------------------------------------------------
# Global state for the centralized critic

def global_state_size(num_agents, obstacle_slots):
    return 4 * num_agents + 2 + 5 * obstacle_slots

def encode_global_state(state: world.EpisodeState, obstacle_slots):
    """ Goal-relative agent positions and velocities, formation error, time
    fraction, and the `obstacle_slots` obstacles nearest the centroid
    (centroid-relative position, velocity, presence flag), zero padded.
    """
    config = state.config
    goal = np.array(config.goal)
    parts = []
    for p, v in zip(state.agent_positions, state.agent_velocities):
        parts.extend([p[0] - goal[0], p[1] - goal[1], v[0], v[1]])
    parts.append(config.formation.error_of(state.agent_positions, strict=False))
    parts.append(state.t / config.max_steps)
    centroid = state.centroid()
    nearest = sorted(range(state.obstacle_positions.shape[0]),
                     key=lambda k: (float(np.hypot(*(state.obstacle_positions[k] - centroid))), k))
    for k in nearest[:obstacle_slots]:
        offset = state.obstacle_positions[k] - centroid
        velocity = (state.obstacle_positions[k] - state.obstacle_previous[k]) / config.dt
        parts.extend([offset[0], offset[1], velocity[0], velocity[1], 1.0])
    parts.extend([0.0] * (5 * (obstacle_slots - min(obstacle_slots, len(nearest)))))
    return np.array(parts, dtype=np.float64)

# ---------------------------------------------------------------------------
# The team of learners

class AgentTeam:
    """ One policy per agent, the shared critic, and their optimizer states """

    def __init__(self, policies, value_net, config: PpoConfig, policy_optimizers=None, value_optimizer=None):
        self.policies = list(policies)
        self.value_net = value_net
        self.config = config
        self.policy_optimizers = policy_optimizers or [
            AdamState.for_params(p.parameters(), config.learning_rate) for p in self.policies]
        self.value_optimizer = value_optimizer or AdamState.for_params(value_net.parameters(),
                                                                       config.learning_rate)

    @staticmethod
    def create(world_config: world.WorldConfig, config: PpoConfig, seed):
        rng = np.random.default_rng(world.derive_seed(seed, _INIT_STREAM))
        policies = [PolicyNet(hidden=config.policy_hidden, max_speed=world_config.max_speed_agent, rng=rng)
                    for _ in range(world_config.num_agents)]
        value_net = ValueNet(global_state_size(world_config.num_agents, config.value_obstacle_slots),
                             hidden=config.value_hidden, rng=rng)
        return AgentTeam(policies, value_net, config)

    @property
    def num_agents(self):
        return len(self.policies)

    def nets(self):
        nets = {f'policy{i}': p for i, p in enumerate(self.policies)}
        nets['value'] = self.value_net
        return nets

    def optimizers(self):
        optimizers = {f'policy{i}': s for i, s in enumerate(self.policy_optimizers)}
        optimizers['value'] = self.value_optimizer
        return optimizers

    def parameter_count(self):
        return sum(net.parameter_count() for net in self.nets().values())

    def to_bytes(self, meta=None):
        return serialize_params(self.nets(), self.optimizers(), meta)

    def save(self, path, meta=None):
        write_atomically(path, self.to_bytes(meta))

    @staticmethod
    def from_bytes(data, config: PpoConfig = None):
        checkpoint = deserialize_params(data)
        descriptor = checkpoint.descriptor
        policies = []
        value_net = None
        for entry in descriptor['nets']:
            if entry['name'] == 'value':
                value_net = ValueNet.from_arch(entry.get('arch', {}))
            else:
                policies.append(PolicyNet.from_arch(entry.get('arch', {})))
        if value_net is None or not policies:
            raise CheckpointError('checkpoint does not hold a complete agent team')
        config = config or PpoConfig()
        team = AgentTeam(policies, value_net, config)
        restore_params(checkpoint, team.nets(), team.optimizers())
        return team

    @staticmethod
    def load(path, config: PpoConfig = None):
        with open(path, 'rb') as f:
            data = f.read()
        try:
            return AgentTeam.from_bytes(data, config)
        except CheckpointError as err:
            raise CheckpointError(err.reason, location=path)

    def check_compatible(self, world_config: world.WorldConfig):
        if self.num_agents != world_config.num_agents:
            raise CheckpointError(f'checkpoint holds {self.num_agents} policies, '
                                  f'the world has {world_config.num_agents} agents')
        expected = global_state_size(world_config.num_agents, self.config.value_obstacle_slots)
        if self.value_net.input_size != expected:
            raise CheckpointError(f'value network expects {self.value_net.input_size} inputs, '
                                  f'the configured global state has {expected}')

# ---------------------------------------------------------------------------
# Rollouts

@dataclass
class EpisodeRollout:
    observations: list          # per agent ObservationBatch of T samples
    pre_squash: np.ndarray      # (agents, T, 2)
    log_probs: np.ndarray       # (agents, T)
    global_states: np.ndarray   # (T + 1, G)
    rewards: np.ndarray         # (T,) shared
    agent_rewards: np.ndarray   # (agents, T)
    dones: np.ndarray           # (T,)
    status: str
    seed: int

    @property
    def length(self):
        return self.rewards.shape[0]

def shared_reward(program: RewardProgram, state, outcome, seed=None):
    """ Per-agent reward program values and their mean """
    values = []
    for i in range(state.num_agents):
        try:
            values.append(evaluate(program, world.reward_context(state, outcome, i)))
        except DslDomainError as err:
            raise RewardEvaluationError(err, seed)
    return values, math.fsum(values) / len(values)

def collect_episode(policies, world_config, program, seed, obstacle_slots, deterministic=False) -> EpisodeRollout:
    n = len(policies)
    state = world.reset(world_config, seed)
    rng = np.random.default_rng(world.derive_seed(seed, _POLICY_STREAM))
    observations = [[] for _ in range(n)]
    pre_squash = [[] for _ in range(n)]
    log_probs = [[] for _ in range(n)]
    global_states = [encode_global_state(state, obstacle_slots)]
    rewards, agent_rewards, dones = [], [], []
    status = world.termination_check(state).status
    done = status != 'running'
    while not done:
        actions = []
        for i, policy in enumerate(policies):
            obs = world.observe(state, i)
            batch = ObservationBatch.from_observations([obs])
            features, _ = policy.features(batch)
            sample = policy_act(policy, features, rng, deterministic)
            observations[i].append(obs)
            pre_squash[i].append(sample.pre_squash)
            log_probs[i].append(sample.log_prob)
            actions.append(sample.action)
        state, outcome = world.step(state, actions)
        per_agent, shared = shared_reward(program, state, outcome, seed)
        rewards.append(shared)
        agent_rewards.append(per_agent)
        dones.append(outcome.collision or outcome.goal_reached)
        global_states.append(encode_global_state(state, obstacle_slots))
        done = outcome.done
        status = outcome.status
    length = len(rewards)
    return EpisodeRollout(observations=[ObservationBatch.from_observations(o) for o in observations],
                          pre_squash=np.array(pre_squash, dtype=np.float64).reshape(n, length, 2),
                          log_probs=np.array(log_probs, dtype=np.float64).reshape(n, length),
                          global_states=np.array(global_states),
                          rewards=np.array(rewards, dtype=np.float64),
                          agent_rewards=np.array(agent_rewards, dtype=np.float64).reshape(length, n).T,
                          dones=np.array(dones, dtype=bool),
                          status=status,
                          seed=seed)

def _collect_job(args):
    return collect_episode(*args)

def collect_batch(policies, world_config, program, seeds, config: PpoConfig):
    """ Episodes for `seeds`, in seed order regardless of how they are scheduled """
    jobs = [(policies, world_config, program, s, config.value_obstacle_slots) for s in seeds]
    if config.num_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.num_workers) as pool:
            return list(pool.map(_collect_job, jobs))
    return [_collect_job(job) for job in jobs]

# ---------------------------------------------------------------------------
# Updates

@dataclass
class BatchStats:
    batch: int
    mean_reward: float
    policy_loss: float
    value_loss: float
    entropy: float
    total_loss: float
    goal_fraction: float
    collision_fraction: float
    mean_length: float
    converged: bool = False

    def to_record(self, label=None):
        record = {'batch': self.batch,
                  'mean_reward': self.mean_reward,
                  'policy_loss': self.policy_loss,
                  'value_loss': self.value_loss,
                  'entropy': self.entropy,
                  'total_loss': self.total_loss,
                  'goal_fraction': self.goal_fraction,
                  'collision_fraction': self.collision_fraction,
                  'mean_length': self.mean_length,
                  'converged': self.converged}
        if label is not None:
            record['phase'] = label
        return record

def _advantages(team: AgentTeam, episodes, config: PpoConfig):
    advantages, returns = [], []
    for episode in episodes:
        values = team.value_net.predict(episode.global_states)
        deltas = compute_td_errors(episode.rewards, values, episode.dones, config.gamma)
        adv = compute_gae(deltas, config.gamma, config.lam, episode.dones)
        if not np.all(np.isfinite(adv)):
            raise PpoError('non-finite advantage', location=f'episode seed {episode.seed}')
        advantages.append(adv)
        returns.append(adv + values[:-1])
    return np.concatenate(advantages), np.concatenate(returns)

def _update_policy(policy, optimizer, observations, pre_squash, old_logp, advantages, idx, config):
    batch = observations.select(idx)
    logp, entropy, cache = policy.evaluate_actions(batch, pre_squash[idx])
    loss, d_logp = ppo_policy_loss(logp, old_logp[idx], advantages[idx], config.clip_eps)
    grads = policy.backward(cache, d_logp, d_entropy=-config.entropy_coeff)
    adam_step(policy.parameters(), clip_gradients(grads, config.max_grad_norm), optimizer)
    return loss, entropy

def _update_value(team, states, returns, idx, config):
    pred, cache = team.value_net.forward(states[idx])
    loss, d_pred = value_loss(pred, returns[idx])
    grads = team.value_net.backward(cache, config.value_loss_coeff * d_pred)
    adam_step(team.value_net.parameters(), clip_gradients(grads, config.max_grad_norm), team.value_optimizer)
    return loss

def train_iteration(team: AgentTeam, world_config, program: RewardProgram, config: PpoConfig,
                    seed, batch_index=0) -> BatchStats:
    """ Collect one batch of episodes with the current policies and run the PPO epochs on it """
    team.check_compatible(world_config)
    seeds = [world.derive_seed(seed, batch_index, e) for e in range(config.episodes_per_batch)]
    episodes = collect_batch(team.policies, world_config, program, seeds, config)

    advantages, returns = _advantages(team, episodes, config)
    if config.advantage_normalization:
        advantages = normalize_advantages(advantages)
    states = np.concatenate([e.global_states[:-1] for e in episodes])
    samples = states.shape[0]
    observations = [ObservationBatch.concatenate([e.observations[i] for e in episodes])
                    for i in range(team.num_agents)]
    pre_squash = [np.concatenate([e.pre_squash[i] for e in episodes]) for i in range(team.num_agents)]
    old_logp = [np.concatenate([e.log_probs[i] for e in episodes]) for i in range(team.num_agents)]

    rng = np.random.default_rng(world.derive_seed(seed, batch_index, _UPDATE_STREAM))
    policy_losses, value_losses = [], []
    entropy = float(np.mean([gaussian_entropy(p.clamped_log_std()) for p in team.policies]))
    for epoch in range(config.epochs_per_batch):
        order = rng.permutation(samples)
        last_epoch = epoch == config.epochs_per_batch - 1
        for start in range(0, samples, config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            losses = []
            entropies = []
            for i, policy in enumerate(team.policies):
                loss, ent = _update_policy(policy, team.policy_optimizers[i], observations[i],
                                           pre_squash[i], old_logp[i], advantages, idx, config)
                losses.append(loss)
                entropies.append(ent)
            v_loss = _update_value(team, states, returns, idx, config)
            if last_epoch:
                policy_losses.append(float(np.mean(losses)))
                value_losses.append(v_loss)
                entropy = float(np.mean(entropies))

    policy_loss = float(np.mean(policy_losses)) if policy_losses else 0.0
    v_loss = float(np.mean(value_losses)) if value_losses else 0.0
    n_episodes = len(episodes)
    return BatchStats(batch=batch_index,
                      mean_reward=math.fsum(float(e.rewards.sum()) for e in episodes) / n_episodes,
                      policy_loss=policy_loss,
                      value_loss=v_loss,
                      entropy=entropy,
                      total_loss=policy_loss + config.value_loss_coeff * v_loss - config.entropy_coeff * entropy,
                      goal_fraction=sum(e.status == 'goal' for e in episodes) / n_episodes,
                      collision_fraction=sum(e.status == 'collision' for e in episodes) / n_episodes,
                      mean_length=sum(e.length for e in episodes) / n_episodes)

# ---------------------------------------------------------------------------
# Training to convergence

@dataclass
class ConvergenceMonitor:
    """ Loss convergence: the moving average of the total loss changes by
    less than `tolerance` (relative) for `patience` consecutive windows.

    The average is compared with the one a full window earlier, once per
    window, so the earliest convergence is after (patience + 1) * window
    batches.
    """
    window: int = 10
    tolerance: float = 0.02
    patience: int = 3
    losses: list = field(default_factory=list)
    streak: int = 0

    @staticmethod
    def for_config(config: PpoConfig):
        return ConvergenceMonitor(config.convergence_window, config.convergence_tolerance,
                                  config.convergence_patience)

    def update(self, total_loss) -> bool:
        self.losses.append(float(total_loss))
        n = len(self.losses)
        if n < 2 * self.window or n % self.window != 0:
            return False
        current = math.fsum(self.losses[-self.window:]) / self.window
        previous = math.fsum(self.losses[-2 * self.window:-self.window]) / self.window
        change = abs(current - previous) / max(abs(previous), 1e-8)
        self.streak = self.streak + 1 if change < self.tolerance else 0
        return self.streak >= self.patience

@dataclass
class TrainingSummary:
    batches: int
    converged: bool
    stats: typing.List[BatchStats]

    @property
    def final(self):
        return self.stats[-1] if self.stats else None

    def policy_summary(self):
        """ Final losses, entropy and batches-to-convergence, as fed back to the reward designer """
        final = self.final
        if final is None:
            return {'batches': 0, 'converged': False}
        return {'batches': self.batches,
                'converged': self.converged,
                'final_policy_loss': final.policy_loss,
                'final_value_loss': final.value_loss,
                'final_entropy': final.entropy}

def train_until_converged(team: AgentTeam, world_config, program: RewardProgram, config: PpoConfig,
                          seed, metrics: RecordWriter = None, label=None, max_batches=None) -> TrainingSummary:
    """ Run `train_iteration` until the loss converges or the batch cap is reached """
    monitor = ConvergenceMonitor.for_config(config)
    cap = max_batches if max_batches is not None else config.max_batches
    stats = []
    converged = False
    for batch_index in range(cap):
        batch = train_iteration(team, world_config, program, config, seed, batch_index)
        converged = monitor.update(batch.total_loss)
        batch.converged = converged
        stats.append(batch)
        if metrics is not None:
            metrics.write(batch.to_record(label))
        logging.info(f'batch {batch_index}: mean reward {batch.mean_reward:.4g}, '
                     f'goal {batch.goal_fraction:.2f}, total loss {batch.total_loss:.4g}')
        if converged:
            break
    if not converged:
        logging.warn(f'loss did not converge within {cap} batches', location=label)
    return TrainingSummary(batches=len(stats), converged=converged, stats=stats)
