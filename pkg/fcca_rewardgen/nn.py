""" Small dense networks with hand-written gradients

Parameters are plain float64 numpy arrays. A dense layer stores its weight
as (out, in) and computes y = x W^T + b over a batch of row vectors, so the
weight gradient is upstream^T x.

The policy encodes every visible obstacle with a shared MLP and mean-pools
the results, which makes the encoding independent of the obstacle order,
encodes the agent's own observation with a second MLP, and maps the
concatenation through a ReLU layer to the mean of a Gaussian over
pre-squash actions. Actions are squashed into a speed in (0, max_speed) by a
sigmoid and a heading in (-pi, pi) by tanh.
"""

import io
import json
import math
import struct
import typing
from dataclasses import dataclass, field

import numpy as np

from fcca_rewardgen.exception import InputError, RewardGenError

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
AGENT_INPUT_SIZE = 5
OBSTACLE_INPUT_SIZE = 4
_LOG_2PI = math.log(2.0 * math.pi)

class CheckpointError(RewardGenError):
    pass

@dataclass(frozen=True)
class MlpSpec:
    widths: tuple
    output_activation: str = 'linear'

    def __post_init__(self):
        object.__setattr__(self, 'widths', tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise InputError(f'an MLP needs an input and at least one layer, got widths {self.widths}')
        if any(w <= 0 for w in self.widths):
            raise InputError(f'layer widths must be positive, got {self.widths}')
        if self.output_activation not in ('linear', 'relu'):
            raise InputError(f'unknown output activation "{self.output_activation}"')

    @property
    def num_layers(self):
        return len(self.widths) - 1

    def param_shapes(self):
        shapes = []
        for k in range(self.num_layers):
            shapes.append((self.widths[k + 1], self.widths[k]))
            shapes.append((self.widths[k + 1],))
        return shapes

    def to_config(self):
        return {'widths': list(self.widths), 'output_activation': self.output_activation}

def init_mlp(spec: MlpSpec, rng, output_scale=1.0):
    """ He-initialized weights, zero biases; the last weight matrix is scaled by `output_scale` """
    params = []
    for k in range(spec.num_layers):
        fan_in = spec.widths[k]
        weight = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(spec.widths[k + 1], fan_in))
        if k == spec.num_layers - 1:
            weight = weight * output_scale
        params.append(weight)
        params.append(np.zeros(spec.widths[k + 1]))
    return params

@dataclass
class MlpCache:
    spec: MlpSpec
    params: list
    inputs: list = field(default_factory=list)
    pre_activations: list = field(default_factory=list)

def _relu_after(spec, k):
    return k < spec.num_layers - 1 or spec.output_activation == 'relu'

def _check_finite(array, what):
    if __debug__ and not np.all(np.isfinite(array)):
        raise InputError(f'non-finite values in {what}')

def mlp_forward(spec: MlpSpec, params, x):
    """ Forward pass over a batch `x` of shape (B, in); returns (output, cache) """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != spec.widths[0]:
        raise InputError(f'MLP expects inputs of width {spec.widths[0]}, got {x.shape[1]}')
    cache = MlpCache(spec, params)
    out = x
    for k in range(spec.num_layers):
        weight = params[2 * k]
        bias = params[2 * k + 1]
        cache.inputs.append(out)
        z = out @ weight.T + bias
        cache.pre_activations.append(z)
        out = np.maximum(z, 0.0) if _relu_after(spec, k) else z
    _check_finite(out, 'MLP output')
    return out, cache

def mlp_backward(cache: MlpCache, upstream):
    """ Exact reverse pass; returns (parameter gradients in parameter order, input gradient) """
    spec = cache.spec
    grad = np.asarray(upstream, dtype=np.float64)
    if grad.ndim == 1:
        grad = grad[None, :]
    if len(cache.inputs) != spec.num_layers or grad.shape != cache.pre_activations[-1].shape:
        raise InputError(f'upstream gradient of shape {grad.shape} does not match the cached forward pass')
    grads = [None] * (2 * spec.num_layers)
    for k in reversed(range(spec.num_layers)):
        if _relu_after(spec, k):
            grad = grad * (cache.pre_activations[k] > 0.0)
        grads[2 * k] = grad.T @ cache.inputs[k]
        grads[2 * k + 1] = grad.sum(axis=0)
        grad = grad @ cache.params[2 * k]
    return grads, grad

def _softplus(x):
    return np.logaddexp(0.0, x)

def _sigmoid(x):
    return np.exp(-_softplus(-x))

def squash(u, max_speed):
    """ Map pre-squash samples (..., 2) to (speed, heading) """
    u = np.asarray(u, dtype=np.float64)
    speed = max_speed * _sigmoid(u[..., 0])
    heading = math.pi * np.tanh(u[..., 1])
    return np.stack([speed, heading], axis=-1)

def log_squash_jacobian(u, max_speed):
    """ Per-dimension log |d squash / du|, shape (..., 2) """
    u = np.asarray(u, dtype=np.float64)
    speed_term = math.log(max_speed) - _softplus(-u[..., 0]) - _softplus(u[..., 0])
    heading_term = math.log(math.pi) + 2.0 * (math.log(2.0) - u[..., 1] - _softplus(-2.0 * u[..., 1]))
    return np.stack([speed_term, heading_term], axis=-1)

def gaussian_log_prob(u, mean, log_std):
    """ Per-dimension Normal log density, shape (..., 2) """
    z = (u - mean) * np.exp(-log_std)
    return -0.5 * z * z - log_std - 0.5 * _LOG_2PI

def gaussian_entropy(log_std):
    return float(np.sum(0.5 + 0.5 * _LOG_2PI + log_std))

def _canonical_obstacles(rows, segments):
    """ Sort obstacle rows by (sample, features) so pooled sums do not depend on list order """
    if rows.shape[0] == 0:
        return rows, segments
    order = np.lexsort((rows[:, 3], rows[:, 2], rows[:, 1], rows[:, 0], segments))
    return rows[order], segments[order]

@dataclass
class ObservationBatch:
    """ Policy inputs for B samples; obstacle rows are tagged with their sample index """
    agent: np.ndarray         # (B, 5)
    obstacles: np.ndarray     # (K, 4)
    segments: np.ndarray      # (K,) in 0..B-1

    @property
    def size(self):
        return self.agent.shape[0]

    @staticmethod
    def from_observations(pairs):
        """ Build a batch from (AgentObservation, [ObstacleObservation]) pairs """
        agent = np.array([a.as_vector() for (a, _) in pairs], dtype=np.float64).reshape(-1, AGENT_INPUT_SIZE)
        rows = []
        segments = []
        for i, (_, obstacles) in enumerate(pairs):
            for o in obstacles:
                rows.append(o.as_vector())
                segments.append(i)
        return ObservationBatch(agent,
                                np.array(rows, dtype=np.float64).reshape(-1, OBSTACLE_INPUT_SIZE),
                                np.array(segments, dtype=np.int64))

    def select(self, indices):
        """ The sub-batch of samples `indices`, renumbered 0..len(indices)-1 """
        indices = np.asarray(indices, dtype=np.int64)
        remap = np.full(self.size, -1, dtype=np.int64)
        remap[indices] = np.arange(indices.size)
        keep = remap[self.segments] >= 0
        return ObservationBatch(self.agent[indices], self.obstacles[keep], remap[self.segments[keep]])

    @staticmethod
    def concatenate(batches):
        offset = 0
        agents, rows, segments = [], [], []
        for b in batches:
            agents.append(b.agent)
            rows.append(b.obstacles)
            segments.append(b.segments + offset)
            offset += b.size
        if not batches:
            return ObservationBatch(np.zeros((0, AGENT_INPUT_SIZE)), np.zeros((0, OBSTACLE_INPUT_SIZE)),
                                    np.zeros(0, dtype=np.int64))
        return ObservationBatch(np.concatenate(agents), np.concatenate(rows), np.concatenate(segments))

@dataclass
class ActionSample:
    action: tuple           # (speed, heading)
    pre_squash: np.ndarray  # (2,)
    log_prob: float
    entropy: float

class PolicyNet:
    """ Decentralized actor: obstacle encoder + agent encoder + ReLU trunk + Gaussian head """

    def __init__(self, hidden=128, max_speed=1.25, init_log_std=-0.5, rng=None, seed=0):
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.hidden = int(hidden)
        self.max_speed = float(max_speed)
        self.init_log_std = float(init_log_std)
        self.obstacle_spec = MlpSpec((OBSTACLE_INPUT_SIZE, hidden, hidden), 'relu')
        self.agent_spec = MlpSpec((AGENT_INPUT_SIZE, hidden, hidden), 'relu')
        self.trunk_spec = MlpSpec((2 * hidden, hidden, 2), 'linear')
        self.obstacle_params = init_mlp(self.obstacle_spec, rng)
        self.agent_params = init_mlp(self.agent_spec, rng)
        self.trunk_params = init_mlp(self.trunk_spec, rng, output_scale=0.01)
        self.log_std = np.full(2, self.init_log_std)

    def parameters(self):
        return self.obstacle_params + self.agent_params + self.trunk_params + [self.log_std]

    def parameter_count(self):
        return int(sum(p.size for p in self.parameters()))

    def arch(self):
        return {'kind': 'policy', 'hidden': self.hidden, 'max_speed': self.max_speed,
                'init_log_std': self.init_log_std}

    @staticmethod
    def from_arch(arch):
        if arch.get('kind') != 'policy':
            raise CheckpointError(f'expected a policy network, found {arch.get("kind")!r}')
        return PolicyNet(hidden=arch['hidden'], max_speed=arch['max_speed'],
                         init_log_std=arch.get('init_log_std', -0.5))

    def clamped_log_std(self):
        return np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    def features(self, batch: ObservationBatch):
        """ Encoded features (B, 2*hidden) and the cache needed to backpropagate into the encoders """
        rows, segments = _canonical_obstacles(batch.obstacles, batch.segments)
        b = batch.size
        pooled = np.zeros((b, self.hidden))
        counts = np.bincount(segments, minlength=b).astype(np.float64)
        obstacle_cache = None
        if rows.shape[0] > 0:
            encoded, obstacle_cache = mlp_forward(self.obstacle_spec, self.obstacle_params, rows)
            np.add.at(pooled, segments, encoded)
            pooled = pooled / np.maximum(counts, 1.0)[:, None]
        agent_features, agent_cache = mlp_forward(self.agent_spec, self.agent_params, batch.agent)
        features = np.concatenate([pooled, agent_features], axis=1)
        return features, (obstacle_cache, agent_cache, segments, counts)

    def mean(self, features):
        return mlp_forward(self.trunk_spec, self.trunk_params, features)

    def evaluate_actions(self, batch: ObservationBatch, pre_squash):
        """ Log-probabilities (B,) of stored pre-squash actions and the per-sample entropy """
        features, encoder_cache = self.features(batch)
        mean, trunk_cache = self.mean(features)
        log_std = self.clamped_log_std()
        u = np.asarray(pre_squash, dtype=np.float64).reshape(-1, 2)
        log_prob = (gaussian_log_prob(u, mean, log_std).sum(axis=1)
                    - log_squash_jacobian(u, self.max_speed).sum(axis=1))
        cache = (encoder_cache, trunk_cache, mean, log_std, u)
        return log_prob, gaussian_entropy(log_std), cache

    def backward(self, cache, d_log_prob, d_entropy=0.0):
        """ Gradients (in `parameters()` order) of sum(d_log_prob * log_prob) + d_entropy * entropy """
        (obstacle_cache, agent_cache, segments, counts), trunk_cache, mean, log_std, u = cache
        d_log_prob = np.asarray(d_log_prob, dtype=np.float64).reshape(-1, 1)
        inv_var = np.exp(-2.0 * log_std)
        diff = u - mean
        d_mean = d_log_prob * diff * inv_var
        d_log_std = np.sum(d_log_prob * (diff * diff * inv_var - 1.0), axis=0) + d_entropy
        inside = (self.log_std >= LOG_STD_MIN) & (self.log_std <= LOG_STD_MAX)
        d_log_std = d_log_std * inside

        trunk_grads, d_features = mlp_backward(trunk_cache, d_mean)
        d_pooled = d_features[:, :self.hidden]
        d_agent = d_features[:, self.hidden:]
        agent_grads, _ = mlp_backward(agent_cache, d_agent)
        if obstacle_cache is not None:
            d_rows = (d_pooled / np.maximum(counts, 1.0)[:, None])[segments]
            obstacle_grads, _ = mlp_backward(obstacle_cache, d_rows)
        else:
            obstacle_grads = [np.zeros_like(p) for p in self.obstacle_params]
        return obstacle_grads + agent_grads + trunk_grads + [d_log_std]

class ValueNet:
    """ Centralized critic over the fixed-length global state encoding """

    def __init__(self, input_size, hidden=256, rng=None, seed=0):
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.input_size = int(input_size)
        self.hidden = int(hidden)
        self.spec = MlpSpec((self.input_size, self.hidden, self.hidden, 1), 'linear')
        # a zero output layer makes the initial value estimate exactly 0
        self.params = init_mlp(self.spec, rng, output_scale=0.0)

    def parameters(self):
        return self.params

    def parameter_count(self):
        return int(sum(p.size for p in self.params))

    def arch(self):
        return {'kind': 'value', 'input_size': self.input_size, 'hidden': self.hidden}

    @staticmethod
    def from_arch(arch):
        if arch.get('kind') != 'value':
            raise CheckpointError(f'expected a value network, found {arch.get("kind")!r}')
        return ValueNet(arch['input_size'], hidden=arch['hidden'])

    def forward(self, states):
        out, cache = mlp_forward(self.spec, self.params, states)
        return out[:, 0], cache

    def predict(self, states):
        return self.forward(states)[0]

    def backward(self, cache, d_values):
        grads, _ = mlp_backward(cache, np.asarray(d_values, dtype=np.float64).reshape(-1, 1))
        return grads

def encode_observation(policy: PolicyNet, agent_obs, obstacle_obs):
    """ Feature vector of one agent: pooled obstacle encoding followed by the agent encoding """
    batch = ObservationBatch.from_observations([(agent_obs, list(obstacle_obs))])
    features, _ = policy.features(batch)
    return features[0]

def policy_logprob(policy: PolicyNet, features, pre_squash):
    mean, _ = policy.mean(features)
    u = np.asarray(pre_squash, dtype=np.float64).reshape(1, 2)
    log_std = policy.clamped_log_std()
    return float(gaussian_log_prob(u, mean, log_std).sum() - log_squash_jacobian(u, policy.max_speed).sum())

def policy_act(policy: PolicyNet, features, rng, deterministic=False) -> ActionSample:
    """ Sample (or, deterministically, take the mean of) the squashed Gaussian policy """
    mean, _ = policy.mean(features)
    mean = mean[0]
    log_std = policy.clamped_log_std()
    if deterministic:
        u = mean.copy()
    else:
        u = mean + np.exp(log_std) * rng.standard_normal(2)
    if not np.all(np.isfinite(u)):
        raise InputError(f'non-finite policy sample {u.tolist()}')
    log_prob = float(gaussian_log_prob(u, mean, log_std).sum()
                     - log_squash_jacobian(u, policy.max_speed).sum())
    speed, heading = squash(u, policy.max_speed)
    return ActionSample(action=(float(speed), float(heading)), pre_squash=u,
                        log_prob=log_prob, entropy=gaussian_entropy(log_std))

@dataclass
class AdamState:
    lr: float
    m: list
    v: list
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @staticmethod
    def for_params(params, lr):
        return AdamState(lr=float(lr),
                         m=[np.zeros_like(p) for p in params],
                         v=[np.zeros_like(p) for p in params])

def adam_step(params, grads, state: AdamState):
    """ One bias-corrected Adam update, applied to `params` in place """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InputError(f'{len(params)} parameters, {len(grads)} gradients, {len(state.m)} moment slots')
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise InputError(f'shape mismatch: parameter {p.shape}, gradient {g.shape}, moment {m.shape}')
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return params

def clip_gradients(grads, max_norm):
    """ Scale `grads` so their global norm is at most `max_norm` (no-op when max_norm <= 0) """
    if max_norm is None or max_norm <= 0:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return [g * scale for g in grads]

# ---------------------------------------------------------------------------
# Checkpoints
#
#   magic (8 bytes) | format version (u32 LE) | descriptor length (u32 LE)
#   | descriptor (UTF-8 JSON) | parameter blocks | Adam moment blocks
#
# All blocks are little-endian float64 in descriptor order.

CHECKPOINT_MAGIC = b'FCCARWD\x00'
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct('<8sII')

@dataclass
class Checkpoint:
    descriptor: dict
    params: dict        # net name -> [arrays]
    moments: dict       # optimizer name -> ([m arrays], [v arrays])

def _write_blocks(stream, arrays):
    for a in arrays:
        stream.write(np.ascontiguousarray(a, dtype='<f8').tobytes())

def serialize_params(nets: dict, optimizers: dict = None, meta: dict = None) -> bytes:
    """ Checkpoint bytes for the named networks and Adam states (dicts keep their order) """
    optimizers = optimizers or {}
    descriptor = {
        'nets': [{'name': name, 'arch': net.arch(),
                  'shapes': [list(p.shape) for p in net.parameters()]}
                 for name, net in nets.items()],
        'optimizers': [{'name': name, 'step': state.step, 'lr': state.lr,
                        'beta1': state.beta1, 'beta2': state.beta2, 'eps': state.eps,
                        'shapes': [list(m.shape) for m in state.m]}
                       for name, state in optimizers.items()],
        'meta': meta or {},
    }
    text = json.dumps(descriptor, sort_keys=True, separators=(',', ':')).encode('utf-8')
    stream = io.BytesIO()
    stream.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(text)))
    stream.write(text)
    for net in nets.values():
        _write_blocks(stream, net.parameters())
    for state in optimizers.values():
        _write_blocks(stream, state.m)
        _write_blocks(stream, state.v)
    return stream.getvalue()

def _read_blocks(data, offset, shapes):
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError('checkpoint is truncated')
        arrays.append(np.frombuffer(data, dtype='<f8', count=count, offset=offset)
                      .astype(np.float64).reshape(shape))
        offset = end
    return arrays, offset

def _is_shape(shape):
    return isinstance(shape, list) and all(isinstance(d, int) and d >= 0 for d in shape)

def _descriptor_entries(descriptor, key, numbers=()):
    entries = descriptor.get(key) if isinstance(descriptor, dict) else None
    if not isinstance(entries, list):
        raise CheckpointError(f'checkpoint descriptor has no "{key}" list')
    for k, entry in enumerate(entries):
        if (not isinstance(entry, dict) or not isinstance(entry.get('name'), str)
                or not isinstance(entry.get('shapes'), list)
                or not all(_is_shape(s) for s in entry['shapes'])
                or not all(isinstance(entry.get(n), (int, float)) for n in numbers)):
            raise CheckpointError(f'malformed entry {k} of "{key}" in the checkpoint descriptor')
    return entries

def deserialize_params(data: bytes) -> Checkpoint:
    if len(data) < _HEADER.size:
        raise CheckpointError('checkpoint is truncated')
    magic, version, length = _HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError('not a checkpoint file (bad magic)')
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f'checkpoint format version {version} is not supported '
                              f'(expected {CHECKPOINT_VERSION})')
    start = _HEADER.size
    if start + length > len(data):
        raise CheckpointError('checkpoint is truncated')
    try:
        descriptor = json.loads(data[start:start + length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f'corrupted checkpoint descriptor ({err})')
    offset = start + length
    params = {}
    moments = {}
    nets = _descriptor_entries(descriptor, 'nets')
    optimizers = _descriptor_entries(descriptor, 'optimizers', ('step', 'lr', 'beta1', 'beta2', 'eps'))
    for entry in nets:
        params[entry['name']], offset = _read_blocks(data, offset, entry['shapes'])
    for entry in optimizers:
        m, offset = _read_blocks(data, offset, entry['shapes'])
        v, offset = _read_blocks(data, offset, entry['shapes'])
        moments[entry['name']] = (m, v)
    if offset != len(data):
        raise CheckpointError(f'{len(data) - offset} unexpected trailing bytes in checkpoint')
    return Checkpoint(descriptor, params, moments)

def restore_params(checkpoint: Checkpoint, nets: dict, optimizers: dict = None):
    """ Copy the checkpoint's arrays into `nets` and `optimizers`, checking every shape """
    optimizers = optimizers or {}
    for name, net in nets.items():
        stored = checkpoint.params.get(name)
        if stored is None:
            raise CheckpointError(f'checkpoint has no network named "{name}"')
        targets = net.parameters()
        if len(stored) != len(targets):
            raise CheckpointError(f'network "{name}": checkpoint has {len(stored)} parameter blocks, '
                                  f'the model has {len(targets)}')
        for k, (src, dst) in enumerate(zip(stored, targets)):
            if src.shape != dst.shape:
                raise CheckpointError(f'network "{name}" block {k}: shape {src.shape} in checkpoint, '
                                      f'{dst.shape} in the model')
        for src, dst in zip(stored, targets):
            np.copyto(dst, src)
    by_name = {entry['name']: entry for entry in checkpoint.descriptor['optimizers']}
    for name, state in optimizers.items():
        if name not in checkpoint.moments:
            raise CheckpointError(f'checkpoint has no optimizer state named "{name}"')
        m, v = checkpoint.moments[name]
        if [a.shape for a in m] != [a.shape for a in state.m]:
            raise CheckpointError(f'optimizer "{name}": moment shapes do not match the model')
        entry = by_name[name]
        state.m = [a.copy() for a in m]
        state.v = [a.copy() for a in v]
        state.step = int(entry['step'])
        state.lr = float(entry['lr'])
        state.beta1 = float(entry['beta1'])
        state.beta2 = float(entry['beta2'])
        state.eps = float(entry['eps'])
