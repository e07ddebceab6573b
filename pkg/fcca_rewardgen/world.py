""" Deterministic 2D kinematic multi-agent world with scripted obstacles

Agents are omnidirectional discs commanded by (speed, absolute heading) pairs
and integrated with explicit Euler steps. Obstacles follow one of three
scripts: static, constant velocity with wall bounce, or a waypoint loop.
Every function here is pure: states are immutable values and `step` returns
a new one.
"""

import math
import typing
import dataclasses
from dataclasses import dataclass, field

import numpy as np

import fcca_rewardgen.logging as logging
from fcca_rewardgen.exception import ConfigurationError, InputError
from fcca_rewardgen.formation import FormationSpec, equilateral_triangle
from fcca_rewardgen.rewarddsl import EvalContext, NO_OBSTACLE_DISTANCE

MOTION_KINDS = ('static', 'bounce', 'waypoints')

def _frozen(array, dtype=np.float64):
    array = np.array(array, dtype=dtype)
    array.setflags(write=False)
    return array

def derive_seed(*keys) -> int:
    """ A 63-bit seed for the stream identified by `keys` (e.g. master seed, batch, episode) """
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))

def wrap_angle(angle: float) -> float:
    """ Wrap `angle` into (-pi, pi] """
    return -((math.pi - angle) % (2.0 * math.pi)) + math.pi

@dataclass(frozen=True)
class ObstacleScript:
    initial_position: tuple
    motion: str = 'static'
    # constant-velocity with wall bounce:
    velocity: tuple = (0.0, 0.0)
    # waypoint loop:
    waypoints: tuple = ()
    speed: float = 0.0

    def __post_init__(self):
        if self.motion not in MOTION_KINDS:
            raise ConfigurationError(f'unknown obstacle motion "{self.motion}", expected one of {MOTION_KINDS}')
        object.__setattr__(self, 'initial_position', tuple(float(v) for v in self.initial_position))
        object.__setattr__(self, 'velocity', tuple(float(v) for v in self.velocity))
        object.__setattr__(self, 'waypoints', tuple(tuple(float(v) for v in w) for w in self.waypoints))
        object.__setattr__(self, 'speed', float(self.speed))
        if self.motion == 'waypoints' and len(self.waypoints) < 1:
            raise ConfigurationError('a waypoint-loop obstacle needs at least one waypoint')

    def scripted_speed(self):
        if self.motion == 'bounce':
            return math.hypot(*self.velocity)
        elif self.motion == 'waypoints':
            return self.speed
        return 0.0

    def to_config(self):
        entry = {'kind': self.motion, 'position': list(self.initial_position)}
        if self.motion == 'bounce':
            entry['velocity'] = list(self.velocity)
        elif self.motion == 'waypoints':
            entry['waypoints'] = [list(w) for w in self.waypoints]
            entry['speed'] = self.speed
        return entry

    @staticmethod
    def from_config(entry: dict):
        known = {'kind', 'position', 'velocity', 'waypoints', 'speed'}
        unknown = set(entry) - known
        if unknown:
            raise ConfigurationError(f'unknown obstacle key(s) {sorted(unknown)}')
        if 'position' not in entry:
            raise ConfigurationError('obstacle entry is missing "position"')
        return ObstacleScript(initial_position=entry['position'],
                              motion=entry.get('kind', 'static'),
                              velocity=entry.get('velocity', (0.0, 0.0)),
                              waypoints=entry.get('waypoints', ()),
                              speed=entry.get('speed', 0.0))

def _inside(point, size):
    return 0.0 <= point[0] <= size[0] and 0.0 <= point[1] <= size[1]

@dataclass(frozen=True, eq=False)
class WorldConfig:
    world_size: tuple = (20.0, 20.0)
    num_agents: int = 3
    agent_radius: float = 0.175
    obstacle_radius: float = 0.175
    max_speed_agent: float = 1.25
    max_speed_obstacle: float = 1.25
    dt: float = 0.1
    goal: tuple = (10.0, 17.0)
    start_positions: tuple = ((9.0, 3.0), (10.0, 3.0), (11.0, 3.0))
    obstacle_scripts: tuple = ()
    sensing_radius: float = 5.0
    max_steps: int = 300
    goal_tolerance: float = 0.5
    hazard_margin: float = 0.2
    obstacle_jitter: float = 0.0
    formation: FormationSpec = field(default_factory=equilateral_triangle)
    preset: str = 'custom'

    def __post_init__(self):
        object.__setattr__(self, 'world_size', tuple(float(v) for v in self.world_size))
        object.__setattr__(self, 'goal', tuple(float(v) for v in self.goal))
        object.__setattr__(self, 'start_positions',
                           tuple(tuple(float(v) for v in p) for p in self.start_positions))
        object.__setattr__(self, 'obstacle_scripts', tuple(self.obstacle_scripts))
        self._validate()

    def _validate(self):
        if self.dt <= 0:
            raise ConfigurationError(f'dt must be positive, got {self.dt}')
        if self.max_speed_agent <= 0 or self.max_speed_obstacle <= 0:
            raise ConfigurationError('maximum speeds must be positive')
        if self.agent_radius <= 0 or self.obstacle_radius <= 0:
            raise ConfigurationError('radii must be positive')
        if self.max_steps <= 0:
            raise ConfigurationError(f'max_steps must be positive, got {self.max_steps}')
        if self.world_size[0] <= 0 or self.world_size[1] <= 0:
            raise ConfigurationError(f'invalid world size {self.world_size}')
        if self.goal_tolerance <= 0 or self.sensing_radius <= 0:
            raise ConfigurationError('goal_tolerance and sensing_radius must be positive')
        if self.hazard_margin < 0 or self.obstacle_jitter < 0:
            raise ConfigurationError('hazard_margin and obstacle_jitter must not be negative')
        if len(self.start_positions) != self.num_agents:
            raise ConfigurationError(
                f'{self.num_agents} agents configured but {len(self.start_positions)} start positions given')
        if self.formation.size != self.num_agents:
            raise ConfigurationError(
                f'the formation has {self.formation.size} positions for {self.num_agents} agents')
        for p in self.start_positions:
            if not _inside(p, self.world_size):
                raise ConfigurationError(f'start position {p} is outside the {self.world_size} world')
        if not _inside(self.goal, self.world_size):
            raise ConfigurationError(f'goal {self.goal} is outside the world')
        for script in self.obstacle_scripts:
            if not _inside(script.initial_position, self.world_size):
                raise ConfigurationError(f'obstacle position {script.initial_position} is outside the world')
            for w in script.waypoints:
                if not _inside(w, self.world_size):
                    raise ConfigurationError(f'waypoint {w} is outside the world')
            if script.scripted_speed() > self.max_speed_obstacle + 1e-12:
                raise ConfigurationError(
                    f'obstacle speed {script.scripted_speed()} exceeds {self.max_speed_obstacle}')

    @property
    def num_obstacles(self):
        return len(self.obstacle_scripts)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

@dataclass(frozen=True, eq=False)
class AgentObservation:
    g_x: float
    g_y: float
    v: float
    theta: float
    f: float

    def as_vector(self):
        return np.array([self.g_x, self.g_y, self.v, self.theta, self.f])

@dataclass(frozen=True, eq=False)
class ObstacleObservation:
    p_ox: float
    p_oy: float
    v_ox: float
    v_oy: float

    def as_vector(self):
        return np.array([self.p_ox, self.p_oy, self.v_ox, self.v_oy])

@dataclass(frozen=True, eq=False)
class StepOutcome:
    collisions: tuple
    hazards: tuple
    min_obstacle_distances: tuple
    accelerations: tuple
    collision: bool = False
    goal_reached: bool = False
    timeout: bool = False
    ignored_actions: bool = False

    @property
    def done(self):
        return self.collision or self.goal_reached or self.timeout

    @property
    def status(self):
        if self.collision:
            return 'collision'
        elif self.goal_reached:
            return 'goal'
        elif self.timeout:
            return 'timeout'
        return 'running'

@dataclass(frozen=True, eq=False)
class EpisodeState:
    config: WorldConfig
    t: int
    agent_positions: np.ndarray
    agent_velocities: np.ndarray
    agent_headings: np.ndarray
    obstacle_positions: np.ndarray
    obstacle_previous: np.ndarray
    obstacle_velocities: np.ndarray
    waypoint_index: np.ndarray
    seed: int
    agent_done: np.ndarray
    done: bool = False

    @property
    def num_agents(self):
        return self.agent_positions.shape[0]

    def centroid(self):
        return self.agent_positions.mean(axis=0)

def _agent_obstacle_distances(agent_positions, obstacle_positions):
    if obstacle_positions.shape[0] == 0:
        return np.full((agent_positions.shape[0], 0), np.inf)
    diff = agent_positions[:, None, :] - obstacle_positions[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))

def _agent_agent_distances(agent_positions):
    diff = agent_positions[:, None, :] - agent_positions[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    np.fill_diagonal(dist, np.inf)
    return dist

def _overlapping_bodies(config, agent_positions, obstacle_positions):
    agent_dist = _agent_agent_distances(agent_positions)
    if np.any(agent_dist < 2.0 * config.agent_radius):
        return True
    obstacle_dist = _agent_obstacle_distances(agent_positions, obstacle_positions)
    return bool(np.any(obstacle_dist < config.agent_radius + config.obstacle_radius))

def _initial_obstacles(config, rng):
    scripts = config.obstacle_scripts
    positions = np.array([s.initial_position for s in scripts], dtype=np.float64).reshape(-1, 2)
    if config.obstacle_jitter > 0 and len(scripts) > 0:
        offsets = rng.uniform(-config.obstacle_jitter, config.obstacle_jitter, size=positions.shape)
        margin = config.obstacle_radius
        positions = np.clip(positions + offsets,
                            [margin, margin],
                            [config.world_size[0] - margin, config.world_size[1] - margin])
    velocities = np.zeros_like(positions)
    for i, script in enumerate(scripts):
        if script.motion == 'bounce':
            velocities[i] = script.velocity
    return positions, velocities

_MAX_PLACEMENT_ATTEMPTS = 100

def reset(config: WorldConfig, seed: int) -> EpisodeState:
    """ Start an episode: agents at their start positions at rest, obstacles at their scripted starts

    Identical (config, seed) pairs produce identical states.
    """
    rng = np.random.default_rng(seed)
    agents = np.array(config.start_positions, dtype=np.float64).reshape(-1, 2)
    for _ in range(_MAX_PLACEMENT_ATTEMPTS):
        obstacles, velocities = _initial_obstacles(config, rng)
        if not _overlapping_bodies(config, agents, obstacles):
            break
        if config.obstacle_jitter == 0:
            break
    if _overlapping_bodies(config, agents, obstacles):
        raise ConfigurationError('bodies overlap at the start of the episode', location=f'seed {seed}')

    n = config.num_agents
    m = config.num_obstacles
    return EpisodeState(config=config,
                        t=0,
                        agent_positions=_frozen(agents),
                        agent_velocities=_frozen(np.zeros((n, 2))),
                        agent_headings=_frozen(np.zeros(n)),
                        obstacle_positions=_frozen(obstacles),
                        obstacle_previous=_frozen(obstacles),
                        obstacle_velocities=_frozen(velocities),
                        waypoint_index=_frozen(np.zeros(m), dtype=np.int64),
                        seed=int(seed),
                        agent_done=_frozen(np.zeros(n), dtype=bool))

def _advance_bounce(position, velocity, config, dt):
    position = position + velocity * dt
    velocity = velocity.copy()
    r = config.obstacle_radius
    for axis in range(2):
        low = r
        high = config.world_size[axis] - r
        if position[axis] < low:
            position[axis] = 2.0 * low - position[axis]
            velocity[axis] = -velocity[axis]
        elif position[axis] > high:
            position[axis] = 2.0 * high - position[axis]
            velocity[axis] = -velocity[axis]
    return position, velocity

def _advance_waypoints(position, index, script, dt):
    target = np.array(script.waypoints[index])
    offset = target - position
    distance = math.hypot(offset[0], offset[1])
    travel = script.speed * dt
    if distance <= travel:
        return target, np.zeros(2) if distance == 0 else offset / dt, (index + 1) % len(script.waypoints)
    direction = offset / distance
    return position + direction * travel, direction * script.speed, index

def _advance_obstacles(state: EpisodeState):
    config = state.config
    positions = np.array(state.obstacle_positions)
    velocities = np.array(state.obstacle_velocities)
    indices = np.array(state.waypoint_index)
    for i, script in enumerate(config.obstacle_scripts):
        if script.motion == 'bounce':
            positions[i], velocities[i] = _advance_bounce(positions[i], velocities[i], config, config.dt)
        elif script.motion == 'waypoints':
            positions[i], velocities[i], indices[i] = _advance_waypoints(
                positions[i], int(indices[i]), script, config.dt)
    return positions, velocities, indices

def _check_actions(actions, n):
    if len(actions) != n:
        raise InputError(f'expected {n} actions, got {len(actions)}')
    result = np.array(actions, dtype=np.float64).reshape(n, 2)
    if not np.all(np.isfinite(result)):
        raise InputError(f'non-finite action in {result.tolist()}')
    return result

def termination_check(state: EpisodeState, config: WorldConfig = None) -> StepOutcome:
    """ Collision, hazard, goal and timeout flags for `state`

    Collisions take priority over reaching the goal, which takes priority over
    the timeout, so at most one of them ends the episode.
    """
    config = config or state.config
    radius_sum = config.agent_radius + config.obstacle_radius
    obstacle_dist = _agent_obstacle_distances(state.agent_positions, state.obstacle_positions)
    if obstacle_dist.shape[1] > 0:
        nearest = obstacle_dist.min(axis=1)
    else:
        nearest = np.full(state.num_agents, NO_OBSTACLE_DISTANCE)
    agent_dist = _agent_agent_distances(state.agent_positions)
    collisions = (nearest < radius_sum) | np.any(agent_dist < 2.0 * config.agent_radius, axis=1)
    hazards = nearest < radius_sum + config.hazard_margin
    collision = bool(np.any(collisions))
    centroid = state.centroid()
    goal_distance = math.hypot(centroid[0] - config.goal[0], centroid[1] - config.goal[1])
    goal_reached = (not collision) and goal_distance <= config.goal_tolerance
    timeout = (not collision) and (not goal_reached) and state.t >= config.max_steps
    return StepOutcome(collisions=tuple(bool(c) for c in collisions),
                       hazards=tuple(bool(h) for h in hazards),
                       min_obstacle_distances=tuple(float(d) for d in nearest),
                       accelerations=tuple(0.0 for _ in range(state.num_agents)),
                       collision=collision,
                       goal_reached=goal_reached,
                       timeout=timeout)

def step(state: EpisodeState, actions) -> typing.Tuple[EpisodeState, StepOutcome]:
    """ Apply one (speed, heading) command per agent and advance the world by dt """
    config = state.config
    n = state.num_agents
    if state.done:
        logging.warn('actions sent to a finished episode are ignored', location=f't={state.t}')
        flags = termination_check(state, config)
        return state, dataclasses.replace(flags, ignored_actions=True)
    commands = _check_actions(actions, n)

    speeds = np.clip(commands[:, 0], 0.0, config.max_speed_agent)
    headings = np.array([wrap_angle(h) for h in commands[:, 1]])
    velocities = np.stack([speeds * np.cos(headings), speeds * np.sin(headings)], axis=1)
    positions = state.agent_positions + velocities * config.dt
    positions = np.clip(positions, [0.0, 0.0], list(config.world_size))
    delta = velocities - state.agent_velocities
    accelerations = np.sqrt(np.sum(delta * delta, axis=1)) / config.dt

    obstacles, obstacle_velocities, indices = _advance_obstacles(state)

    moved = EpisodeState(config=config,
                         t=state.t + 1,
                         agent_positions=_frozen(positions),
                         agent_velocities=_frozen(velocities),
                         agent_headings=_frozen(headings),
                         obstacle_positions=_frozen(obstacles),
                         obstacle_previous=state.obstacle_positions,
                         obstacle_velocities=_frozen(obstacle_velocities),
                         waypoint_index=_frozen(indices, dtype=np.int64),
                         seed=state.seed,
                         agent_done=state.agent_done)
    flags = termination_check(moved, config)
    outcome = dataclasses.replace(flags, accelerations=tuple(float(a) for a in accelerations))
    if outcome.done:
        moved = dataclasses.replace(moved, done=True, agent_done=_frozen(np.ones(n), dtype=bool))
    return moved, outcome

def _to_local(vector, heading):
    c = math.cos(heading)
    s = math.sin(heading)
    return (c * vector[0] + s * vector[1], -s * vector[0] + c * vector[1])

def observe(state: EpisodeState, agent_index: int):
    """ The local view of agent `agent_index`: own observation and visible obstacles

    Obstacles are ordered by ascending distance, ties broken by index.
    """
    config = state.config
    if not 0 <= agent_index < state.num_agents:
        raise InputError(f'agent index {agent_index} out of range 0..{state.num_agents - 1}')
    position = state.agent_positions[agent_index]
    heading = float(state.agent_headings[agent_index])
    velocity = state.agent_velocities[agent_index]
    goal_offset = np.array(config.goal) - position
    g_x, g_y = _to_local(goal_offset, heading)
    agent_obs = AgentObservation(g_x=g_x,
                                 g_y=g_y,
                                 v=math.hypot(velocity[0], velocity[1]),
                                 theta=heading,
                                 f=config.formation.error_of(state.agent_positions, strict=False))

    visible = []
    for k in range(state.obstacle_positions.shape[0]):
        offset = state.obstacle_positions[k] - position
        distance = math.hypot(offset[0], offset[1])
        if distance <= config.sensing_radius:
            visible.append((distance, k, offset))
    visible.sort(key=lambda item: (item[0], item[1]))
    obstacles = []
    for (_, k, offset) in visible:
        p_ox, p_oy = _to_local(offset, heading)
        moved = (state.obstacle_positions[k] - state.obstacle_previous[k]) / config.dt
        obstacles.append(ObstacleObservation(p_ox=p_ox, p_oy=p_oy,
                                             v_ox=float(moved[0]), v_oy=float(moved[1])))
    return agent_obs, obstacles

def reward_context(state: EpisodeState, outcome: StepOutcome, agent_index: int) -> EvalContext:
    """ The reward DSL context of agent `agent_index` after the step that produced `state` """
    config = state.config
    agent_obs, obstacles = observe(state, agent_index)
    position = state.agent_positions[agent_index]
    velocity = state.agent_velocities[agent_index]

    nearest = NO_OBSTACLE_DISTANCE
    closing_speed = 0.0
    best = None
    for k in range(state.obstacle_positions.shape[0]):
        offset = state.obstacle_positions[k] - position
        distance = math.hypot(offset[0], offset[1])
        if distance <= config.sensing_radius and (best is None or distance < nearest):
            best = k
            nearest = distance
    if best is not None and nearest > 0:
        offset = state.obstacle_positions[best] - position
        obstacle_velocity = (state.obstacle_positions[best] - state.obstacle_previous[best]) / config.dt
        relative = obstacle_velocity - velocity
        closing_speed = -float(offset[0] * relative[0] + offset[1] * relative[1]) / nearest

    goal_offset = np.array(config.goal) - position
    return EvalContext(goal_dist=math.hypot(goal_offset[0], goal_offset[1]),
                       goal_dx=agent_obs.g_x,
                       goal_dy=agent_obs.g_y,
                       speed=agent_obs.v,
                       heading=agent_obs.theta,
                       formation_error=agent_obs.f,
                       min_obstacle_dist=float(nearest),
                       nearest_obstacle_closing_speed=closing_speed,
                       accel=float(outcome.accelerations[agent_index]),
                       time_frac=state.t / config.max_steps,
                       reached_goal=1.0 if outcome.goal_reached else 0.0,
                       collision=1.0 if outcome.collisions[agent_index] else 0.0,
                       num_visible_obstacles=float(len(obstacles)))

def trace_header(config: WorldConfig):
    return {'kind': 'header',
            'dt': config.dt,
            'max_steps': config.max_steps,
            'agent_radius': config.agent_radius,
            'obstacle_radius': config.obstacle_radius,
            'goal': list(config.goal),
            'formation': config.formation.to_config()}

def trace_record(state: EpisodeState, outcome: StepOutcome):
    """ One line of an episode trace: the state after a step and its outcome flags """
    agents = [[float(p[0]), float(p[1]), float(v[0]), float(v[1]), float(h)]
              for p, v, h in zip(state.agent_positions, state.agent_velocities, state.agent_headings)]
    return {'kind': 'step',
            't': state.t,
            'agents': agents,
            'obstacles': [[float(p[0]), float(p[1])] for p in state.obstacle_positions],
            'collision': outcome.collision,
            'goal_reached': outcome.goal_reached,
            'timeout': outcome.timeout}

_START_LINE = ((9.0, 3.0), (10.0, 3.0), (11.0, 3.0))

def _simple_obstacles():
    return (ObstacleScript((8.0, 8.5), 'bounce', velocity=(0.6, 0.0)),
            ObstacleScript((12.0, 10.0), 'waypoints', waypoints=((12.0, 10.0), (8.0, 11.0)), speed=0.5),
            ObstacleScript((10.5, 12.0), 'bounce', velocity=(-0.5, 0.2)))

def _complex_obstacles():
    return (ObstacleScript((9.0, 9.0), 'static'),
            ObstacleScript((11.2, 10.5), 'static'),
            ObstacleScript((10.0, 12.2), 'static'),
            ObstacleScript((8.0, 8.0), 'bounce', velocity=(0.8, 0.3)),
            ObstacleScript((12.0, 8.0), 'bounce', velocity=(-0.7, 0.4)),
            ObstacleScript((8.5, 11.5), 'waypoints', waypoints=((8.5, 11.5), (11.5, 11.5)), speed=0.8),
            ObstacleScript((12.0, 12.0), 'waypoints', waypoints=((12.0, 12.0), (8.0, 9.5)), speed=1.0))

PRESETS = ('empty', 'simple', 'complex')

def preset(name: str) -> WorldConfig:
    """ The named environment: `empty`, `simple` (3 sparse dynamic obstacles) or
    `complex` (7 dense obstacles, static and dynamic), all in a 20m x 20m world
    with obstacles starting in the central 5m x 5m area.
    """
    if name == 'empty':
        return WorldConfig(start_positions=_START_LINE, preset='empty')
    elif name == 'simple':
        return WorldConfig(start_positions=_START_LINE, obstacle_scripts=_simple_obstacles(),
                           obstacle_jitter=0.5, preset='simple')
    elif name == 'complex':
        return WorldConfig(start_positions=_START_LINE, obstacle_scripts=_complex_obstacles(),
                           obstacle_jitter=0.5, preset='complex')
    raise ConfigurationError(f'unknown environment preset "{name}", expected one of {PRESETS}')
