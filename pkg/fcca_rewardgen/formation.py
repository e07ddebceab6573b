""" Similarity-invariant formation shape descriptors

The shape of a group of agents is described by the symmetrically normalized
Laplacian of a graph whose edge weights are squared inter-agent distances.
Because the weights scale uniformly under a uniform scaling of the positions,
the normalized Laplacian is invariant to translation, rotation, reflection
and uniform scale, and the squared Frobenius distance between two of them is
a usable formation error.
"""

import itertools
import typing
from dataclasses import dataclass, field

import numpy as np

from fcca_rewardgen.exception import InputError, DegenerateFormationError

def _frozen(array):
    array = np.array(array, dtype=np.float64)
    array.setflags(write=False)
    return array

def _canonical_edge(i, j):
    return (i, j) if i < j else (j, i)

def complete_edges(n: int):
    return frozenset(itertools.combinations(range(n), 2))

@dataclass(frozen=True, eq=False)
class FormationGraph:
    positions: np.ndarray
    edges: frozenset = None

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 2:
            raise InputError(f'positions must be a list of 2D points, got shape {positions.shape}')
        n = positions.shape[0]
        if n < 2:
            raise InputError(f'a formation needs at least 2 agents, got {n}')
        if self.edges is None:
            edges = complete_edges(n)
        else:
            edges = set()
            for (i, j) in self.edges:
                if i == j:
                    raise InputError(f'self loop on node {i}')
                if not (0 <= i < n and 0 <= j < n):
                    raise InputError(f'edge ({i}, {j}) references a node outside 0..{n - 1}')
                edge = _canonical_edge(i, j)
                if edge in edges:
                    raise InputError(f'duplicate edge ({i}, {j})')
                edges.add(edge)
            edges = frozenset(edges)
        object.__setattr__(self, 'positions', _frozen(positions))
        object.__setattr__(self, 'edges', edges)

    @property
    def size(self):
        return self.positions.shape[0]

    def is_complete(self):
        n = self.size
        return len(self.edges) == n * (n - 1) // 2

@dataclass(frozen=True, eq=False)
class WeightMatrix:
    entries: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'entries', _frozen(self.entries))

    @property
    def size(self):
        return self.entries.shape[0]

@dataclass(frozen=True, eq=False)
class NormalizedLaplacian:
    entries: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'entries', _frozen(self.entries))

    @property
    def size(self):
        return self.entries.shape[0]

def edge_weights(graph: FormationGraph) -> WeightMatrix:
    """ Squared Euclidean distance on every edge of `graph`, zero elsewhere """
    positions = graph.positions
    if not np.all(np.isfinite(positions)):
        raise InputError('formation positions must be finite')
    n = graph.size
    weights = np.zeros((n, n))
    for (i, j) in graph.edges:
        diff = positions[i] - positions[j]
        w = float(diff[0] * diff[0] + diff[1] * diff[1])
        weights[i, j] = w
        weights[j, i] = w
    return WeightMatrix(weights)

def normalized_laplacian(weights: WeightMatrix) -> NormalizedLaplacian:
    """ Return I - D^(-1/2) A D^(-1/2) with A the weight matrix and D its degree matrix

    Raises DegenerateFormationError when a node has no positive-weight edge.
    """
    adjacency = weights.entries
    degree = adjacency.sum(axis=1)
    zero_rows = np.flatnonzero(degree <= 0.0)
    if zero_rows.size > 0:
        raise DegenerateFormationError(
            f'agent(s) {zero_rows.tolist()} coincide with every neighbour; '
            'the normalized Laplacian is undefined')
    inv_sqrt = 1.0 / np.sqrt(degree)
    scaled = adjacency * inv_sqrt[:, None] * inv_sqrt[None, :]
    # D^(-1/2) A D^(-1/2) is symmetric in exact arithmetic; keep it so bitwise
    scaled = 0.5 * (scaled + scaled.T)
    laplacian = np.eye(adjacency.shape[0]) - scaled
    return NormalizedLaplacian(laplacian)

def formation_error(current: NormalizedLaplacian, desired: NormalizedLaplacian) -> float:
    """ Squared Frobenius norm of the difference between two normalized Laplacians """
    if current.entries.shape != desired.entries.shape:
        raise InputError(f'Laplacian shapes differ: {current.entries.shape} vs {desired.entries.shape}')
    diff = current.entries - desired.entries
    return float(np.sum(diff * diff))

def shape_descriptor(positions, edges=None) -> NormalizedLaplacian:
    return normalized_laplacian(edge_weights(FormationGraph(positions, edges)))

@dataclass(frozen=True, eq=False)
class FormationSpec:
    """ The desired formation: target positions and their cached normalized Laplacian """
    desired_positions: np.ndarray
    edges: typing.Optional[frozenset] = None
    desired_laplacian: NormalizedLaplacian = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        graph = FormationGraph(self.desired_positions, self.edges)
        positions = graph.positions
        for i, j in itertools.combinations(range(graph.size), 2):
            if np.array_equal(positions[i], positions[j]):
                raise InputError(f'desired positions {i} and {j} coincide')
        object.__setattr__(self, 'desired_positions', positions)
        object.__setattr__(self, 'edges', graph.edges)
        object.__setattr__(self, 'desired_laplacian',
                           normalized_laplacian(edge_weights(graph)))

    @property
    def size(self):
        return self.desired_positions.shape[0]

    def error_of(self, positions, strict=True) -> float:
        """ Formation error of agents at `positions` with respect to this formation

        With `strict` off, a degenerate configuration (an agent coinciding with
        all its neighbours) is scored as if its graph had no edges at all.
        """
        try:
            current = shape_descriptor(positions, self.edges)
        except DegenerateFormationError:
            if strict:
                raise
            current = NormalizedLaplacian(np.eye(self.size))
        return formation_error(current, self.desired_laplacian)

    def centered_offsets(self):
        """ Desired positions relative to their centroid """
        return self.desired_positions - self.desired_positions.mean(axis=0)

    def to_config(self):
        return [[float(x), float(y)] for (x, y) in self.desired_positions]

    @staticmethod
    def from_config(points, edges=None):
        if not isinstance(points, (list, tuple)) or not all(
                isinstance(p, (list, tuple)) and len(p) == 2 for p in points):
            raise InputError(f'a formation must be a list of [x, y] pairs, got {points!r}')
        if edges is not None:
            edges = [tuple(e) for e in edges]
        return FormationSpec(np.array(points, dtype=np.float64), edges)

def equilateral_triangle(side=1.0):
    height = side * np.sqrt(3.0) / 2.0
    return FormationSpec(np.array([[0.0, 0.0], [side, 0.0], [side / 2.0, height]]))
