"""ToA measurement model and the selection / centering algebra.

Conventions
-----------
* Distances are in meters, times in nanoseconds; ``c`` is in m/ns.
* Anchor index subsets are 0-based, strictly increasing tuples of ints.
  Two subsets are equal iff the tuples are equal.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError

SPEED_OF_LIGHT = 0.299792458  # m/ns


@dataclass(frozen=True)
class NetworkGeometry:
    anchors: np.ndarray  # (M, dim) meters
    c: float = SPEED_OF_LIGHT

    def __post_init__(self):
        anchors = np.array(self.anchors, dtype=float)
        if anchors.ndim != 2 or anchors.shape[1] not in (2, 3):
            raise InvalidInputError(f"anchors must have shape (M, 2|3), got {anchors.shape}")
        if anchors.shape[0] < 2:
            raise InvalidInputError("need at least two anchors")
        if not np.all(np.isfinite(anchors)):
            raise InvalidInputError("anchor coordinates must be finite")
        if not (self.c > 0 and np.isfinite(self.c)):
            raise InvalidInputError(f"propagation speed must be positive, got {self.c}")
        anchors.setflags(write=False)
        object.__setattr__(self, "anchors", anchors)

    @property
    def m(self):
        return self.anchors.shape[0]

    @property
    def dim(self):
        return self.anchors.shape[1]


@dataclass
class AgentTruth:
    position: np.ndarray
    tx_time: float
    los_set: tuple
    nlos_errors: np.ndarray  # length M, zero on los_set

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.nlos_errors = np.asarray(self.nlos_errors, dtype=float)
        self.los_set = tuple(int(i) for i in self.los_set)
        if not self.los_set:
            raise InvalidInputError("los_set must be nonempty")
        on_los = np.zeros(self.nlos_errors.shape[0], dtype=bool)
        on_los[list(self.los_set)] = True
        if np.any(self.nlos_errors[on_los] != 0) or np.any(self.nlos_errors[~on_los] <= 0):
            raise InvalidInputError("nlos_errors must be zero exactly on los_set and positive elsewhere")

    @property
    def nlos_set(self):
        los = set(self.los_set)
        return tuple(i for i in range(self.nlos_errors.shape[0]) if i not in los)


@dataclass
class ToaFrame:
    t: int
    measurements: np.ndarray  # (N, M) nanoseconds
    truth: Optional[list] = field(default=None)

    def __post_init__(self):
        self.measurements = np.atleast_2d(np.asarray(self.measurements, dtype=float))
        if not np.all(np.isfinite(self.measurements)):
            raise InvalidInputError("measurements must be finite")
        if self.truth is not None and len(self.truth) != self.measurements.shape[0]:
            raise InvalidInputError("truth must have one entry per agent")

    @property
    def n_agents(self):
        return self.measurements.shape[0]


def check_subset(s, m):
    """Validate an index subset and return it as a tuple."""
    s = tuple(int(i) for i in s)
    if not s:
        raise InvalidInputError("index subset must be nonempty")
    if s[0] < 0 or s[-1] >= m:
        raise InvalidInputError(f"index subset {s} out of range for M={m}")
    if any(b <= a for a, b in zip(s, s[1:])):
        raise InvalidInputError(f"index subset {s} is not strictly increasing")
    return s


def selection_matrix(s, m):
    """Row-extraction matrix: ``selection_matrix(s, m) @ x == x[list(s)]``."""
    s = check_subset(s, m)
    f = np.zeros((len(s), m))
    f[np.arange(len(s)), s] = 1.0
    return f


def centering_matrix(k):
    """``I - ones((k, k)) / k``."""
    if k < 1:
        raise InvalidInputError(f"centering_matrix needs k >= 1, got {k}")
    return np.eye(k) - np.full((k, k), 1.0 / k)


def reduced_row_matrix(s, m):
    """``centering_matrix(|s|) @ selection_matrix(s, m)``; rows sum to zero."""
    s = check_subset(s, m)
    a = np.zeros((len(s), m))
    a[:, s] = centering_matrix(len(s))
    return a


def distance_vector(p, geom):
    """Anchor distances from ``p`` divided by the propagation speed (ns)."""
    p = np.asarray(p, dtype=float)
    if p.shape != (geom.dim,):
        raise InvalidInputError(f"position must have shape ({geom.dim},), got {p.shape}")
    return np.sqrt(((geom.anchors - p) ** 2).sum(axis=1)) / geom.c


def generate_frame(geom, agents, offsets, sigma, rng, t=1):
    """Draw one frame of ToA measurements for ``agents``.

    ``r[n, m] = d_m(p_n) + (tau_n + delta_m) + b[n, m] + eps`` with
    ``eps ~ N(0, sigma^2)``. A standard normal vector is drawn per agent even
    when ``sigma == 0`` so the rng stream does not depend on sigma.
    """
    offsets = np.asarray(offsets, dtype=float)
    if offsets.shape != (geom.m,):
        raise InvalidInputError(f"offsets must have length {geom.m}, got shape {offsets.shape}")
    if sigma < 0:
        raise InvalidInputError(f"sigma must be nonnegative, got {sigma}")
    rows = []
    for agent in agents:
        if agent.nlos_errors.shape != (geom.m,):
            raise InvalidInputError("nlos_errors length must equal the anchor count")
        noise = rng.standard_normal(geom.m)
        clock = agent.tx_time + offsets
        rows.append(distance_vector(agent.position, geom) + clock + agent.nlos_errors + sigma * noise)
    return ToaFrame(t=t, measurements=np.array(rows).reshape(len(rows), geom.m), truth=list(agents))


def subset_union(subsets: Sequence[tuple]):
    return tuple(sorted(set().union(*subsets))) if subsets else ()
