"""Random geometric networks and their incidence structure.

Nodes are 0-based inside the package. The JSON form uses 1-based ids.

Each undirected edge ``e_l = (i, j)`` with ``i < j`` carries two directed
auxiliary variables. Index ``l`` holds ``z_{i|j}`` (used by ``i``, computed
and sent by ``j``) and index ``l + m`` holds ``z_{j|i}``.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import rng as _rng

DEFAULT_MAX_RETRIES = 1000


class GraphError(ValueError):
    pass


def connectivity_radius(n):
    """Radius ``sqrt(2 ln n / n)`` giving connectivity with high probability."""
    return math.sqrt(2.0 * math.log(n) / n)


@dataclass(frozen=True, eq=False)
class Graph:
    n: int
    edges: tuple
    positions: np.ndarray | None = None
    radius: float | None = None
    neighbor_sets: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if self.n < 1:
            raise GraphError("graph needs at least one node")
        seen = set()
        nbrs = [set() for _ in range(self.n)]
        for i, j in self.edges:
            if not (0 <= i < j < self.n):
                raise GraphError(f"edge ({i}, {j}) must satisfy 0 <= i < j < n")
            if (i, j) in seen:
                raise GraphError(f"duplicate edge ({i}, {j})")
            seen.add((i, j))
            nbrs[i].add(j)
            nbrs[j].add(i)
        object.__setattr__(self, "edges", tuple((int(i), int(j)) for i, j in self.edges))
        object.__setattr__(self, "neighbor_sets", tuple(frozenset(s) for s in nbrs))
        if self.positions is not None:
            pos = np.array(self.positions, dtype=float)
            pos.setflags(write=False)
            object.__setattr__(self, "positions", pos)

    @property
    def m(self):
        return len(self.edges)

    @cached_property
    def degrees(self):
        d = np.array([len(s) for s in self.neighbor_sets], dtype=int)
        d.setflags(write=False)
        return d

    @classmethod
    def from_positions(cls, positions, radius=None):
        """Connect every pair of points at distance ``<= radius``."""
        pos = np.asarray(positions, dtype=float)
        n = len(pos)
        if radius is None:
            radius = connectivity_radius(n)
        diff = pos[:, None, :] - pos[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=-1))
        ii, jj = np.nonzero(np.triu(dist <= radius, k=1))
        return cls(n=n, edges=tuple(zip(ii.tolist(), jj.tolist())), positions=pos, radius=float(radius))

    # -- directed-edge layout used by the optimizer --------------------------

    @cached_property
    def directed(self):
        """``(owner, sender, sign, rev)`` arrays over the ``2m`` directed variables.

        ``owner[d]`` uses ``z_d`` in its x-update, ``sender[d]`` computes and
        transmits it, ``sign[d]`` is ``B_{owner|sender}`` and ``rev[d]`` is the
        index of the opposite variable on the same edge.
        """
        m = self.m
        e = np.array(self.edges, dtype=int).reshape(m, 2)
        owner = np.concatenate([e[:, 0], e[:, 1]])
        sender = np.concatenate([e[:, 1], e[:, 0]])
        sign = np.where(owner < sender, 1.0, -1.0)
        rev = np.concatenate([np.arange(m, 2 * m), np.arange(m)])
        for a in (owner, sender, sign, rev):
            a.setflags(write=False)
        return owner, sender, sign, rev

    @cached_property
    def signed_incidence(self):
        """Dense ``n x 2m`` matrix mapping ``z`` to ``sum_j B_{i|j} z_{i|j}``."""
        owner, _, sign, _ = self.directed
        mat = np.zeros((self.n, 2 * self.m))
        mat[owner, np.arange(2 * self.m)] = sign
        mat.setflags(write=False)
        return mat

    @cached_property
    def _index(self):
        owner, sender, _, _ = self.directed
        return {(int(a), int(b)): d for d, (a, b) in enumerate(zip(owner, sender))}

    def directed_index(self, owner, sender):
        """Index of ``z_{owner|sender}``."""
        try:
            return self._index[(owner, sender)]
        except KeyError:
            raise GraphError(f"nodes {owner} and {sender} are not adjacent") from None

    # -- serialization ------------------------------------------------------

    def to_dict(self):
        return {
            "n": self.n,
            "radius": self.radius,
            "positions": None if self.positions is None else self.positions.tolist(),
            "edges": [[i + 1, j + 1] for i, j in self.edges],
        }

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc):
        return cls(
            n=int(doc["n"]),
            edges=tuple((i - 1, j - 1) for i, j in doc["edges"]),
            positions=doc.get("positions"),
            radius=doc.get("radius"),
        )


def incidence_sign(g, i, j):
    """``B_{i|j}``: +1 when ``i < j``, -1 otherwise. Raises for non-adjacent pairs."""
    if j not in g.neighbor_sets[i]:
        raise GraphError(f"nodes {i} and {j} are not adjacent")
    return 1 if i < j else -1


def is_connected(g):
    """Breadth-first search from node 0."""
    if g.n == 0:
        return False
    seen = {0}
    queue = deque([0])
    while queue:
        a = queue.popleft()
        for b in g.neighbor_sets[a]:
            if b not in seen:
                seen.add(b)
                queue.append(b)
    return len(seen) == g.n


def generate_geometric_graph(n, seed, max_retries=DEFAULT_MAX_RETRIES):
    """Draw a connected random geometric graph on the unit square.

    Points are i.i.d. uniform and joined when their distance is at most
    ``sqrt(2 ln n / n)``. A disconnected draw is discarded and positions are
    redrawn from the next substream, so the result depends only on
    ``(n, seed)``.
    """
    if n < 2:
        raise GraphError(f"n must be >= 2, got {n}")
    radius = connectivity_radius(n)
    for attempt in range(max_retries):
        gen = _rng.substream(seed, _rng.GRAPH, attempt)
        g = Graph.from_positions(gen.uniform(0.0, 1.0, size=(n, 2)), radius)
        if is_connected(g):
            return g
    raise GraphError(f"no connected geometric graph for n={n}, seed={seed} after {max_retries} draws")
