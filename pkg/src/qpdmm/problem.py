"""Local objectives: average consensus and distributed least squares.

Both problems expose the same surface to the optimizer. ``x_update`` solves
every node's local step at once given the signed sums
``sum_j B_{i|j} zhat_{i|j}``; arrays may carry leading batch axes.
"""

from __future__ import annotations

import json

import numpy as np
from scipy import linalg


class ProblemError(ValueError):
    pass


class ConsensusProblem:
    """``f_i(x) = 0.5 * ||x - s_i||^2``."""

    kind = "consensus"

    def __init__(self, s):
        s = np.array(s, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.ndim != 2:
            raise ProblemError("s must have shape (n,) or (n, u)")
        s.setflags(write=False)
        self.s = s

    @property
    def n(self):
        return self.s.shape[0]

    @property
    def u(self):
        return self.s.shape[1]

    @classmethod
    def random(cls, n, gen, u=1):
        return cls(gen.standard_normal((n, u)))

    def local_x_update(self, i, z_sum, c, d_i):
        return local_x_update_consensus(self.s[i], z_sum, c, d_i)

    def x_update(self, z_sum, c, degrees, s=None):
        s = self.s if s is None else s
        return (s - z_sum) / (1.0 + c * np.asarray(degrees, dtype=float))[:, None]

    def subgradient(self, i, x):
        return np.asarray(x, dtype=float) - self.s[i]

    def subgradients(self, x, s=None):
        return x - (self.s if s is None else s)

    def global_optimum(self):
        mean = self.s.mean(axis=0)
        return np.tile(mean, (self.n, 1))

    def to_dict(self):
        return {"type": self.kind, "u": self.u, "s": self.s.tolist()}


class LeastSquaresProblem:
    """``f_i(x) = 0.5 * ||y_i - Q_i x||^2`` with private ``(Q_i, y_i)``."""

    kind = "least-squares"

    def __init__(self, Q, y):
        Q = [np.array(q, dtype=float) for q in Q]
        y = [np.array(v, dtype=float).reshape(-1) for v in y]
        if len(Q) != len(y) or not Q:
            raise ProblemError("need one (Q_i, y_i) pair per node")
        u = Q[0].shape[1]
        for i, (q, v) in enumerate(zip(Q, y)):
            if q.ndim != 2 or q.shape[1] != u or q.shape[0] == 0:
                raise ProblemError(f"Q_{i} has shape {q.shape}, expected (p_i>0, {u})")
            if q.shape[0] != v.shape[0]:
                raise ProblemError(f"y_{i} has length {v.shape[0]}, expected {q.shape[0]}")
            q.setflags(write=False)
            v.setflags(write=False)
        self.Q = tuple(Q)
        self.y = tuple(y)
        self._gram = np.stack([q.T @ q for q in Q])
        self._qty = np.stack([q.T @ v for q, v in zip(Q, y)])
        self._factors = {}

    @property
    def n(self):
        return len(self.Q)

    @property
    def u(self):
        return self.Q[0].shape[1]

    @classmethod
    def random(cls, n, gen, u=3, p=5):
        Q = [gen.standard_normal((p, u)) for _ in range(n)]
        y = [gen.standard_normal(p) for _ in range(n)]
        return cls(Q, y)

    def local_x_update(self, i, z_sum, c, d_i):
        return local_x_update_ls(self.Q[i], self.y[i], z_sum, c, d_i)

    def _systems(self, c, degrees):
        key = (float(c), tuple(int(d) for d in degrees))
        if key not in self._factors:
            eye = np.eye(self.u)
            self._factors[key] = [
                linalg.cho_factor(g + c * d * eye) for g, d in zip(self._gram, key[1])
            ]
        return self._factors[key]

    def x_update(self, z_sum, c, degrees):
        factors = self._systems(c, degrees)
        rhs = self._qty - z_sum
        out = np.empty_like(rhs)
        # rhs is (..., n, u); solve node by node, batch axes ride along as extra columns
        for i, cf in enumerate(factors):
            b = rhs[..., i, :]
            out[..., i, :] = linalg.cho_solve(cf, b.reshape(-1, self.u).T).T.reshape(b.shape)
        return out

    def subgradient(self, i, x):
        q = self.Q[i]
        return q.T @ (q @ np.asarray(x, dtype=float) - self.y[i])

    def subgradients(self, x):
        return np.einsum("nab,...nb->...na", self._gram, x) - self._qty

    def global_optimum(self):
        Q = np.vstack(self.Q)
        y = np.concatenate(self.y)
        if np.linalg.matrix_rank(Q) < self.u:
            raise ProblemError("stacked observation matrix is rank deficient")
        x = linalg.solve(Q.T @ Q, Q.T @ y, assume_a="pos")
        return np.tile(x, (self.n, 1))

    def to_dict(self):
        return {
            "type": self.kind,
            "u": self.u,
            "Q": [q.tolist() for q in self.Q],
            "y": [v.tolist() for v in self.y],
        }


def local_x_update_consensus(s_i, z_sum, c, d_i):
    """Minimizer of ``0.5||x - s_i||^2 + z_sum.x + (c d_i / 2)||x||^2``."""
    return (np.asarray(s_i, dtype=float) - z_sum) / (1.0 + c * d_i)


def local_x_update_ls(Q_i, y_i, z_sum, c, d_i):
    """Solve ``(Q_i^T Q_i + c d_i I) x = Q_i^T y_i - z_sum``."""
    Q_i = np.asarray(Q_i, dtype=float)
    lhs = Q_i.T @ Q_i + c * d_i * np.eye(Q_i.shape[1])
    rhs = Q_i.T @ np.asarray(y_i, dtype=float) - np.asarray(z_sum, dtype=float)
    if not (np.all(np.isfinite(lhs)) and np.all(np.isfinite(rhs))):
        raise ProblemError("non-finite input to least-squares update")
    return linalg.solve(lhs, rhs, assume_a="pos")


def subgradient(problem, i, x):
    return problem.subgradient(i, x)


def global_optimum(problem, graph=None):
    """Centralized optimum, identical at every node."""
    if graph is not None and graph.n != problem.n:
        raise ProblemError(f"problem has {problem.n} nodes, graph has {graph.n}")
    return problem.global_optimum()


def problem_from_dict(doc):
    if doc["type"] == ConsensusProblem.kind:
        return ConsensusProblem(doc["s"])
    if doc["type"] == LeastSquaresProblem.kind:
        return LeastSquaresProblem(doc["Q"], doc["y"])
    raise ProblemError(f"unknown problem type {doc['type']!r}")


def problem_to_json(problem):
    return json.dumps(problem.to_dict())
