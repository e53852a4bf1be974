"""Quantized PDMM/ADMM over a simulated synchronous network.

The state of the whole network lives in arrays indexed by directed edge
(see :mod:`qpdmm.graph` for the layout), which keeps a round to a handful of
numpy operations. Rounds are synchronous: every node computes from the
values delivered in the previous round, and new messages are delivered
only after all nodes finish.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics as _metrics
from . import rng as _rng
from .quantizer import QuantizerConfig, cell_width, quantize, reproduce

INIT_Z = "init-z"
QUANTIZED_V = "quantized-v"
CSV_COLUMNS = ("t", "mse", "cum_bits_total", "cum_bits_quantized", "quant_noise_sq")


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    theta: float = 0.0
    c: float = 0.9
    max_iters: int = 500
    mse_threshold: float = 1e-10
    sigma2_z0: float = 1.0
    init_bits: int = 64
    stop_rule: str = "oracle"
    divergence_factor: float = 1e6
    average_quantized: bool = False

    def __post_init__(self):
        if not 0 <= self.theta < 1:
            raise ConfigError(f"theta must be in [0, 1), got {self.theta}")
        if not self.c > 0:
            raise ConfigError(f"c must be > 0, got {self.c}")
        if self.sigma2_z0 < 0:
            raise ConfigError(f"sigma2_z0 must be >= 0, got {self.sigma2_z0}")
        if self.max_iters < 0:
            raise ConfigError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.stop_rule not in ("oracle", "residual"):
            raise ConfigError(f"stop_rule must be 'oracle' or 'residual', got {self.stop_rule!r}")


@dataclass
class NodeState:
    """Per-node view of the network state, keyed by neighbor id."""

    x: np.ndarray
    z_out: dict
    z_hat_in: dict
    z_hat_out_prev: dict


@dataclass
class EdgeState:
    """Network state after ``t`` rounds.

    ``x`` is ``x^(t)`` per node, ``z`` the senders' unquantized ``z^(t)`` and
    ``zhat`` the shared reconstruction ``zhat^(t)`` (equal to ``z^(0)`` at t=0).
    """

    t: int
    x: np.ndarray
    z: np.ndarray
    zhat: np.ndarray

    def node_states(self, graph, prev_zhat=None):
        owner, sender, _, _ = graph.directed
        prev = self.zhat if prev_zhat is None else prev_zhat
        out = []
        for i in range(graph.n):
            out.append(NodeState(
                x=self.x[i].copy(),
                z_out={int(owner[d]): self.z[d].copy() for d in np.flatnonzero(sender == i)},
                z_hat_in={int(sender[d]): self.zhat[d].copy() for d in np.flatnonzero(owner == i)},
                z_hat_out_prev={int(owner[d]): prev[d].copy() for d in np.flatnonzero(sender == i)},
            ))
        return out


@dataclass(frozen=True)
class Message:
    t: int
    sender: int
    receiver: int
    kind: str
    payload: np.ndarray
    encrypted: bool
    bits: int


class Transcript:
    """Every message sent during a run.

    Payloads are kept as one array per round in directed-edge order;
    :meth:`messages` expands them in sending order (sender, then receiver).
    """

    def __init__(self, graph, u, l, enabled, init_bits=64, passthrough_bits=64):
        self.graph = graph
        self.u = u
        self.l = l
        self.enabled = enabled
        self.init_bits = init_bits
        self.value_bits = l if enabled else passthrough_bits
        self.z0 = None
        self.rounds = []
        self.widths = []
        owner, sender, _, _ = graph.directed
        self._order = np.lexsort((owner, sender))

    def log_init(self, z0):
        self.z0 = np.array(z0)

    def log_round(self, payload, width):
        self.rounds.append(payload)
        self.widths.append(width)

    def __len__(self):
        return (2 * self.graph.m if self.z0 is not None else 0) + 2 * self.graph.m * len(self.rounds)

    def messages(self):
        owner, sender, _, _ = self.graph.directed
        if self.z0 is not None:
            for d in self._order:
                yield Message(0, int(sender[d]), int(owner[d]), INIT_Z, self.z0[d], True,
                              self.init_bits * self.u)
        for t, payload in enumerate(self.rounds, start=1):
            for d in self._order:
                yield Message(t, int(sender[d]), int(owner[d]), QUANTIZED_V, payload[d], False,
                              self.value_bits * self.u)

    @property
    def init_bits_total(self):
        return 2 * self.graph.m * self.u * self.init_bits if self.z0 is not None else 0

    @property
    def quantized_bits_total(self):
        return 2 * self.graph.m * self.u * self.value_bits * len(self.rounds)

    def reproduced(self, t):
        """Reproduced differences ``vhat^(t)`` for all directed edges."""
        payload = self.rounds[t - 1]
        if not self.enabled:
            return payload
        return reproduce(payload, self.widths[t - 1], self.l)

    def replay(self, z0=None):
        """Receiver-side reconstructions ``zhat^(0..T)`` rebuilt from the log.

        Passing a different ``z0`` shows what an observer without the
        encrypted initialization would reconstruct.
        """
        zhat = np.array(self.z0 if z0 is None else z0, dtype=float)
        out = [zhat]
        for t in range(1, len(self.rounds) + 1):
            zhat = zhat + self.reproduced(t)
            out.append(zhat)
        return np.stack(out)

    def to_dict(self):
        def enc(a):
            return [int(v) for v in a] if self.enabled else [float(v) for v in a]

        return {
            "u": self.u,
            "l": self.l,
            "quantized": self.enabled,
            "messages": [
                {
                    "t": msg.t,
                    "from": msg.sender + 1,
                    "to": msg.receiver + 1,
                    "kind": msg.kind,
                    "payload": [float(v) for v in msg.payload] if msg.kind == INIT_Z else enc(msg.payload),
                    "encrypted": msg.encrypted,
                    "bits": msg.bits,
                }
                for msg in self.messages()
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict())


def pack_codes(codes, l):
    """Bit-pack code indices using exactly ``l`` bits each (big-endian)."""
    codes = np.ascontiguousarray(np.asarray(codes, dtype=np.uint64).reshape(-1))
    bits = np.unpackbits(codes.astype(">u8").view(np.uint8).reshape(-1, 8), axis=1)
    return np.packbits(bits[:, 64 - l:].reshape(-1)).tobytes()


def unpack_codes(data, l, count):
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[: l * count].reshape(count, l)
    full = np.zeros((count, 64), dtype=np.uint8)
    full[:, 64 - l:] = bits
    return np.packbits(full, axis=1).view(">u8").reshape(-1).astype(np.uint64)


@dataclass
class RunResult:
    trace: list
    final_x: np.ndarray
    transcript: Transcript
    converged_at: int | None
    x_star: np.ndarray
    history: dict | None = field(default=None, repr=False)

    @property
    def iterations(self):
        return len(self.transcript.rounds)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.trace:
            w.writerow([r.t, repr(r.mse), r.cum_bits, r.cum_bits_quantized, repr(r.quant_noise_sq)])
        return buf.getvalue()

    def summary(self):
        return {
            "converged_at": self.converged_at,
            "final_mse": self.trace[-1].mse,
            "total_bits": self.trace[-1].cum_bits,
        }


# -- core update -------------------------------------------------------------

def z_update(z_out_prev, z_hat_in, x_new, sign, c, theta):
    """``theta z_prev + (1 - theta)(zhat_in + 2 c sign x_new)``.

    For ``z_{j|i}`` computed by node ``i``, ``sign`` is ``B_{i|j}``, the
    sender's own incidence sign on the edge. Using ``B_{j|i}`` instead turns
    the reflection into an expansion and the iteration diverges.
    """
    return theta * z_out_prev + (1.0 - theta) * (z_hat_in + 2.0 * c * sign * x_new)


def _x_step(graph, problem, zhat, c, s=None):
    # one GEMM over all batch entries
    z_sum = np.moveaxis(np.tensordot(graph.signed_incidence, zhat, axes=(1, -2)), 0, -2)
    if s is None:
        x = problem.x_update(z_sum, c, graph.degrees)
        g = problem.subgradients(x)
    else:
        x = problem.x_update(z_sum, c, graph.degrees, s=s)
        g = problem.subgradients(x, s=s)
    resid = g + z_sum + c * graph.degrees[:, None] * x
    return x, resid


def _edge_step(graph, state_z, zhat, x, t_next, theta, c, qcfg, average_quantized=False):
    """z-update, differential quantization and delivery for round ``t_next``.

    With ``average_quantized`` the theta-averaging uses the sender's copy of
    the reconstruction instead of its own unquantized value.
    """
    _, sender, sign, rev = graph.directed
    own = zhat if average_quantized else state_z
    z_new = z_update(own, zhat[..., rev, :], x[..., sender, :], sign[rev][:, None], c, theta)
    v = z_new - zhat
    if qcfg.enabled:
        width = cell_width(qcfg, t_next)
        payload = quantize(v, width, qcfg.l)
        v_hat = reproduce(payload, width, qcfg.l)
    else:
        width = None
        payload = v
        v_hat = v
    return z_new, payload, width, v_hat, v_hat - v


def initialize(graph, config, seed, u=1):
    """Draw ``z^(0)`` on every directed edge and log it as encrypted messages."""
    gen = _rng.substream(seed, _rng.ZINIT)
    z0 = gen.normal(0.0, math.sqrt(config.sigma2_z0), size=(2 * graph.m, u))
    state = EdgeState(t=0, x=np.zeros((graph.n, u)), z=z0.copy(), zhat=z0.copy())
    return state, z0


def _check_finite(arr, t, what):
    bad = ~np.isfinite(arr)
    if np.any(bad):
        node = int(np.argwhere(bad)[0][0])
        raise DivergenceError(f"non-finite {what} at node {node + 1}, iteration {t}")


def iterate_once(state, graph, problem, config, qcfg, t=None):
    """One synchronous round: ``x^(t+1)``, ``z^(t+1)``, quantized ``v^(t+1)``.

    Returns the new state, the round's payload (code indices, or raw
    differences in passthrough mode) and a dict of per-round diagnostics.
    """
    t = state.t if t is None else t
    x, resid = _x_step(graph, problem, state.zhat, config.c)
    _check_finite(x, t + 1, "x")
    z_new, payload, width, v_hat, nq = _edge_step(
        graph, state.z, state.zhat, x, t + 1, config.theta, config.c, qcfg, config.average_quantized)
    _check_finite(z_new, t + 1, "z")
    zhat = state.zhat + v_hat
    new = EdgeState(t=t + 1, x=x, z=z_new, zhat=zhat)
    info = {
        "width": width,
        "nq": nq,
        "residual": float(np.max(np.linalg.norm(resid, axis=-1))),
    }
    return new, payload, info


def run(graph, problem, config, qcfg=None, seed=0, z0=None, keep_history=True):
    """Initialize and iterate until the stop rule fires or ``max_iters``.

    ``z0`` overrides the seeded initialization (used to share it across
    compared runs).
    """
    qcfg = QuantizerConfig() if qcfg is None else qcfg
    if graph.n != problem.n:
        raise ConfigError(f"problem has {problem.n} nodes, graph has {graph.n}")
    u = problem.u
    state, drawn = initialize(graph, config, seed, u)
    if z0 is not None:
        drawn = np.array(z0, dtype=float).reshape(2 * graph.m, u)
        state = EdgeState(t=0, x=state.x, z=drawn.copy(), zhat=drawn.copy())
    transcript = Transcript(graph, u, qcfg.l, qcfg.enabled, config.init_bits, qcfg.passthrough_bits)
    transcript.log_init(drawn)

    x_star = problem.global_optimum()
    per_round = 2 * graph.m * u * qcfg.bits_per_scalar
    init_bits = transcript.init_bits_total
    trace = [_metrics.MetricRecord(0, _metrics.mse(state.x, x_star), init_bits, 0, 0.0, 0.0)]
    hist = None
    if keep_history:
        hist = {"x": [state.x], "z": [state.z], "zhat": [state.zhat], "nq": [np.zeros_like(state.z)]}

    converged_at = None
    best = math.inf
    for t in range(config.max_iters):
        prev_x = state.x
        state, payload, info = iterate_once(state, graph, problem, config, qcfg, t)
        transcript.log_round(payload, info["width"])
        err = _metrics.mse(state.x, x_star)
        q_bits = per_round * (t + 1)
        trace.append(_metrics.MetricRecord(
            t + 1, err, init_bits + q_bits, q_bits, float(np.sum(info["nq"] ** 2)), info["residual"]))
        if hist is not None:
            hist["x"].append(state.x)
            hist["z"].append(state.z)
            hist["zhat"].append(state.zhat)
            hist["nq"].append(info["nq"])
        best = min(best, err)
        if err > config.divergence_factor * best and best > 0:
            raise DivergenceError(
                f"MSE grew from {best:.3e} to {err:.3e} by iteration {t + 1}")
        if config.stop_rule == "oracle":
            done = err < config.mse_threshold
        else:
            done = _metrics.mse(state.x, prev_x) < config.mse_threshold
        if done:
            converged_at = t + 1
            break

    if hist is not None:
        hist = {k: np.stack(v) for k, v in hist.items()}
    return RunResult(trace, state.x, transcript, converged_at, x_star, hist)
