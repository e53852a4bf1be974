"""Noise calibration, rate bounds and adversary views.

The adversary view of an honest node ``i`` at round ``t`` is what remains of
its first-order optimality condition once everything the adversary can
compute has been subtracted:

    obs_k = df_i(x_i^(t+1)) + sum_{j honest} B_{i|j} z0_{i|j} - a_k

one equation per corrupted neighbor ``k``, where ``a_k`` is the scaled
quantization noise on the message ``i -> k``. :func:`adversary_observation`
rebuilds it from transcript messages the adversary can see and checks it
against the honest node's internals.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import rng as _rng
from .optimizer import OptimizerConfig, _edge_step, _x_step
from .problem import ConsensusProblem
from .quantizer import QuantizerConfig

DEFAULT_BINS = 64
CURVE_COLUMNS = ("sigma2_z0", "t", "nmi", "mi_bits", "trials")


class PrivacyError(ValueError):
    pass


class LeakageCheckError(AssertionError):
    pass


@dataclass(frozen=True)
class AdversaryModel:
    corrupted: frozenset
    eavesdropper: bool = True

    def __init__(self, corrupted, eavesdropper=True):
        object.__setattr__(self, "corrupted", frozenset(int(c) for c in corrupted))
        object.__setattr__(self, "eavesdropper", bool(eavesdropper))

    def honest(self, graph):
        return [i for i in range(graph.n) if i not in self.corrupted]

    def validate(self, graph):
        if any(not 0 <= c < graph.n for c in self.corrupted):
            raise PrivacyError("corrupted node id out of range")
        if not self.honest(graph):
            raise PrivacyError("at least one node must be honest")

    def corrupted_neighbors(self, graph, i):
        return sorted(graph.neighbor_sets[i] & self.corrupted)

    def honest_neighbors(self, graph, i):
        return sorted(graph.neighbor_sets[i] - self.corrupted)

    def sees(self, graph, d, encrypted):
        """Whether the message carrying directed variable ``d`` is visible."""
        owner, sender, _, _ = graph.directed
        on_corrupted_edge = int(owner[d]) in self.corrupted or int(sender[d]) in self.corrupted
        return on_corrupted_edge or (self.eavesdropper and not encrypted)


@dataclass(frozen=True)
class PrivacyTarget:
    delta: float
    sigma2_s: float = 1.0

    def __post_init__(self):
        if not self.delta > 0 or not self.sigma2_s > 0:
            raise PrivacyError("delta and sigma2_s must be positive")

    @property
    def noise_variance(self):
        return required_noise_variance(self.delta, self.sigma2_s)


@dataclass(frozen=True)
class ViewEntry:
    node: int
    corrupted_neighbor: int
    t: int
    observed: np.ndarray
    direct: np.ndarray


# -- calibration and bounds --------------------------------------------------

def required_noise_variance(delta, sigma2_s=1.0):
    """Gaussian noise variance keeping ``I(S; S+R) <= delta`` bits."""
    if not delta > 0:
        raise PrivacyError(f"delta must be > 0, got {delta}")
    return sigma2_s / (2.0 ** (2.0 * delta) - 1.0)


def gaussian_mi(sigma2_s, sigma2_r):
    """``I(S; S+R)`` in bits for independent Gaussians."""
    return 0.5 * math.log2(1.0 + sigma2_s / sigma2_r)


def min_bits_bound(delta, sigma2_s=1.0, cell_width_sr=1e-5):
    """Upper bound on the entropy of the quantized obfuscated value at leakage ``delta``."""
    a = 2.0 ** (2.0 * delta)
    return 0.5 * math.log2(2.0 * math.pi * math.e * a * sigma2_s / ((a - 1.0) * cell_width_sr**2))


# -- histogram estimators ----------------------------------------------------

def _edges(a, bins):
    lo, hi = float(np.min(a)), float(np.max(a))
    return np.linspace(lo, hi, bins + 1)


def _plugin_entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log2(p)))


def estimate_entropy(samples, bins=DEFAULT_BINS):
    """Plug-in entropy (bits) on equal-width bins spanning the sample range."""
    a = np.asarray(samples, dtype=float).reshape(-1)
    if np.ptp(a) == 0:
        return 0.0
    counts, _ = np.histogram(a, bins=_edges(a, bins))
    return _plugin_entropy(counts)


def estimate_mi(samples_s, samples_obs, bins=DEFAULT_BINS):
    """Plug-in mutual information (bits) from a ``bins x bins`` joint histogram.

    Constant inputs carry no information; the estimate is then 0 and a
    ``RuntimeWarning`` is issued.
    """
    s = np.asarray(samples_s, dtype=float).reshape(-1)
    o = np.asarray(samples_obs, dtype=float).reshape(-1)
    if s.shape != o.shape:
        raise PrivacyError(f"paired samples differ in length: {s.size} vs {o.size}")
    if np.ptp(s) == 0 or np.ptp(o) == 0:
        warnings.warn("degenerate (constant) samples; mutual information set to 0", RuntimeWarning)
        return 0.0
    joint, _, _ = np.histogram2d(s, o, bins=[_edges(s, bins), _edges(o, bins)])
    return max(0.0, _plugin_entropy(joint.sum(1)) + _plugin_entropy(joint.sum(0)) - _plugin_entropy(joint))


# -- adversary views ---------------------------------------------------------

def privacy_conditions(graph, model):
    """Honest nodes mapped to whether they keep at least one honest neighbor."""
    return {i: bool(model.honest_neighbors(graph, i)) for i in model.honest(graph)}


def exposed_nodes(graph, model):
    """Honest nodes whose every neighbor is corrupted."""
    return [i for i, ok in privacy_conditions(graph, model).items() if not ok]


def _noise_scale(graph, i, k, theta):
    return graph.degrees[i] / (2.0 * (1.0 - theta)) * (1 if i < k else -1)


def _noise_term(hist_nq, graph, i, k, t, theta, average_quantized):
    d = graph.directed_index(k, i)
    nq = hist_nq[t + 1][d]
    if theta and not average_quantized:
        nq = nq - theta * hist_nq[t][d]
    return _noise_scale(graph, i, k, theta) * nq


def _visible_reconstructions(run, model, graph):
    """zhat history with NaN wherever the adversary lacks the needed messages."""
    tr = run.transcript
    vis = np.array([model.sees(graph, d, encrypted=True) for d in range(2 * graph.m)])
    vis_v = np.array([model.sees(graph, d, encrypted=False) for d in range(2 * graph.m)])
    z0 = np.where(vis[:, None], tr.z0, np.nan)
    vsum = np.zeros_like(tr.z0, dtype=float)
    zhat = [z0]
    vsums = [vsum]
    for t in range(1, len(tr.rounds) + 1):
        vhat = np.where(vis_v[:, None], tr.reproduced(t), np.nan)
        vsum = vsum + vhat
        vsums.append(vsum)
        zhat.append(z0 + vsum)
    return np.stack(zhat), np.stack(vsums)


def adversary_observation(run, model, problem, graph, i, t, config=None, tol=1e-9, knowledge=None):
    """Adversary's residual view of honest node ``i`` for the update ``x_i^(t+1)``.

    Returns one :class:`ViewEntry` per corrupted neighbor ``k``. ``observed``
    is computed only from messages the adversary sees; ``direct`` uses the
    honest node's internals. They must agree to ``tol`` or
    :class:`LeakageCheckError` is raised. With the eavesdropper present the
    honest-edge term is ``sum B z0``; a purely passive adversary is left
    with ``sum B zhat^(t)`` on those edges instead.

    ``knowledge`` caches the adversary's reconstructions across calls on the
    same run (see :func:`adversary_trajectory`).
    """
    config = OptimizerConfig() if config is None else config
    average_quantized = config.average_quantized
    if i in model.corrupted:
        raise PrivacyError(f"node {i + 1} is corrupted")
    ks = model.corrupted_neighbors(graph, i)
    if not ks:
        raise PrivacyError(f"node {i + 1} has no corrupted neighbor")
    if run.history is None:
        raise PrivacyError("run was made without history")
    if not 0 <= t < run.iterations:
        raise PrivacyError(f"iteration {t} outside the recorded run")
    hist = run.history
    _, _, sign, _ = graph.directed
    hon = model.honest_neighbors(graph, i)
    d_i = graph.degrees[i]

    if knowledge is None:
        knowledge = _visible_reconstructions(run, model, graph)
    zhat_adv, vsum_adv = knowledge
    known = np.zeros(problem.u)
    for j in ks:
        d = graph.directed_index(i, j)
        known = known + sign[d] * zhat_adv[t][d]
    if model.eavesdropper:
        for j in hon:
            d = graph.directed_index(i, j)
            known = known + sign[d] * vsum_adv[t][d]

    grad = problem.subgradient(i, hist["x"][t + 1][i])
    if model.eavesdropper:
        masked = sum((sign[graph.directed_index(i, j)] * hist["zhat"][0][graph.directed_index(i, j)]
                      for j in hon), np.zeros(problem.u))
    else:
        masked = sum((sign[graph.directed_index(i, j)] * hist["zhat"][t][graph.directed_index(i, j)]
                      for j in hon), np.zeros(problem.u))

    out = []
    for k in ks:
        dk = graph.directed_index(k, i)
        dik = graph.directed_index(i, k)
        scale = _noise_scale(graph, i, k, config.theta)
        own_prev = zhat_adv[t][dk]
        lin = zhat_adv[t + 1][dk] - config.theta * own_prev - (1.0 - config.theta) * zhat_adv[t][dik]
        observed = -(known + scale * lin)
        if np.any(np.isnan(observed)):
            raise PrivacyError("adversary lacks a message needed for the reconstruction")
        direct = grad + masked - _noise_term(hist["nq"], graph, i, k, t, config.theta, average_quantized)
        if np.max(np.abs(observed - direct)) > tol:
            raise LeakageCheckError(
                f"node {i + 1}, k={k + 1}, t={t}: reconstructed {observed} vs direct {direct}")
        out.append(ViewEntry(i, k, t, observed, direct))
    return out


def adversary_trajectory(run, model, problem, graph, i, config=None, tol=1e-9):
    """:func:`adversary_observation` at every recorded round."""
    knowledge = _visible_reconstructions(run, model, graph)
    return [adversary_observation(run, model, problem, graph, i, t, config, tol, knowledge)
            for t in range(run.iterations)]


# -- Monte Carlo privacy curves ----------------------------------------------

def one_honest_neighbor_model(graph, node=None, eavesdropper=True):
    """Corrupt every neighbor of ``node`` except its lowest-indexed one.

    Without ``node``, the lowest-indexed node of degree >= 2 is used.
    """
    if node is None:
        cands = [i for i in range(graph.n) if graph.degrees[i] >= 2]
        if not cands:
            raise PrivacyError("no node has two or more neighbors")
        node = cands[0]
    nbrs = sorted(graph.neighbor_sets[node])
    return AdversaryModel(nbrs[1:], eavesdropper), node


def designated_node(graph, model):
    """Lowest-indexed honest node with exactly one honest and >= 1 corrupted neighbor."""
    for i in model.honest(graph):
        if len(model.honest_neighbors(graph, i)) == 1 and model.corrupted_neighbors(graph, i):
            return i
    counts = {i + 1: len(model.honest_neighbors(graph, i)) for i in model.honest(graph)}
    raise PrivacyError(
        f"no honest node with exactly one honest neighbor; honest-neighbor counts: {counts}")


@dataclass
class CurveRow:
    sigma2_z0: float
    t: int
    nmi: float
    mi_bits: float
    trials: int


def _trial_draws(graph, seed, trials, sigma2_s):
    s = np.empty((trials, graph.n, 1))
    w = np.empty((trials, 2 * graph.m, 1))
    for k in range(trials):
        gen = _rng.trial_stream(seed, k)
        s[k] = gen.normal(0.0, math.sqrt(sigma2_s), size=(graph.n, 1))
        w[k] = gen.standard_normal((2 * graph.m, 1))
    return s, w


def observation_samples(graph, model, node, s, z0, config, qcfg, iterations):
    """Batched simulation; returns ``(T, trials)`` adversary observations of ``node``.

    ``s`` is ``(trials, n, 1)`` private data and ``z0`` the matching
    ``(trials, 2m, 1)`` initialization. The observation is averaged over the
    node's corrupted neighbors.
    """
    _, _, sign, _ = graph.directed
    ks = model.corrupted_neighbors(graph, node)
    hon = model.honest_neighbors(graph, node)
    d_hon = [graph.directed_index(node, j) for j in hon]
    masked = np.sum(sign[d_hon][None, :] * z0[:, d_hon, 0], axis=1)
    d_ks = np.array([graph.directed_index(k, node) for k in ks])
    scales = np.array([_noise_scale(graph, node, k, config.theta) for k in ks])
    average_quantized = config.average_quantized
    problem = ConsensusProblem(np.zeros((graph.n, 1)))
    z = z0.copy()
    zhat = z0.copy()
    nq_prev = np.zeros((z0.shape[0], len(ks)))
    out = np.empty((iterations, z0.shape[0]))
    for t in range(iterations):
        x, _ = _x_step(graph, problem, zhat, config.c, s=s)
        z, _, _, v_hat, nq = _edge_step(graph, z, zhat, x, t + 1, config.theta, config.c, qcfg,
                                        average_quantized=average_quantized)
        zhat = zhat + v_hat
        nq_k = nq[:, d_ks, 0]
        eff = nq_k - (config.theta * nq_prev if config.theta and not average_quantized else 0.0)
        noise = np.mean(scales[None, :] * eff, axis=1)
        nq_prev = nq_k
        out[t] = x[:, node, 0] - s[:, node, 0] + masked - noise
    return out


def empirical_privacy_curve(graph, sigma2_levels, model=None, trials=1000, seed=0,
                            config=None, qcfg=None, iterations=100, bins=DEFAULT_BINS,
                            sigma2_s=1.0, couple_delta0=True):
    """Per-iteration normalized mutual information for each noise level.

    Each trial draws fresh private data and a fresh initialization from its
    own substream. The same standard-normal draws are scaled to every level,
    so levels differ only in the noise variance. With ``couple_delta0`` the
    initial cell width is ``sqrt(sigma2_z0)``.
    """
    if trials < 100:
        raise PrivacyError(f"need at least 100 trials, got {trials}")
    config = OptimizerConfig() if config is None else config
    qcfg = QuantizerConfig() if qcfg is None else qcfg
    if model is None:
        model, _ = one_honest_neighbor_model(graph)
    model.validate(graph)
    node = designated_node(graph, model)
    s, w = _trial_draws(graph, seed, trials, sigma2_s)
    priv = s[:, node, 0]
    h_s = estimate_entropy(priv, bins)
    rows = []
    for level in sorted(sigma2_levels):
        q = qcfg
        if couple_delta0 and level > 0:
            q = QuantizerConfig(l=qcfg.l, delta0=math.sqrt(level), gamma=qcfg.gamma,
                                enabled=qcfg.enabled, passthrough_bits=qcfg.passthrough_bits)
        obs = observation_samples(graph, model, node, s, math.sqrt(level) * w, config, q, iterations)
        for t in range(iterations):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                mi = estimate_mi(priv, obs[t], bins)
            rows.append(CurveRow(float(level), t + 1, mi / h_s, mi, trials))
    return rows


def curve_to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for r in rows:
        w.writerow([repr(r.sigma2_z0), r.t, repr(r.nmi), repr(r.mi_bits), r.trials])
    return buf.getvalue()
