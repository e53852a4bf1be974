import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qpdmm.graph import Graph, generate_geometric_graph
from qpdmm.optimizer import (
    INIT_Z, QUANTIZED_V, ConfigError, DivergenceError, EdgeState, OptimizerConfig, initialize, run,
    z_update,
)
from qpdmm.problem import ConsensusProblem
from qpdmm.quantizer import QuantizerConfig

PASS = QuantizerConfig(enabled=False)


def test_z_update_examples():
    assert z_update(0.0, 1.0, 0.5, -1, 1.0, 0.0) == 0.0
    assert z_update(7.0, 1.0, 0.5, 1, 1.0, 1.0) == 7.0
    assert z_update(2.0, 1.0, 0.5, 1, 1.0, 0.5) == 2.0


def test_config_validation():
    for bad in (dict(theta=1.0), dict(theta=-0.1), dict(c=0.0), dict(sigma2_z0=-1.0),
                dict(max_iters=-1), dict(stop_rule="never")):
        with pytest.raises(ConfigError):
            OptimizerConfig(**bad)


def test_two_node_closed_form():
    # hand recursion: x1 = (0, 1), then both nodes sit at the mean 1
    g = Graph(2, ((0, 1),))
    p = ConsensusProblem([0.0, 2.0])
    cfg = OptimizerConfig(c=1.0, max_iters=20, sigma2_z0=0.0, mse_threshold=0.0)
    res = run(g, p, cfg, PASS, z0=np.zeros((2, 1)))
    xs = res.history["x"][:, :, 0]
    assert np.allclose(xs[1], [0.0, 1.0], atol=1e-15)
    assert np.allclose(xs[2:], 1.0, atol=1e-15)
    assert np.allclose(res.final_x, 1.0)


def test_sigma_zero_gives_zero_init():
    g = Graph(3, ((0, 1), (1, 2)))
    state, z0 = initialize(g, OptimizerConfig(sigma2_z0=0.0), seed=4)
    assert np.all(z0 == 0) and np.all(state.zhat == 0)


def test_init_variance_monte_carlo():
    n = 317  # complete graph: 2m = 100172 draws
    edges = tuple((i, j) for i in range(n) for j in range(i + 1, n))
    g = Graph(n, edges)
    for s2 in (1.0, 25.0):
        _, z0 = initialize(g, OptimizerConfig(sigma2_z0=s2), seed=9)
        assert z0.size >= 100_000
        assert abs(z0.var() / s2 - 1) < 0.02


@pytest.fixture(scope="module")
def default_run(graph30, consensus30):
    return run(graph30, consensus30, OptimizerConfig(), QuantizerConfig(), seed=0)


def test_transcript_message_counts(graph30, default_run):
    msgs = list(default_run.transcript.messages())
    T = default_run.iterations
    init = [m for m in msgs if m.kind == INIT_Z]
    qv = [m for m in msgs if m.kind == QUANTIZED_V]
    assert len(init) == 2 * graph30.m and all(m.encrypted and m.t == 0 and m.bits == 64 for m in init)
    assert len(qv) == 2 * graph30.m * T and not any(m.encrypted for m in qv)
    assert all(m.bits == 1 for m in qv)
    assert len(msgs) == len(default_run.transcript)
    for t in range(1, T + 1):
        assert sum(m.t == t for m in qv) == 2 * graph30.m
    assert default_run.transcript.quantized_bits_total == T * 2 * graph30.m


def test_trace_invariants(default_run, graph30):
    bits = [r.cum_bits for r in default_run.trace]
    assert all(b2 >= b1 for b1, b2 in zip(bits, bits[1:]))
    assert all(r.mse >= 0 for r in default_run.trace)
    for r in default_run.trace:
        assert r.cum_bits_quantized == r.t * 2 * graph30.m
        assert r.cum_bits == r.cum_bits_quantized + 2 * graph30.m * 64


def test_replay_matches_receiver_state(default_run):
    h = default_run.history
    replay = default_run.transcript.replay()
    assert np.array_equal(replay, h["zhat"])
    # zhat = z + nq on every edge and round
    assert np.allclose(h["zhat"][1:], h["z"][1:] + h["nq"][1:], rtol=0, atol=1e-12)


def test_wrong_basis_offsets_linearly(default_run):
    tr = default_run.transcript
    err = np.random.default_rng(1).standard_normal(tr.z0.shape)
    shifted = tr.replay(tr.z0 + err)
    assert np.allclose(shifted - tr.replay(), err[None], rtol=0, atol=1e-12)


def test_node_states(default_run, graph30):
    h = default_run.history
    es = EdgeState(3, h["x"][3], h["z"][3], h["zhat"][3])
    for i, ns in enumerate(es.node_states(graph30, prev_zhat=h["zhat"][2])):
        nb = graph30.neighbor_sets[i]
        assert set(ns.z_out) == set(ns.z_hat_in) == set(ns.z_hat_out_prev) == nb


def test_max_iters_zero(graph30, consensus30):
    res = run(graph30, consensus30, OptimizerConfig(max_iters=0), QuantizerConfig(), seed=0)
    assert res.iterations == 0 and res.converged_at is None
    assert res.trace[-1].cum_bits_quantized == 0
    assert res.trace[-1].cum_bits == 2 * graph30.m * 64 * consensus30.u
    assert np.all(res.final_x == 0)


def test_determinism(graph30, consensus30):
    a = run(graph30, consensus30, OptimizerConfig(max_iters=80), QuantizerConfig(), seed=3)
    b = run(graph30, consensus30, OptimizerConfig(max_iters=80), QuantizerConfig(), seed=3)
    assert a.to_csv() == b.to_csv()
    assert a.transcript.to_json() == b.transcript.to_json()
    for k in a.history:
        assert np.array_equal(a.history[k], b.history[k])


@pytest.mark.parametrize("theta", [0.0, 0.5])
def test_unquantized_converges_by_300(graph30, consensus30, theta):
    res = run(graph30, consensus30, OptimizerConfig(theta=theta, max_iters=300), PASS, seed=0)
    assert res.converged_at is not None and res.converged_at <= 300
    assert res.trace[-1].mse < 1e-10
    assert all(r.quant_noise_sq == 0 for r in res.trace)


def test_admm_needs_more_iterations(graph30, consensus30, default_run):
    admm = run(graph30, consensus30, OptimizerConfig(theta=0.5), QuantizerConfig(), seed=0)
    assert default_run.converged_at is not None and admm.converged_at is not None
    assert admm.converged_at > default_run.converged_at


def test_residual_stop_rule(graph30, consensus30):
    res = run(graph30, consensus30, OptimizerConfig(stop_rule="residual", mse_threshold=1e-12),
              QuantizerConfig(), seed=0)
    assert res.converged_at is not None
    assert res.trace[-1].mse < 1e-8


def test_divergence_guard(graph30, consensus30):
    with pytest.raises(DivergenceError, match="MSE grew"):
        run(graph30, consensus30, OptimizerConfig(divergence_factor=1.0 + 1e-9, sigma2_z0=100.0),
            QuantizerConfig(delta0=10.0), seed=0)


def test_size_mismatch(graph30):
    with pytest.raises(ConfigError):
        run(graph30, ConsensusProblem([1.0, 2.0]), OptimizerConfig())


def test_csv_and_json_exports(default_run, graph30):
    lines = default_run.to_csv().splitlines()
    assert lines[0] == "t,mse,cum_bits_total,cum_bits_quantized,quant_noise_sq"
    assert len(lines) == default_run.iterations + 2
    doc = json.loads(default_run.transcript.to_json())
    first = doc["messages"][0]
    assert first["kind"] == INIT_Z and first["from"] >= 1 and first["encrypted"] is True
    assert len(doc["messages"]) == len(default_run.transcript)


def test_residual_small_every_iteration(default_run):
    assert max(r.residual for r in default_run.trace) <= 1e-9


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10**6), theta=st.sampled_from([0.0, 0.5]))
def test_fixed_point_residual_property(seed, theta):
    gen = np.random.default_rng(seed)
    g = generate_geometric_graph(12, seed)
    p = ConsensusProblem.random(12, gen, u=2)
    res = run(g, p, OptimizerConfig(theta=theta, max_iters=60, mse_threshold=0.0), QuantizerConfig(l=2),
              seed=seed)
    assert max(r.residual for r in res.trace) <= 1e-9
