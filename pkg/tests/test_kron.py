import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from feederkron.errors import ContractError, SolverError
from feederkron.generate import GenParams, generate
from feederkron.grid import adjacency, assemble_admittance
from feederkron.kron import (Partition, kron_reduce, kron_reduce_network, reduced_topology,
                             solve_kept)
from feederkron.scenario import solve_anchored

from conftest import chain, star


def rows(nodes):
    return (3 * np.asarray(nodes)[:, None] + np.arange(3)).reshape(-1)


def test_chain_series_combination():
    net = chain(3)
    kr = kron_reduce_network(net, assemble_admittance(net), [0, 2])
    for p in range(3):
        np.testing.assert_allclose(kr.y_kron[p::3, p::3], [[0.5, -0.5], [-0.5, 0.5]], atol=1e-15)


def test_empty_reduction_is_identity(feeder60):
    net, _ = feeder60
    y = assemble_admittance(net)
    kr = kron_reduce(y, Partition.keeping(range(net.n), net.n), net.present_flat, net.slack)
    np.testing.assert_array_equal(kr.y_kron, y.toarray())


def test_star_center_makes_triangle():
    net = star()
    kr = kron_reduce_network(net, assemble_admittance(net), [0, 1, 2, 4])
    adj = reduced_topology(kr)
    # kept order is 0,1,2,4: the three leaves become mutually coupled
    assert adj[1:, 1:].sum() == 6
    assert adj[0].tolist() == [False, True, False, False]


def test_leaf_reduction_keeps_remaining_topology():
    net = chain(5)
    kr = kron_reduce_network(net, assemble_admittance(net), [0, 1, 2, 3])
    np.testing.assert_array_equal(reduced_topology(kr), adjacency(chain(4)))


def test_chain_middle_reduced_topology():
    net = chain(3)
    adj = reduced_topology(kron_reduce_network(net, assemble_admittance(net), [0, 2]))
    np.testing.assert_array_equal(adj, [[False, True], [True, False]])


def test_solve_kept_matches_full_chain():
    net = chain(3)
    y = assemble_admittance(net)
    inj = np.zeros(9, dtype=complex)
    inj[6:9] = -0.1 * net.slack_voltage
    full = solve_anchored(y, inj, net)
    kr = kron_reduce_network(net, y, [0, 2])
    np.testing.assert_allclose(solve_kept(kr, inj[rows([0, 2])]), full[rows([0, 2])], atol=1e-12)


def test_partition_contracts():
    with pytest.raises(ContractError):
        Partition([0, 1], [1, 2])
    with pytest.raises(ContractError):
        Partition([1], [0, 2]).check(3, slack=0)
    with pytest.raises(ContractError):
        Partition([0], [1]).check(3)


def test_singular_reduced_block_names_nodes():
    net = chain(3)
    y = sp.lil_array(assemble_admittance(net).toarray())
    # detach node 2 completely: its reduced block becomes singular
    y[6:9, :] = 0
    y[:, 6:9] = 0
    y[6:9, 6:9] = np.diag([1e-300, 0, 0])
    with pytest.raises(SolverError, match="2"):
        kron_reduce(y, Partition([0, 1], [2]), np.ones(9, dtype=bool), 0)


def test_absent_phase_rows_stay_zero():
    net = chain(4, phases={2: "ab", 3: "a"})
    kr = kron_reduce_network(net, assemble_admittance(net), [0, 1, 3])
    y = kr.y_kron.reshape(3, 3, 3, 3)
    assert not y[2, 1:, :, :].any() and not y[:, :, 2, 1:].any()


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 40), st.integers(0, 10_000), st.floats(0.1, 0.8))
def test_exactness_on_random_partitions(n, seed, frac):
    net, lib = generate(GenParams(n=n, seed=seed, n_scenarios=1))
    y = assemble_admittance(net)
    rng = np.random.default_rng(seed)
    others = np.arange(1, n)
    red = others[rng.random(n - 1) < frac]
    keep = sorted(set(range(n)) - set(red.tolist()))
    inj = lib.injections[0].copy()
    inj[rows(red)] = 0.0
    full = solve_anchored(y, inj, net)
    kr = kron_reduce_network(net, y, keep)
    got = solve_kept(kr, inj[rows(keep)])
    want = full[rows(keep)]
    assert np.abs(got - want).max() <= 1e-10 * np.abs(want).max()


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 30), st.integers(0, 10_000))
def test_three_phase_topology_equals_laplacian_topology(n, seed):
    net, _ = generate(GenParams(n=n, seed=seed, n_scenarios=1))
    rng = np.random.default_rng(seed + 1)
    red = [k for k in range(1, n) if rng.random() < 0.5]
    keep = [k for k in range(n) if k not in red]
    kr = kron_reduce_network(net, assemble_admittance(net), keep)
    lap = np.diag(adjacency(net).sum(1)) - adjacency(net).astype(float)
    lk = lap[np.ix_(keep, keep)] - lap[np.ix_(keep, red)] @ np.linalg.solve(
        lap[np.ix_(red, red)], lap[np.ix_(red, keep)]) if red else lap
    ref = np.abs(lk) > 1e-9 * np.abs(lk).max()
    np.fill_diagonal(ref, False)
    np.testing.assert_array_equal(reduced_topology(kr), ref)
