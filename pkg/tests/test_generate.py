import numpy as np
import pytest

from feederkron.errors import ValidationError
from feederkron.generate import GenParams, generate
from feederkron.grid import assemble_admittance, network_to_dict, validate
from feederkron.scenario import residual


def test_minimal_feeder():
    net, lib = generate(GenParams(n=2))
    assert net.n == 2 and len(net.branches) == 1 and net.nodes[0].is_slack


def test_same_seed_is_bit_identical():
    a_net, a_lib = generate(GenParams(n=50, seed=11))
    b_net, b_lib = generate(GenParams(n=50, seed=11))
    assert network_to_dict(a_net) == network_to_dict(b_net)
    np.testing.assert_array_equal(a_lib.voltages, b_lib.voltages)


def test_different_seeds_differ():
    a, _ = generate(GenParams(n=50, seed=1))
    b, _ = generate(GenParams(n=50, seed=2))
    assert network_to_dict(a) != network_to_dict(b)


def test_default_feeder_is_valid_and_converged(feeder100):
    net, lib = feeder100
    assert validate(net).ok
    y = assemble_admittance(net)
    for sc in lib:
        assert residual(y, sc.voltages, sc.injections, net) <= 1e-10 * max(1, np.abs(sc.injections).max())


def test_extreme_scenarios_first():
    _, lib = generate(GenParams(n=30, n_scenarios=6))
    assert lib.ids[:2] == ["low", "high"] and len(lib) == 6
    low, high = lib[0].loads, lib[1].loads
    mid = np.array([sc.loads for sc in lib.scenarios[2:]])
    assert np.all(np.abs(mid) >= np.abs(low) - 1e-15)
    assert np.all(np.abs(mid) <= np.abs(high) + 1e-15)


def test_impedance_blocks_are_symmetric_and_dominant(feeder100):
    net, _ = feeder100
    for br in net.branches:
        idx = [p for p in range(3) if br.y_block[p, p] != 0]
        z = np.linalg.inv(br.y_block[np.ix_(idx, idx)])
        np.testing.assert_allclose(z, z.T, atol=1e-12)
        off = np.abs(z - np.diag(np.diag(z)))
        assert np.all(np.diag(z).real >= 2 * off.max(initial=0) - 1e-12)


def test_target_drop(feeder100):
    _, lib = feeder100
    drop = 1 - np.abs(lib.voltages[lib.ids.index("high")])[np.abs(lib.voltages[0]) > 0].min()
    assert 0.03 < drop < 0.08


@pytest.mark.parametrize("kw", [dict(n=1), dict(frac_two_phase=0.7, frac_one_phase=0.5),
                                dict(branch_prob=1.5), dict(mutual_ratio=(0.1, 0.9)),
                                dict(n_scenarios=0), dict(power_factor=(0, 1))])
def test_invalid_params(kw):
    with pytest.raises(ValidationError):
        generate(GenParams(**kw))
