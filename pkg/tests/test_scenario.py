import numpy as np
import pytest

from feederkron.errors import SolverError, ValidationError
from feederkron.grid import assemble_admittance
from feederkron.scenario import (AnchoredSolver, ScenarioLibrary, injections_from_pq,
                                 load_library, residual, scenario_from_currents,
                                 solve_anchored, write_library_csv, write_scenario_csv)

from conftest import chain


def single_phase_load(net, node, value):
    tab = np.zeros((net.n, 3), dtype=complex)
    tab[node, 0] = value
    return tab


class TestSolve:
    def test_zero_injection_is_flat(self, feeder60):
        net, _ = feeder60
        v = solve_anchored(assemble_admittance(net), np.zeros(3 * net.n), net)
        expected = np.tile(net.slack_voltage, net.n) * net.present_flat
        np.testing.assert_allclose(v, expected, atol=1e-12)

    def test_two_node_hand_solve(self, two_node):
        # load current 0.1 at 180 degrees on phase a: 1 * (1 - V2) = 0.1
        inj = single_phase_load(two_node, 1, -0.1).reshape(-1)
        v = solve_anchored(assemble_admittance(two_node), inj, two_node)
        assert v[3] == pytest.approx(0.9, abs=1e-12)

    def test_chain_series_drop(self):
        net = chain(3)
        inj = single_phase_load(net, 2, -0.2).reshape(-1)
        v = solve_anchored(assemble_admittance(net), inj, net)
        assert (v[0] - v[3]) == pytest.approx(v[3] - v[6], abs=1e-12)

    def test_batched_matches_single(self, feeder60):
        net, lib = feeder60
        solver = AnchoredSolver.for_network(net)
        batch = solver.solve(lib.injections)
        for k, sc in enumerate(lib):
            np.testing.assert_allclose(batch[k], solver.solve(sc.injections), atol=1e-14)

    def test_rejects_absent_phase_injection(self):
        net = chain(3, phases={2: "a"})
        inj = np.zeros(9, dtype=complex)
        inj[3 * 2 + 1] = 1.0
        with pytest.raises(ValidationError):
            AnchoredSolver.for_network(net).solve(inj)


class TestPQ:
    def test_zero_loads(self, feeder60):
        net, _ = feeder60
        sc = injections_from_pq(net, np.zeros((net.n, 3)))
        assert not sc.injections.any()

    def test_scalar_fixed_point(self, two_node):
        sc = injections_from_pq(two_node, single_phase_load(two_node, 1, 0.01))
        assert abs(sc.voltages[3]) == pytest.approx((1 + np.sqrt(0.96)) / 2, abs=1e-9)

    def test_absent_phase_load_rejected(self):
        net = chain(2, phases={1: "b"})
        with pytest.raises(ValidationError):
            injections_from_pq(net, single_phase_load(net, 1, 0.01))

    def test_divergence_is_a_solver_error(self, two_node):
        with pytest.raises(SolverError):
            injections_from_pq(two_node, single_phase_load(two_node, 1, 5.0))

    def test_residual_tolerance(self, feeder100):
        net, lib = feeder100
        y = assemble_admittance(net)
        for sc in lib:
            assert residual(y, sc.voltages, sc.injections, net) <= \
                1e-10 * max(1.0, np.abs(sc.injections).max())


class TestFiles:
    def test_pq_round_trip(self, tmp_path, feeder60):
        net, lib = feeder60
        write_library_csv(tmp_path / "s.csv", lib, mode="pq")
        back = load_library(net, tmp_path / "s.csv")
        assert back.ids == lib.ids == ["low", "high"]
        np.testing.assert_allclose(back.voltages, lib.voltages, atol=1e-12)

    def test_current_round_trip(self, tmp_path, feeder60):
        net, lib = feeder60
        write_library_csv(tmp_path / "i.csv", lib, mode="current")
        back = load_library(net, tmp_path / "i.csv")
        np.testing.assert_array_equal(back.injections, lib.injections)

    def test_empty_file(self, tmp_path, two_node):
        p = tmp_path / "empty.csv"
        p.write_text("")
        assert len(load_library(two_node, p)) == 0

    def test_many_scenarios(self, tmp_path, two_node):
        tables = {f"h{k:03d}": single_phase_load(two_node, 1, 0.001 * (1 + k % 7))
                  for k in range(168)}
        write_scenario_csv(tmp_path / "week.csv", two_node, tables)
        assert len(load_library(two_node, tmp_path / "week.csv")) == 168

    @pytest.mark.parametrize("body, match", [
        ("x,5,a,0.1,0.0\n", "unknown node"),
        ("x,-1,a,0.1,0.0\n", "unknown node"),
        ("x,1,d,0.1,0.0\n", "unknown phase"),
        ("x,1,a,0.1,0.0\nx,1,a,0.2,0.0\n", "duplicate"),
        ("x,1,a,0.1,0.0\ny,1,b,0.1,0.0\n", "different node-phase"),
        ("x,1,a,zz,0.0\n", ":2:"),
    ])
    def test_bad_rows(self, tmp_path, body, match):
        net = chain(2)
        p = tmp_path / "bad.csv"
        p.write_text("scenario_id,node_id,phase,p_pu,q_pu\n" + body)
        with pytest.raises(ValidationError, match=match):
            load_library(net, p)

    def test_unknown_header(self, tmp_path, two_node):
        p = tmp_path / "h.csv"
        p.write_text("a,b,c\n")
        with pytest.raises(ValidationError, match="header"):
            load_library(two_node, p)

    def test_slack_load_rejected(self, two_node):
        tab = single_phase_load(two_node, 0, 0.01)
        with pytest.raises(ValidationError, match="slack"):
            scenario_from_currents(two_node, tab)

    def test_subset(self, feeder60):
        _, lib = feeder60
        assert lib.subset(["high"]).ids == ["high"]
        with pytest.raises(ValidationError):
            lib.subset(["nope"])
