"""
Tests for scenario validation.

These tests ensure that:
1. Valid scenarios are accepted
2. Invalid scenarios produce clear error messages with field paths
3. Bundled scenarios load and build
"""

import copy
import json
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

# Add scripts to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "scripts"))

from scenario import (
    ScenarioError,
    build_agents,
    bundled_aliases,
    is_strongly_connected,
    load_scenario,
    parse_scenario,
    resolve_scenario_path,
    with_overrides,
    write_scenario,
)


@pytest.fixture
def valid_scenario():
    """A minimal valid two-agent scenario."""
    agent = {
        "id": 1,
        "model": {"kind": "linear", "A": [[1.0, 0.2], [0.0, 1.0]], "B": [[0.02], [0.2]]},
        "state_box": {"lower": [-5.0, -5.0], "upper": [5.0, 5.0]},
        "input_box": {"lower": [-2.0], "upper": [2.0]},
        "eta": 0.0001,
        "lipschitz_open": 0.2,
        "lipschitz_closed": 1.0,
        "initial_state": [0.5, 0.0],
        "sigma": 0.9,
        "terminal": {
            "P": [[10.0, 4.0], [4.0, 8.0]],
            "K": [[-1.0, -1.5]],
            "r": 0.5,
            "f": 0.25,
        },
        "neighbors": [2],
    }
    other = copy.deepcopy(agent)
    other["id"] = 2
    other["neighbors"] = [1]
    other["initial_state"] = [-0.4, 0.1]
    return {
        "meta": {"name": "pair", "description": "two agents"},
        "simulation": {"initial_horizon": 5, "max_steps": 10, "seed": 1},
        "weights": {"Q": [[1.0, 0.0], [0.0, 1.0]], "R": [[1.0]], "Q_coupling": {"default": [[0.5, 0.0], [0.0, 0.5]]}},
        "agents": [agent, other],
    }


@pytest.fixture
def temp_scenario_file(valid_scenario):
    """Create a temporary scenario file."""
    with tempfile.NamedTemporaryFile(mode="w", suffix=".json", delete=False) as f:
        json.dump(valid_scenario, f)
        return Path(f.name)


class TestValidScenario:
    """Test that valid scenarios are accepted."""

    def test_load_valid_scenario(self, temp_scenario_file):
        """A valid scenario should load without errors."""
        config = load_scenario(temp_scenario_file)
        assert config.name == "pair"
        assert len(config.agents) == 2
        assert config.initial_horizon == 5

    def test_defaults_filled(self, temp_scenario_file):
        """Optional fields get their defaults."""
        config = load_scenario(temp_scenario_file)
        assert config.variant == "st-h-dmpc"
        assert config.output_dir == "output/pair"
        assert config.literal_case23 is False
        assert config.verification.samples == 10_000

    def test_shared_weights_applied(self, temp_scenario_file):
        """Top-level weights reach every agent, coupling per neighbor."""
        agent = load_scenario(temp_scenario_file).agent(2)
        assert agent.R == ((1.0,),)
        assert agent.Q_coupling == ((1, ((0.5, 0.0), (0.0, 0.5))),)

    def test_agent_override(self, valid_scenario):
        valid_scenario["agents"][0]["weights"] = {"R": [[2.0]]}
        config = parse_scenario(valid_scenario)
        assert config.agent(1).R == ((2.0,),)
        assert config.agent(2).R == ((1.0,),)

    def test_round_trip(self, temp_scenario_file, tmp_path):
        """Writing and reloading gives an equal config."""
        config = load_scenario(temp_scenario_file)
        path = write_scenario(config, tmp_path / "copy.json")
        assert load_scenario(path) == config

    def test_overrides(self, temp_scenario_file):
        config = with_overrides(load_scenario(temp_scenario_file), variant="DMPC", seed=9, max_steps=None)
        assert config.variant == "dmpc"
        assert config.seed == 9
        assert config.max_steps == 10


class TestMissingFields:
    """Test that missing required fields are caught."""

    def test_missing_meta(self, valid_scenario):
        del valid_scenario["meta"]
        with pytest.raises(ScenarioError, match="meta"):
            parse_scenario(valid_scenario)

    def test_aliases_must_be_strings(self, valid_scenario):
        valid_scenario["meta"]["aliases"] = ["ok", ""]
        with pytest.raises(ScenarioError, match="meta.aliases"):
            parse_scenario(valid_scenario)

    def test_missing_agents(self, valid_scenario):
        del valid_scenario["agents"]
        with pytest.raises(ScenarioError, match="agents"):
            parse_scenario(valid_scenario)

    def test_missing_initial_horizon(self, valid_scenario):
        del valid_scenario["simulation"]["initial_horizon"]
        with pytest.raises(ScenarioError, match="initial_horizon"):
            parse_scenario(valid_scenario)

    def test_agent_missing_sigma(self, valid_scenario):
        del valid_scenario["agents"][1]["sigma"]
        with pytest.raises(ScenarioError, match=r"agents\[1\]: missing required field 'sigma'"):
            parse_scenario(valid_scenario)

    def test_missing_coupling_weight(self, valid_scenario):
        del valid_scenario["weights"]["Q_coupling"]["default"]
        with pytest.raises(ScenarioError, match="Q_coupling"):
            parse_scenario(valid_scenario)


class TestInvalidValues:
    """Test that invalid values are caught."""

    def test_root_not_object(self):
        with pytest.raises(ScenarioError, match="must be an object"):
            parse_scenario([])

    def test_empty_agents(self, valid_scenario):
        valid_scenario["agents"] = []
        with pytest.raises(ScenarioError, match="at least one agent"):
            parse_scenario(valid_scenario)

    def test_sigma_range(self, valid_scenario):
        valid_scenario["agents"][0]["sigma"] = 1.0
        with pytest.raises(ScenarioError, match=r"agents\[0\]\.sigma"):
            parse_scenario(valid_scenario)

    def test_r_not_definite(self, valid_scenario):
        valid_scenario["weights"]["R"] = [[0.0]]
        with pytest.raises(ScenarioError, match="positive definite"):
            parse_scenario(valid_scenario)

    def test_duplicate_ids(self, valid_scenario):
        valid_scenario["agents"][1]["id"] = 1
        valid_scenario["agents"][1]["neighbors"] = []
        with pytest.raises(ScenarioError, match="duplicate id 1"):
            parse_scenario(valid_scenario)

    def test_unknown_neighbor(self, valid_scenario):
        valid_scenario["agents"][0]["neighbors"] = [7]
        with pytest.raises(ScenarioError, match="unknown agent id 7"):
            parse_scenario(valid_scenario)

    def test_self_neighbor(self, valid_scenario):
        valid_scenario["agents"][0]["neighbors"] = [1]
        with pytest.raises(ScenarioError, match="lists itself"):
            parse_scenario(valid_scenario)

    def test_box_must_contain_origin(self, valid_scenario):
        valid_scenario["agents"][0]["state_box"]["lower"] = [0.1, -5.0]
        with pytest.raises(ScenarioError, match="origin"):
            parse_scenario(valid_scenario)

    def test_invalid_model_kind(self, valid_scenario):
        valid_scenario["agents"][0]["model"] = {"kind": "quadrotor"}
        with pytest.raises(ScenarioError, match="invalid kind"):
            parse_scenario(valid_scenario)

    def test_terminal_radii_order(self, valid_scenario):
        valid_scenario["agents"][0]["terminal"]["f"] = 0.5
        with pytest.raises(ScenarioError, match="0 < f < r"):
            parse_scenario(valid_scenario)

    def test_wrong_dimension(self, valid_scenario):
        valid_scenario["agents"][0]["initial_state"] = [0.5, 0.0, 0.0]
        with pytest.raises(ScenarioError, match=r"initial_state: expected 2 entries"):
            parse_scenario(valid_scenario)

    def test_unknown_variant(self, valid_scenario):
        valid_scenario["simulation"]["variant"] = "nmpc"
        with pytest.raises(ScenarioError, match="simulation.variant"):
            parse_scenario(valid_scenario)

    def test_unknown_solver_field(self, valid_scenario):
        valid_scenario["solver"] = {"tolerance": 1.0}
        with pytest.raises(ScenarioError, match="unknown field 'tolerance'"):
            parse_scenario(valid_scenario)

    def test_boolean_is_not_a_number(self, valid_scenario):
        valid_scenario["agents"][0]["eta"] = True
        with pytest.raises(ScenarioError, match="must be a number"):
            parse_scenario(valid_scenario)


class TestGraph:
    def test_ring_is_strongly_connected(self, valid_scenario):
        assert is_strongly_connected(parse_scenario(valid_scenario).agents)

    def test_one_way_edge_is_not(self, valid_scenario):
        valid_scenario["agents"][0]["neighbors"] = []
        assert not is_strongly_connected(parse_scenario(valid_scenario).agents)


class TestFileHandling:
    """Test file handling edge cases."""

    def test_file_not_found(self):
        with pytest.raises(FileNotFoundError):
            load_scenario("/nonexistent/path/scenario.json")

    def test_invalid_json(self):
        with tempfile.NamedTemporaryFile(mode="w", suffix=".json", delete=False) as f:
            f.write("{ invalid json }")
            path = Path(f.name)
        with pytest.raises(ScenarioError, match="Invalid JSON"):
            load_scenario(path)


class TestBundledScenarios:
    """Test the scenarios shipped in scenarios/."""

    def test_unicycle_ring(self):
        config = load_scenario("unicycle_ring")
        assert [a.id for a in config.agents] == [1, 2, 3, 4]
        assert [a.neighbors for a in config.agents] == [(4,), (1,), (2,), (3,)]
        assert [a.sigma for a in config.agents] == [0.9, 0.5, 0.9, 0.85]
        assert [a.terminal.r for a in config.agents] == [0.056, 0.065, 0.056, 0.065]
        assert [a.terminal.f for a in config.agents] == [0.03, 0.04, 0.03, 0.03]
        assert config.initial_horizon == 10
        assert is_strongly_connected(config.agents)

    def test_unicycle_ring_builds_verbatim(self):
        agents = build_agents(load_scenario("unicycle_ring"))
        spec = agents[1]
        assert spec.id == 2
        assert spec.terminal.P[1, 1] == 2.7725
        assert spec.terminal.K[0, 0] == -1.3332
        np.testing.assert_allclose(spec.weights.Q, 0.8 * np.eye(3))
        np.testing.assert_allclose(spec.weights.Q_coupling[1], np.eye(3))
        np.testing.assert_allclose(spec.initial_state, [0.2, -0.4, -1.0471975511965976])

    def test_linear_ring_builds(self):
        agents = build_agents(load_scenario("linear_ring"))
        assert len(agents) == 3
        for spec in agents:
            assert 0.0 < spec.terminal.f < spec.terminal.r <= 0.5

    def test_alias_resolves_to_bundled_file(self):
        """The four-unicycle benchmark is also reachable under its alias."""
        assert resolve_scenario_path("paper_sec5") == resolve_scenario_path("unicycle_ring")
        config = load_scenario("paper_sec5")
        assert config.name == "unicycle_ring"
        assert "paper_sec5" in config.aliases
        assert bundled_aliases()["paper_sec5"].name == "unicycle_ring.json"

    def test_unknown_alias(self):
        with pytest.raises(FileNotFoundError):
            load_scenario("no_such_scenario")

    def test_integrator_ring_builds(self):
        """Input saturation caps the terminal radius at 0.25 sqrt(P) / |K|."""
        agents = build_agents(load_scenario("integrator_ring"))
        assert [spec.id for spec in agents] == [1, 2, 3, 4]
        for spec in agents:
            P, K = spec.terminal.P[0, 0], spec.terminal.K[0, 0]
            assert spec.terminal.r == pytest.approx(0.25 * np.sqrt(P) / abs(K), rel=1e-9)
            assert spec.terminal.f == pytest.approx(0.5 * spec.terminal.r)
            assert abs(K) <= spec.model.lipschitz_closed
