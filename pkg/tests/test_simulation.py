import numpy as np
import pytest
from numpy.testing import assert_allclose

from epr_agent import EPRAgent
from intervened_agent import HardInterventionAgent
from simulation import (
    AgentParams,
    DatasetManifest,
    InterventionSpec,
    MobilitySimulation,
    ParamPrior,
    exploration_probability,
    default_interventions,
    sample_agent_params,
    simulate_dataset,
    simulate_trajectory,
    step,
)
from utils import SimulationError
from visit_ledger import VisitLedger


def _manifest(dataset_id="train", n=6, t=40, d=20, seed=3, intervention=None, prior=None):
    return DatasetManifest(
        dataset_id=dataset_id, n_trajectories=n, n_steps=t, n_locations=d,
        prior=prior or ParamPrior(), intervention=intervention or InterventionSpec(), seed=seed,
    )


class TestParamSampling:
    def test_degenerate_prior_returns_means(self, rng):
        params = sample_agent_params(ParamPrior(0.6, 0.0, 0.5, 0.0), rng)
        assert params == AgentParams(0.6, 0.5)

    def test_sample_mean_close_to_prior_mean(self, rng):
        # small spread so truncation barely bites
        prior = ParamPrior(0.6, 0.05, 0.5, 0.05)
        draws = [sample_agent_params(prior, rng) for _ in range(2000)]
        assert np.mean([p.rho for p in draws]) == pytest.approx(0.6, abs=0.01)
        assert np.mean([p.gamma for p in draws]) == pytest.approx(0.5, abs=0.01)

    def test_draws_stay_in_range(self, rng):
        prior = ParamPrior(0.95, 0.2, 0.05, 0.2)
        for _ in range(500):
            p = sample_agent_params(prior, rng)
            assert 0.0 < p.rho <= 1.0
            assert p.gamma >= 0.0

    def test_impossible_prior_raises(self, rng):
        with pytest.raises(SimulationError):
            sample_agent_params(ParamPrior(-5.0, 0.1, 0.5, 0.1), rng)

    def test_degenerate_invalid_prior_raises(self, rng):
        with pytest.raises(SimulationError):
            sample_agent_params(ParamPrior(1.5, 0.0, 0.5, 0.0), rng)


class TestExplorationLaw:
    def test_power_law_value(self):
        assert exploration_probability([0, 1, 2, 3], AgentParams(0.6, 1.0)) == pytest.approx(0.15)

    def test_repeats_do_not_count(self):
        p = exploration_probability([0, 1, 1, 2, 3, 3, 3], AgentParams(0.6, 1.0))
        assert p == pytest.approx(0.15)

    def test_zero_once_everything_visited(self):
        assert exploration_probability([0, 1, 2], AgentParams(1.0, 0.0), num_locations=3) == 0.0

    def test_empty_prefix_rejected(self):
        with pytest.raises(ValueError):
            exploration_probability([], AgentParams(0.6, 0.5))

    def test_agent_matches_function(self):
        agent = EPRAgent(0, rho=0.6, gamma=1.0)
        ledger = VisitLedger.from_visits([4, 5, 6, 7], 10)
        assert agent.exploration_probability(ledger) == pytest.approx(0.15)

    def test_hard_agent_ignores_visit_count(self):
        agent = HardInterventionAgent(0, 0.25, rho=0.6, gamma=1.0)
        for visits in ([0], [0, 1, 2, 3, 4]):
            assert agent.exploration_probability(VisitLedger.from_visits(visits, 10)) == 0.25

    def test_hooks_receive_law_probability(self, rng):
        seen = []

        def record(agent_id, t, distinct_before, location, p):
            seen.append((distinct_before, p))

        sim = MobilitySimulation(50, on_explore=record, on_return=record)
        simulate_trajectory(AgentParams(0.8, 0.7), 200, 50, InterventionSpec(), rng, simulation=sim)
        assert len(seen) == 199
        for distinct, p in seen:
            expected = 0.0 if distinct >= 50 else min(1.0, 0.8 * distinct ** -0.7)
            assert p == pytest.approx(expected)

    @pytest.mark.parametrize("rho, gamma", [(0.6, 0.21), (0.9, 0.5), (0.4, 0.1)])
    def test_explore_frequency_follows_power_law(self, rho, gamma):
        distinct, explored = [], []

        def on_explore(agent_id, t, distinct_before, location, p):
            distinct.append(distinct_before)
            explored.append(1.0)

        def on_return(agent_id, t, distinct_before, location, p):
            distinct.append(distinct_before)
            explored.append(0.0)

        rng = np.random.default_rng(21)
        sim = MobilitySimulation(10_000, on_explore=on_explore, on_return=on_return)
        for i in range(300):
            simulate_trajectory(AgentParams(rho, gamma), 300, 10_000, InterventionSpec(), rng,
                                agent_id=i, simulation=sim)
        s, x = np.asarray(distinct, dtype=np.float64), np.asarray(explored)
        # four contiguous ranges of S with equal event counts
        for chunk in np.array_split(np.argsort(s, kind="stable"), 4):
            assert len(chunk) >= 200
            p = rho * s[chunk] ** -gamma
            z = (x[chunk].sum() - p.sum()) / np.sqrt(np.sum(p * (1.0 - p)))
            assert abs(z) <= 3.0, (rho, gamma, s[chunk].min(), z)

    def test_statistics_summary(self, rng, capsys):
        sim = MobilitySimulation(1000)
        spec = InterventionSpec("hard_p", 0.5)
        for i in range(3):
            simulate_trajectory(AgentParams(0.6, 0.5), 100, 1000, spec, rng, agent_id=i, simulation=sim)
        assert sim.explore_events + sim.return_events == 3 * 99
        sim.show_statistics()
        out = capsys.readouterr().out
        assert "Trajectories: 3" in out
        assert "Mean exploration probability: 0.5000" in out


class TestReturnBranch:
    def test_return_frequencies_follow_counts(self, rng):
        ledger = VisitLedger.from_visits([3, 3, 3, 8], 10)
        assert_allclose(ledger.return_probabilities()[[3, 8]], [0.75, 0.25])
        draws = np.array([ledger.draw_return(rng) for _ in range(20000)])
        assert set(np.unique(draws)) == {3, 8}
        assert np.mean(draws == 3) == pytest.approx(0.75, abs=0.015)

    def test_step_never_explores_when_p_is_zero(self, rng):
        spec = InterventionSpec("hard_p", 0.0, allow_off_grid=True)
        for _ in range(50):
            assert step([2, 5, 2], AgentParams(0.6, 0.5), spec, rng, 10) in (2, 5)

    def test_step_always_explores_when_p_is_one(self, rng):
        spec = InterventionSpec("hard_p", 1.0, allow_off_grid=True)
        for _ in range(50):
            assert step([2, 5, 2], AgentParams(0.6, 0.5), spec, rng, 10) not in (2, 5)


class TestLedger:
    def test_unvisited_pool(self):
        ledger = VisitLedger.from_visits([1, 4, 1], 5)
        assert list(ledger.unvisited()) == [0, 2, 3]
        assert ledger.distinct == 2
        assert ledger.order == [1, 4]

    def test_explore_visited_location_rejected(self):
        ledger = VisitLedger.from_visits([1], 5)
        with pytest.raises(ValueError):
            ledger.explore(1, 0.5)

    def test_return_to_unvisited_rejected(self):
        ledger = VisitLedger.from_visits([1], 5)
        with pytest.raises(ValueError):
            ledger.return_to(2, 0.5)

    def test_location_out_of_range(self):
        with pytest.raises(ValueError):
            VisitLedger.from_visits([7], 5)


class TestTrajectories:
    def test_single_step_trajectory(self, rng):
        traj = simulate_trajectory(AgentParams(0.6, 0.5), 1, 10, InterventionSpec(), rng)
        assert len(traj) == 1
        assert 0 <= traj.visits[0] < 10

    def test_hard_p_one_visits_distinct_locations(self, rng):
        spec = InterventionSpec("hard_p", 1.0, allow_off_grid=True)
        traj = simulate_trajectory(AgentParams(0.6, 0.5), 30, 100, spec, rng)
        assert len(np.unique(traj.visits)) == 30

    def test_hard_p_one_returns_after_exhaustion(self, rng):
        spec = InterventionSpec("hard_p", 1.0, allow_off_grid=True)
        traj = simulate_trajectory(AgentParams(0.6, 0.5), 25, 10, spec, rng)
        assert len(np.unique(traj.visits[:10])) == 10
        assert len(np.unique(traj.visits)) == 10

    def test_hard_p_zero_stays_put(self, rng):
        spec = InterventionSpec("hard_p", 0.0, allow_off_grid=True)
        traj = simulate_trajectory(AgentParams(0.6, 0.5), 50, 100, spec, rng)
        assert np.all(traj.visits == traj.visits[0])

    def test_higher_hard_p_explores_more(self):
        low = simulate_dataset(_manifest(intervention=InterventionSpec("hard_p", 0.1), t=100, d=100))
        high = simulate_dataset(_manifest(intervention=InterventionSpec("hard_p", 0.9), t=100, d=100))
        distinct = lambda trajs: np.mean([len(np.unique(t.visits)) for t in trajs])  # noqa: E731
        assert distinct(high) > distinct(low) + 30


class TestDatasets:
    def test_same_seed_same_dataset(self):
        a = simulate_dataset(_manifest())
        b = simulate_dataset(_manifest())
        for x, y in zip(a, b):
            assert np.array_equal(x.visits, y.visits)
            assert x.params == y.params

    def test_different_seed_different_dataset(self):
        a = simulate_dataset(_manifest(seed=1))
        b = simulate_dataset(_manifest(seed=2))
        assert any(not np.array_equal(x.visits, y.visits) for x, y in zip(a, b))

    def test_worker_count_does_not_change_output(self):
        serial = simulate_dataset(_manifest(n=5))
        parallel = simulate_dataset(_manifest(n=5), workers=2)
        for x, y in zip(serial, parallel):
            assert np.array_equal(x.visits, y.visits)

    def test_shifted_prior_is_used(self):
        manifest = _manifest(n=300, t=2, intervention=InterventionSpec("shift_rho", 0.7))
        rhos = [t.params.rho for t in simulate_dataset(manifest)]
        assert np.mean(rhos) == pytest.approx(0.7, abs=0.02)

    def test_shapes(self):
        trajs = simulate_dataset(_manifest(n=4, t=17, d=9))
        assert [t.agent_id for t in trajs] == [0, 1, 2, 3]
        assert all(t.visits.shape == (17,) for t in trajs)
        assert all(t.visits.max() < 9 for t in trajs)


class TestInterventions:
    def test_thirteen_settings(self):
        ids = [s.dataset_id for s in default_interventions()]
        assert len(ids) == 13 == len(set(ids))
        assert "hard_p=0.5" in ids and "shift_gamma=0.9" in ids

    def test_parse_round_trip(self):
        spec = InterventionSpec.parse("shift_gamma=0.7")
        assert spec == InterventionSpec("shift_gamma", 0.7)
        assert spec.dataset_id == "shift_gamma=0.7"

    def test_off_grid_rejected(self):
        with pytest.raises(ValueError):
            InterventionSpec("shift_rho", 0.3)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            InterventionSpec.parse("teleport=0.5")

    def test_shift_only_moves_its_mean(self):
        prior = InterventionSpec("shift_gamma", 0.9).apply(ParamPrior())
        assert prior == ParamPrior(mu_gamma=0.9)

    def test_manifest_fields_round_trip(self):
        manifest = _manifest("hard_p=0.5", intervention=InterventionSpec("hard_p", 0.5))
        assert DatasetManifest.from_fields(manifest.to_fields()) == manifest
