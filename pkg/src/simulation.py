"""
Observational and interventional EPR trajectory simulation.

An agent starts at a uniformly drawn location. Each further step it
explores an unvisited location with probability p = rho * S^(-gamma)
(S = distinct locations so far), or returns to a visited location with
probability proportional to its visit count. Interventions either shift
the mean of the rho/gamma priors or pin p to a constant.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from agent import MobilityAgent
from epr_agent import EPRAgent
from intervened_agent import HardInterventionAgent
from utils import SimulationError
from visit_ledger import VisitHook, VisitLedger

logger = logging.getLogger(__name__)

SHIFT_GRID = (0.1, 0.4, 0.7, 0.9)
HARD_P_GRID = (0.1, 0.25, 0.5, 0.75, 0.9)
INTERVENTION_KINDS = ("none", "shift_rho", "shift_gamma", "hard_p")
MAX_REJECTIONS = 10_000
DATASET_VERSION = 1


@dataclass(frozen=True)
class AgentParams:
    rho: float
    gamma: float

    def __post_init__(self) -> None:
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must be in (0, 1], got {self.rho}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class ParamPrior:
    """Gaussian priors of rho and gamma (truncated to valid ranges by rejection)."""

    mu_rho: float = 0.6
    sigma_rho: float = 0.1
    mu_gamma: float = 0.5
    sigma_gamma: float = 0.1

    def __post_init__(self) -> None:
        if self.sigma_rho < 0 or self.sigma_gamma < 0:
            raise ValueError("prior standard deviations must be non-negative")


@dataclass(frozen=True)
class InterventionSpec:
    """
    kind: "none", "shift_rho", "shift_gamma" (value = new prior mean) or
    "hard_p" (value = constant exploration probability).
    """

    kind: str = "none"
    value: float = 0.0
    allow_off_grid: bool = False

    def __post_init__(self) -> None:
        if self.kind not in INTERVENTION_KINDS:
            raise ValueError(f"unknown intervention kind '{self.kind}'")
        if self.kind == "hard_p" and not 0.0 <= self.value <= 1.0:
            raise ValueError("hard_p value must be in [0, 1]")
        if self.allow_off_grid or self.kind == "none":
            return
        grid = HARD_P_GRID if self.kind == "hard_p" else SHIFT_GRID
        if not any(np.isclose(self.value, g) for g in grid):
            raise ValueError(f"{self.kind}={self.value} is off the grid {grid} (set allow_off_grid)")

    @property
    def dataset_id(self) -> str:
        return "none" if self.kind == "none" else f"{self.kind}={self.value:g}"

    def apply(self, prior: ParamPrior) -> ParamPrior:
        if self.kind == "shift_rho":
            return replace(prior, mu_rho=self.value)
        if self.kind == "shift_gamma":
            return replace(prior, mu_gamma=self.value)
        return prior

    @classmethod
    def parse(cls, text: str, allow_off_grid: bool = False) -> "InterventionSpec":
        """'none', 'hard_p=0.5', 'shift_rho=0.4', ..."""
        if text == "none":
            return cls()
        kind, sep, value = text.partition("=")
        if not sep:
            raise ValueError(f"cannot parse intervention '{text}'")
        return cls(kind=kind.strip(), value=float(value), allow_off_grid=allow_off_grid)


def default_interventions() -> List[InterventionSpec]:
    """The 13 interventional settings: 4 rho shifts, 4 gamma shifts, 5 hard p."""
    out = [InterventionSpec("hard_p", v) for v in HARD_P_GRID]
    out += [InterventionSpec("shift_gamma", v) for v in SHIFT_GRID]
    out += [InterventionSpec("shift_rho", v) for v in SHIFT_GRID]
    return out


@dataclass(frozen=True)
class DatasetManifest:
    """Everything needed to regenerate a dataset byte for byte."""

    dataset_id: str
    n_trajectories: int
    n_steps: int
    n_locations: int
    prior: ParamPrior = field(default_factory=ParamPrior)
    intervention: InterventionSpec = field(default_factory=InterventionSpec)
    seed: int = 0
    explore_target: str = "uniform"
    version: int = DATASET_VERSION

    def __post_init__(self) -> None:
        if self.n_trajectories < 1:
            raise ValueError("n_trajectories must be >= 1")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.n_locations < 2:
            raise ValueError("n_locations must be >= 2")
        if self.explore_target != "uniform":
            raise ValueError("only the uniform exploration target is implemented")

    def to_fields(self) -> Dict[str, str]:
        fields = {
            "version": str(self.version),
            "dataset_id": self.dataset_id,
            "N": str(self.n_trajectories),
            "T": str(self.n_steps),
            "D": str(self.n_locations),
        }
        fields.update({k: repr(float(v)) for k, v in asdict(self.prior).items()})
        fields.update({
            "intervention": self.intervention.kind,
            "intervention_value": repr(float(self.intervention.value)),
            "allow_off_grid": str(int(self.intervention.allow_off_grid)),
            "seed": str(self.seed),
            "explore_target": self.explore_target,
        })
        return fields

    @classmethod
    def from_fields(cls, fields: Dict[str, str]) -> "DatasetManifest":
        version = int(fields.get("version", -1))
        if version != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        prior = ParamPrior(**{k: float(fields[k]) for k in ("mu_rho", "sigma_rho", "mu_gamma", "sigma_gamma")})
        intervention = InterventionSpec(
            kind=fields["intervention"],
            value=float(fields["intervention_value"]),
            allow_off_grid=bool(int(fields.get("allow_off_grid", "0"))),
        )
        return cls(
            dataset_id=fields["dataset_id"],
            n_trajectories=int(fields["N"]),
            n_steps=int(fields["T"]),
            n_locations=int(fields["D"]),
            prior=prior,
            intervention=intervention,
            seed=int(fields["seed"]),
            explore_target=fields.get("explore_target", "uniform"),
            version=version,
        )


@dataclass
class Trajectory:
    agent_id: int
    visits: np.ndarray
    params: AgentParams

    def __len__(self) -> int:
        return len(self.visits)


# ----- sampling --------------------------------------------------------------
def sample_agent_params(prior: ParamPrior, rng: np.random.Generator,
                        max_rejections: int = MAX_REJECTIONS) -> AgentParams:
    """Draw (rho, gamma) from their Gaussians, rejecting invalid draws."""
    rho = _truncated_draw(prior.mu_rho, prior.sigma_rho, rng, lambda v: 0.0 < v <= 1.0, "rho", max_rejections)
    gamma = _truncated_draw(prior.mu_gamma, prior.sigma_gamma, rng, lambda v: v >= 0.0, "gamma", max_rejections)
    return AgentParams(rho=rho, gamma=gamma)


def _truncated_draw(mu: float, sigma: float, rng: np.random.Generator, valid, name: str,
                    max_rejections: int) -> float:
    if sigma == 0.0:
        if not valid(mu):
            raise SimulationError(f"degenerate prior for {name} at invalid value {mu}")
        return float(mu)
    for _ in range(max_rejections):
        value = float(rng.normal(mu, sigma))
        if valid(value):
            return value
    raise SimulationError(
        f"prior Normal({mu}, {sigma}^2) for {name} produced no valid draw in {max_rejections} tries"
    )


def make_agent(agent_id: int, params: AgentParams, intervention: InterventionSpec) -> MobilityAgent:
    if intervention.kind == "hard_p":
        return HardInterventionAgent(agent_id, intervention.value, rho=params.rho, gamma=params.gamma)
    return EPRAgent(agent_id, rho=params.rho, gamma=params.gamma)


def exploration_probability(prefix: Sequence[int], params: AgentParams,
                            num_locations: Optional[int] = None) -> float:
    """clamp(rho * S^(-gamma), 0, 1); 0 when all num_locations are visited."""
    if len(prefix) == 0:
        raise ValueError("prefix must be non-empty")
    distinct = len(set(int(v) for v in prefix))
    if num_locations is not None and distinct >= num_locations:
        return 0.0
    return min(1.0, max(0.0, params.rho * float(distinct) ** (-params.gamma)))


def step(prefix: Sequence[int], params: AgentParams, intervention: InterventionSpec,
         rng: np.random.Generator, num_locations: int) -> int:
    """Next location after `prefix`, drawn exactly as in simulate_trajectory."""
    if len(prefix) == 0:
        raise ValueError("prefix must be non-empty")
    ledger = VisitLedger.from_visits(prefix, num_locations)
    agent = make_agent(0, params, intervention)
    return agent.move(ledger, rng)


# ----- simulation loop ---------------------------------------------------------
class MobilitySimulation:
    """
    Runs agents over a location set and tracks explore/return statistics.

    Optional hooks receive (agent_id, t, distinct_before, location, p) for
    every move, which is how the exploration-law checks observe decisions.
    """

    def __init__(self, num_locations: int, on_explore: Optional[VisitHook] = None,
                 on_return: Optional[VisitHook] = None) -> None:
        if num_locations < 2:
            raise ValueError("num_locations must be at least 2")
        self.num_locations = int(num_locations)
        self.explore_events = 0
        self.return_events = 0
        self.probability_sum = 0.0
        self.observed_moves = 0  # moves seen through the hooks
        self.trajectories: List[Trajectory] = []
        self._user_explore = on_explore
        self._user_return = on_return

    def _on_explore(self, agent_id, t, distinct_before, location, p):
        self.explore_events += 1
        self.observed_moves += 1
        self.probability_sum += p
        if self._user_explore is not None:
            self._user_explore(agent_id, t, distinct_before, location, p)

    def _on_return(self, agent_id, t, distinct_before, location, p):
        self.return_events += 1
        self.observed_moves += 1
        self.probability_sum += p
        if self._user_return is not None:
            self._user_return(agent_id, t, distinct_before, location, p)

    def run_agent(self, agent: MobilityAgent, params: AgentParams, n_steps: int,
                  rng: np.random.Generator) -> Trajectory:
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        ledger = VisitLedger(self.num_locations, agent_id=agent.agent_id,
                             on_explore=self._on_explore, on_return=self._on_return)
        ledger.start(int(rng.integers(self.num_locations)))
        for _ in range(n_steps - 1):
            agent.move(ledger, rng)
        traj = Trajectory(agent.agent_id, np.asarray(ledger.visits, dtype=np.int64), params)
        self.trajectories.append(traj)
        return traj

    def add(self, trajectory: Trajectory) -> None:
        """Register a trajectory simulated elsewhere (e.g. in a worker process)."""
        self.trajectories.append(trajectory)
        moves = len(trajectory) - 1
        explored = len(np.unique(trajectory.visits)) - 1
        self.explore_events += explored
        self.return_events += moves - explored

    def mean_distinct(self) -> float:
        if not self.trajectories:
            return 0.0
        return float(np.mean([len(np.unique(t.visits)) for t in self.trajectories]))

    def show_statistics(self) -> None:
        moves = self.explore_events + self.return_events
        print("\n" + "=" * 60)
        print("SIMULATION STATISTICS")
        print("=" * 60)
        print(f"Trajectories: {len(self.trajectories)}")
        print(f"Moves: {moves} (explore {self.explore_events}, return {self.return_events})")
        if moves:
            print(f"Explore frequency: {self.explore_events / moves:.4f}")
        if self.observed_moves:
            print(f"Mean exploration probability: {self.probability_sum / self.observed_moves:.4f}")
        print(f"Mean distinct locations: {self.mean_distinct():.2f}")
        print("=" * 60 + "\n")


def simulate_trajectory(params: AgentParams, n_steps: int, num_locations: int,
                        intervention: InterventionSpec, rng: np.random.Generator,
                        agent_id: int = 0, simulation: Optional[MobilitySimulation] = None) -> Trajectory:
    """First visit uniform, then `n_steps - 1` EPR moves."""
    sim = simulation or MobilitySimulation(num_locations)
    agent = make_agent(agent_id, params, intervention)
    return sim.run_agent(agent, params, n_steps, rng)


def _simulate_agent(args: Tuple[DatasetManifest, int, np.random.SeedSequence]) -> Trajectory:
    manifest, agent_id, seed = args
    rng = np.random.default_rng(seed)
    prior = manifest.intervention.apply(manifest.prior)
    params = sample_agent_params(prior, rng)
    return simulate_trajectory(params, manifest.n_steps, manifest.n_locations,
                               manifest.intervention, rng, agent_id=agent_id)


def simulate_dataset(manifest: DatasetManifest, path=None, workers: int = 1) -> List[Trajectory]:
    """
    N independent trajectories, agent i driven by the i-th child stream of
    the manifest seed. The result is the same for any number of workers.
    When `path` is given the dataset is written there with its manifest.
    """
    seeds = np.random.SeedSequence(manifest.seed).spawn(manifest.n_trajectories)
    jobs = [(manifest, i, seeds[i]) for i in range(manifest.n_trajectories)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            trajectories = list(pool.map(_simulate_agent, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        trajectories = [_simulate_agent(job) for job in jobs]

    sim = MobilitySimulation(manifest.n_locations)
    for traj in trajectories:
        sim.add(traj)
    logger.info("[simulate] %s: %d trajectories, mean distinct %.2f, explore freq %.4f",
                manifest.dataset_id, len(trajectories), sim.mean_distinct(),
                sim.explore_events / max(sim.explore_events + sim.return_events, 1))

    if path is not None:
        from data_handler import write_dataset

        write_dataset(path, manifest, trajectories)
    return trajectories
