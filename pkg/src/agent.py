from __future__ import annotations

from abc import ABC, abstractmethod
from typing import List

import numpy as np

from visit_ledger import VisitLedger


class MobilityAgent(ABC):
    """
    Base class for all agents that move over a discrete location set.

    Attributes
    ----------
    agent_id : int
        Unique identifier (row index in a dataset).
    rho, gamma : float
        Exploration scale and decay the agent was drawn with. Agents whose
        exploration is fixed by an intervention still carry them.
    explore_history : list[bool]
        One entry per move: True for an exploration step.
    """

    def __init__(self, agent_id: int, rho: float, gamma: float) -> None:
        self.agent_id: int = int(agent_id)
        self.rho: float = float(rho)
        self.gamma: float = float(gamma)
        self.explore_history: List[bool] = []

    # ----- strategies must implement this -----------------------------------
    @abstractmethod
    def raw_exploration_probability(self, distinct: int) -> float:
        """Exploration probability given the number of distinct locations so far."""
        ...

    # ----- shared decision logic --------------------------------------------
    def exploration_probability(self, ledger: VisitLedger) -> float:
        """Clamped to [0, 1]; 0 once every location has been visited."""
        if ledger.all_visited:
            return 0.0
        p = self.raw_exploration_probability(ledger.distinct)
        return min(1.0, max(0.0, p))

    def move(self, ledger: VisitLedger, rng: np.random.Generator) -> int:
        """Make one step: explore a new location or return to a known one."""
        p = self.exploration_probability(ledger)
        explore = rng.random() < p
        if explore:
            location = ledger.draw_unvisited(rng)
            ledger.explore(location, p)
        else:
            location = ledger.draw_return(rng)
            ledger.return_to(location, p)
        self.explore_history.append(explore)
        return location
