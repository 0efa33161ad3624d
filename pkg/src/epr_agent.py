from agent import MobilityAgent


class EPRAgent(MobilityAgent):
    """
    Exploration-and-preferential-return agent.

    Each EPRAgent has:
      - rho: exploration scale, in (0, 1]
      - gamma: exploration decay, >= 0

    With S distinct locations visited so far the agent explores an
    unvisited location with probability
        p = rho * S^(-gamma)
    and otherwise returns to a visited location proportionally to how
    often it has been there.
    """

    def __init__(self, agent_id: int, rho: float = 0.6, gamma: float = 0.5) -> None:
        if not 0.0 < rho <= 1.0:
            raise ValueError("rho must be in (0, 1]")
        if gamma < 0.0:
            raise ValueError("gamma must be non-negative")
        super().__init__(agent_id, rho, gamma)

    def raw_exploration_probability(self, distinct: int) -> float:
        if distinct < 1:
            raise ValueError("exploration probability needs a non-empty prefix")
        return self.rho * float(distinct) ** (-self.gamma)
