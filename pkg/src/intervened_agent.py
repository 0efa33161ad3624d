from agent import MobilityAgent


class HardInterventionAgent(MobilityAgent):
    """
    Agent whose exploration probability has been fixed to a constant.

    rho and gamma are still drawn and recorded, but the decision to explore
    ignores them: p = probability while unvisited locations remain, 0 after.
    """

    def __init__(self, agent_id: int, probability: float, rho: float = 0.0, gamma: float = 0.0) -> None:
        if not 0.0 <= probability <= 1.0:
            raise ValueError("probability must be in [0, 1]")
        super().__init__(agent_id, rho, gamma)
        self.probability = float(probability)

    def raw_exploration_probability(self, distinct: int) -> float:
        return self.probability
