from __future__ import annotations

from typing import Callable, Iterable, List, Optional

import numpy as np

# (agent_id, t, distinct_before, location, probability)
VisitHook = Callable[[int, int, int, int, float], None]


class VisitLedger:
    """
    Visit book keeping for one agent over a fixed set of D locations.

    Keeps visit counts, the order in which locations were first visited, and
    the pool of still-unvisited locations, so that both EPR moves are cheap:
    - explore: uniform pick among unvisited locations (swap-remove pool)
    - return: pick a visited location proportionally to its visit count

    Optional hooks fire on every recorded explore or return move.
    """

    def __init__(
        self,
        num_locations: int,
        agent_id: int = 0,
        on_explore: Optional[VisitHook] = None,
        on_return: Optional[VisitHook] = None,
    ) -> None:
        if num_locations < 2:
            raise ValueError("num_locations must be at least 2")
        self.num_locations = int(num_locations)
        self.agent_id = int(agent_id)
        self.counts = np.zeros(self.num_locations, dtype=np.int64)
        self.order: List[int] = []  # first-visit order
        self.visits: List[int] = []
        # unvisited pool with location -> slot index for O(1) removal
        self._pool = np.arange(self.num_locations, dtype=np.int64)
        self._slot = np.arange(self.num_locations, dtype=np.int64)
        self._pool_size = self.num_locations

        self._on_explore = on_explore or (lambda *args: None)
        self._on_return = on_return or (lambda *args: None)

    @classmethod
    def from_visits(cls, visits: Iterable[int], num_locations: int, agent_id: int = 0) -> "VisitLedger":
        ledger = cls(num_locations, agent_id=agent_id)
        for loc in visits:
            ledger._record(int(loc))
        return ledger

    # --- queries --------------------------------------------------------
    @property
    def distinct(self) -> int:
        return len(self.order)

    @property
    def total(self) -> int:
        return len(self.visits)

    @property
    def all_visited(self) -> bool:
        return self._pool_size == 0

    def unvisited(self) -> np.ndarray:
        return np.sort(self._pool[: self._pool_size])

    def return_probabilities(self) -> np.ndarray:
        """P(location) on the return branch, over all D locations."""
        if self.total == 0:
            return np.zeros(self.num_locations)
        return self.counts / self.total

    # --- sampling ---------------------------------------------------------
    def draw_unvisited(self, rng: np.random.Generator) -> int:
        if self._pool_size == 0:
            raise ValueError("every location has been visited")
        return int(self._pool[rng.integers(self._pool_size)])

    def draw_return(self, rng: np.random.Generator) -> int:
        if not self.order:
            raise ValueError("no visited location to return to")
        weights = np.cumsum(self.counts[self.order])
        r = rng.random() * weights[-1]
        idx = int(np.searchsorted(weights, r, side="right"))
        return self.order[min(idx, len(self.order) - 1)]

    # --- recording ----------------------------------------------------------
    def start(self, location: int) -> None:
        if self.visits:
            raise ValueError("ledger already started")
        self._record(location)

    def explore(self, location: int, probability: float) -> None:
        if self.counts[location] != 0:
            raise ValueError(f"location {location} already visited")
        t, distinct_before = self.total, self.distinct
        self._record(location)
        self._on_explore(self.agent_id, t, distinct_before, location, probability)

    def return_to(self, location: int, probability: float) -> None:
        if self.counts[location] == 0:
            raise ValueError(f"location {location} was never visited")
        t, distinct_before = self.total, self.distinct
        self._record(location)
        self._on_return(self.agent_id, t, distinct_before, location, probability)

    def _record(self, location: int) -> None:
        if not 0 <= location < self.num_locations:
            raise ValueError(f"location {location} outside [0, {self.num_locations})")
        if self.counts[location] == 0:
            self.order.append(location)
            # swap-remove from the unvisited pool
            slot = self._slot[location]
            last = self._pool[self._pool_size - 1]
            self._pool[slot] = last
            self._slot[last] = slot
            self._pool[self._pool_size - 1] = location
            self._slot[location] = self._pool_size - 1
            self._pool_size -= 1
        self.counts[location] += 1
        self.visits.append(location)
