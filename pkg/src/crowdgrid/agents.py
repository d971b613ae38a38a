"""Simulated crowdsourcee responses so the operation loop runs headlessly.

Each agent owns its RNG stream (seeded per agent), so adding or removing an
agent never perturbs the draws of the others.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AgentPolicy:
    """Accept/reject policy for offers priced at lam + lam_a ($/MWh).

    kinds: ``always_accept``, ``always_reject``, ``threshold`` (accept iff
    price >= rho), ``logistic`` (accept with probability
    sigmoid(kappa (price - rho)) from the agent's own stream).
    """

    kind: str = "always_accept"
    rho: float = 0.0
    kappa: float = 1.0
    seed: int = 0
    _rng: np.random.Generator = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("always_accept", "always_reject", "threshold", "logistic"):
            raise ValueError(f"unknown agent policy {self.kind!r}")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        object.__setattr__(self, "_rng", np.random.default_rng(self.seed))

    def respond(self, price: float, quantity: float = 0.0) -> bool:
        """True = accept. ``quantity`` is carried for future policies."""
        if not math.isfinite(price):
            raise ValueError("offer price must be finite")
        if self.kind == "always_accept":
            return True
        if self.kind == "always_reject":
            return False
        if self.kind == "threshold":
            return price >= self.rho
        z = self.kappa * (price - self.rho)
        prob = 1.0 / (1.0 + math.exp(-min(max(z, -700.0), 700.0)))
        return bool(self._rng.random() < prob)


def from_config(cfg: dict) -> AgentPolicy:
    """Build a policy from scenario JSON: {type, params..., seed}."""
    kind = cfg.get("type", "always_accept").replace("-", "_")
    return AgentPolicy(kind=kind, rho=cfg.get("rho", 0.0),
                       kappa=cfg.get("kappa", 1.0), seed=cfg.get("seed", 0))
