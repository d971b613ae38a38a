"""Crowdsourced energy market platform.

Pipeline: a radial-feeder market equilibrium is solved day-ahead over the
SOCP-relaxed branch flow model; nodal prices and type-2 setpoints feed a
realtime incentive LP; offers, responses, and settlements are ordered by a
BFT ordering service onto a hash-chained ledger with deterministic
contracts; an HTTP service exposes the loop to clients.
"""

__version__ = "0.1.0"
