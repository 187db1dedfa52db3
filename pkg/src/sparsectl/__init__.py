"""Sparse control-node scheduling and mobility-network rebalancing.

Combinatorial activation problems (which channels, when, and how many at
once) solved exactly through their linear-program relaxations, applied to
staff rebalancing of one-way vehicle-sharing networks, with an
integer-state Monte-Carlo simulator validating the mean-field model.
"""

__version__ = "0.1.0"
