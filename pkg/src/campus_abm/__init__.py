"""Context-driven drinking-behaviour diffusion on a university campus.

A stochastic agent-based model with calibration by simulated moments and
local/global sensitivity analysis of the context transmission probabilities.
"""

__version__ = "0.1.0"
