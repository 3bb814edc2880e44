"""Clipped affine power control for energy-harvesting transmitters.

Closed-form policies, reinforcement-learning parameter tuning, discretized
policy-iteration baselines and a Monte-Carlo evaluation harness.
"""

__version__ = "0.1.0"
