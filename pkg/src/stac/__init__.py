"""Stackelberg actor-critic learning.

Leader updates follow the implicit total derivative of the leader objective,
with the follower Hessian inverted approximately by (regularized) conjugate
gradient. Individual-gradient actor-critic baselines share the same code path.
"""

__version__ = "0.1.0"
