"""Gated-reasoning navigation stack: gridworld simulator, decay-scheduled
observation encoding, linguistic memory, a Gaussian waypoint policy, and an
imitation + expert-guided RL training recipe."""

__version__ = "0.1.0"
