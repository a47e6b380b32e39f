"""Command-conditioned recurrent agent trained purely by supervised learning.

One policy and one training loop cover online RL, imitation learning,
offline RL, goal-conditioned RL and meta-RL on a CartPole family.
"""

__version__ = "0.1.0"
