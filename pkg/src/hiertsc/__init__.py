"""Hierarchical multi-agent reinforcement learning for network-wide traffic signal control.

Modules: network (grid topology, phases, regions), simulator (queue-based dynamics, metrics,
baselines), features (observations and regional state), neural (layers, optimizer,
checkpoints), metapolicy, subpolicy, training and cli.
"""

__version__ = "0.1.0"
