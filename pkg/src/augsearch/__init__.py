"""Learning depth-image augmentation sequences for sim2real transfer.

Subpackages: `depth_core` (frames, datasets, file I/O), `transforms` (the
augmentation space), `scenegen` (renderer, domains, demonstrations), `nnet`
(network, training, scoring, rollouts), `search` (MCTS), `cli` (pipeline
commands).
"""

__version__ = "0.1.0"
