"""Full-duplex multimodal sequence engine with modality-routed experts.

Subpackages:
    numkernel   dense numeric ops with a reverse-mode gradient tape
    samoe       routed two-expert transformer over a unified KV cache
    blockcodec  interleaved time-block token format and history policy
    duplex_sim  deterministic gridworld, task scripts, dataset generation
    trainer     staged training, AdamW, binary checkpoints
    evalharness streaming episode runner and duplex metrics
"""

__version__ = "0.1.0"
