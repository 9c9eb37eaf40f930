"""Sparse fine-tuning and sparse inference laboratory.

Weight sparsity toolkit built around three pillars: a bitmask compressed
weight format with memory-bound matvec kernels, magnitude and N:M pruning
with a gradual prune-then-finetune schedule, and a distillation loss zoo
(cross entropy, logit KD, normalized feature-map KD) wired to a small
manually differentiated sequence model for end-to-end recovery experiments.
INT8 post-training quantization composes with sparsity on top of the same
compressed container.
"""

__version__ = "0.1.0"
