"""Semi-supervised video object segmentation with propagation and correction memory modulators.

A small numpy implementation: reverse-mode tensors, a toy backbone, local and
pool-based matching, entropy reliability, a reliable-patch pool, modulator
assemblies, synthetic data, metrics, training and a command line.
"""

__version__ = "0.1.0"
