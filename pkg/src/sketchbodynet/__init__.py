"""Sketch-to-body recovery: a small autodiff core, a skinned body model,
synthetic sketch rendering, the three-branch regression network, and its
two-stage training and evaluation pipeline.

The convolution and rasterization kernels come from a compiled extension
when it is available; ``sketchbodynet.kernels.BACKEND`` says which one is
active.
"""

__version__ = "0.1.0"
