"""Unsupervised domain adaptation benchmark for vibration-based fault diagnosis.

One shared 1-D CNN backbone, three adaptation methods (DANN, multi-kernel
MMD, AdaBN), a Fourier-feature preprocessing chain and a 12-task harness,
all on a small numpy autodiff engine.
"""

__version__ = "0.1.0"
