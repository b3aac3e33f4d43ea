"""Region-attention video emotion classifier with noisy-student self-training.

The public surface lives in the submodules: ``tensor`` (autodiff core),
``backbone`` and ``attention`` (network pieces), ``model``, ``training``,
``selftrain``, ``augment``, ``geometry``, ``data``, ``checkpoint``,
``config`` and ``cli``.
"""

__version__ = "0.1.0"
