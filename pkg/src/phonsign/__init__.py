"""Compositional sign classification from hand landmarks.

Submodules: ``graph`` (landmark layouts and skeletal graphs), ``agan``
(graph attention encoder), ``pdm`` (component decomposition), ``ssm``
(bidirectional selective scan), ``hpc`` (prototype classifier), ``model``,
``autograd``, ``data``, ``train``, ``analysis`` and ``cli``.
"""

__version__ = "0.1.0"
