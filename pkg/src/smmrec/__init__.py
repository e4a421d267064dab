"""Session-based next-item recommendation via masked sequence modeling.

Subpackages are imported lazily by the CLI so that lightweight commands
(e.g. dumping augmented examples) never pay the numba/JIT import cost.
"""

__version__ = "0.1.0"
