"""Set matching for episodic few-shot training.

Measures local feature sets with an entropy-regularized optimal-transport
metric whose regularization strength is predicted per pair, and calibrates
feature encoders with chain-decomposed soft-label supervision.
"""

__version__ = "0.1.0"
