"""Multi-scale tissue-graph transformer survival pipeline.

Desk-scale implementation of a two-magnification spatial-graph survival
model: K-NN tissue graphs, GAT patch encoders, decoupled structural
propagation, kernelized linear attention with cross-scale fusion, a
discrete-time hazard loss, and tissue/cell-level interpretability
statistics (per-patch risk maps and rank-based Cox analysis of cell
features).
"""

__version__ = "0.1.0"
