"""owlab: open-world learning lab.

Post-hoc OOD scoring on embedding dumps, closed-form rectification and
sparsification theory with Monte-Carlo cross-checks, augmentation-graph
spectral analysis, and a prototype-based contrastive EM simulator — all at
desk scale.
"""

__version__ = "0.1.0"
