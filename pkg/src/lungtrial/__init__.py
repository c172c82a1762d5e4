"""Desk-scale virtual lung screening trial engine.

Virtual cohort -> voxel thorax phantoms with synthetic nodules -> simulated
CT and chest radiographs -> search-based virtual reader -> ROC endpoints.
"""

__version__ = "0.1.0"
