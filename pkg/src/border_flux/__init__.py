"""Mobility and social-media indicators for sudden cross-border movement.

The pipeline ingests xDR-style event exports and geotagged posts, derives
cohort, placement, flow, loss and sentiment aggregates, and publishes them
only after small-cell suppression.
"""

__version__ = "0.1.0"
