"""Desk-scale building damage assessment toolkit.

Two-step pipeline (segment footprints, then classify each building crop from
its pre/post pair), an end-to-end difference-image segmenter, the geometry
needed to move between polygons and masks, and a confusion-matrix scorer.
"""

__version__ = "0.1.0"
