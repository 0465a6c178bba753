"""Concept segmentation loop on a synthetic micro-world.

Rule induction from split reference mosaics, proxy-verified rewards,
group-relative policy optimization, concept translation into a promptable
mask head, and presence-based routing.
"""

__version__ = "0.1.0"
