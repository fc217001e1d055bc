"""Occluded facial-motion reconstruction in the optical-flow domain."""

__version__ = "0.1.0"
