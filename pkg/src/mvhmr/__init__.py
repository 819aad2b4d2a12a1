"""Multi-view human mesh recovery from 2D representations via volumetric fusion."""

__version__ = "0.1.0"
