"""Frequency-modulated point cloud rendering.

Splatting-based surface estimation, an adaptive-frequency radiance network
with hypernetwork modulation, volume-rendering-based point cloud geometry
optimization, and interactive object editing / scene composition. Exposed
as a library, a CLI (``fpcr``), and an HTTP service.
"""

__version__ = "0.1.0"
