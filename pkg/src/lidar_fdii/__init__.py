"""Cooperative LiDAR spoofing detection and safe control.

Modules: ``geometry`` (polygons, projections), ``scene`` (ray-cast LiDAR),
``attacks`` (spoofing injection), ``perception`` (occupied areas),
``fdii`` (detection, classification, unsafe region), ``control``
(barrier-constrained MPC), ``scenario`` (file-driven runs), ``cli``.
"""
__version__ = "0.1.0"
