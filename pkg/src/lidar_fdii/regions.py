"""The unsafe region of the reach-and-avoid drive.

Three faces are given as coefficients; the remaining eleven close the
polygon with tangent lines of two end-cap circles inscribed between the
given faces.
"""
from __future__ import annotations

import numpy as np

from .fdii import UnsafeRegion
from .geometry import ConvexPolygon, HalfPlane

DRIVE_START = (-14.34, 137.05)
DRIVE_GOAL = (-5.00, 135.25)

TOP = ((-0.35, 0.94), -132.74)
BOTTOM_LEFT = ((-0.17, -0.99), 132.5)
BOTTOM_RIGHT = ((0.12, -0.99), 134.62)

LEFT_CAP_X = -12.0
RIGHT_CAP_X = -7.0
LEFT_CAP_DEG = (140.0, 170.0, 200.0, 230.0)
RIGHT_CAP_DEG = (301.0, 325.0, 349.0, 13.0, 37.0, 61.0, 85.0)


def inscribed_circle(ha: HalfPlane, hb: HalfPlane, x: float) -> tuple[np.ndarray, float]:
    """Circle centred at abscissa ``x`` touching both lines from inside."""
    na, nb = np.array(ha.normal), np.array(hb.normal)
    M = np.array([[na[1], 1.0], [nb[1], 1.0]])
    rhs = np.array([-ha.offset - na[0] * x, -hb.offset - nb[0] * x])
    cy, r = np.linalg.solve(M, rhs)
    if r <= 0:
        raise ValueError(f"lines do not enclose a circle at x={x}")
    return np.array([x, cy]), float(r)


def tangent_plane(center, radius: float, deg: float) -> HalfPlane:
    n = np.array([np.cos(np.radians(deg)), np.sin(np.radians(deg))])
    return HalfPlane((float(n[0]), float(n[1])), float(-(n @ center + radius)))


def drive_planes() -> list[HalfPlane]:
    """Fourteen half-planes; the top face comes first, bottom-right last."""
    top = HalfPlane.from_coefficients(*TOP)
    bl = HalfPlane.from_coefficients(*BOTTOM_LEFT)
    br = HalfPlane.from_coefficients(*BOTTOM_RIGHT)
    cl, rl = inscribed_circle(top, bl, LEFT_CAP_X)
    cr, rr = inscribed_circle(top, br, RIGHT_CAP_X)
    left = [tangent_plane(cl, rl, d) for d in LEFT_CAP_DEG]
    right = [tangent_plane(cr, rr, d) for d in RIGHT_CAP_DEG]
    return [top, bl, *left, *right, br]


def drive_region() -> UnsafeRegion:
    poly = ConvexPolygon.from_half_planes(drive_planes(), margin=0.0)
    return UnsafeRegion((poly,), 0.0, (("drive", 0),))
