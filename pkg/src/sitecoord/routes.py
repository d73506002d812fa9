"""Turtle-style route construction from straight and arc segments.

Convenience for building scenario geometry programmatically; the solvers
only ever see the sampled waypoint polylines.
"""

from __future__ import annotations

import math

import numpy as np


class RouteBuilder:
    """Chain straights and circular arcs into a waypoint polyline."""

    def __init__(self, x: float = 0.0, y: float = 0.0, heading_deg: float = 0.0, step: float = 2.0):
        self._pts: list[tuple[float, float]] = [(x, y)]
        self._heading = math.radians(heading_deg)
        self.step = step

    def straight(self, length: float) -> "RouteBuilder":
        n = max(1, int(math.ceil(length / self.step)))
        ds = length / n
        x, y = self._pts[-1]
        for _ in range(n):
            x += ds * math.cos(self._heading)
            y += ds * math.sin(self._heading)
            self._pts.append((x, y))
        return self

    def arc(self, radius: float, angle_deg: float) -> "RouteBuilder":
        """Circular arc; positive angle turns left, negative turns right."""
        angle = math.radians(angle_deg)
        arc_len = abs(radius * angle)
        n = max(2, int(math.ceil(arc_len / self.step)))
        dth = angle / n
        ds = arc_len / n
        x, y = self._pts[-1]
        for _ in range(n):
            self._heading += dth
            x += ds * math.cos(self._heading - dth / 2.0)
            y += ds * math.sin(self._heading - dth / 2.0)
            self._pts.append((x, y))
        return self

    def jump(self, x: float, y: float, heading_deg: float) -> "RouteBuilder":
        self._pts = [(x, y)]
        self._heading = math.radians(heading_deg)
        return self

    @property
    def position(self) -> tuple[float, float]:
        return self._pts[-1]

    @property
    def heading_deg(self) -> float:
        return math.degrees(self._heading)

    def waypoints(self) -> np.ndarray:
        return np.array(self._pts)
