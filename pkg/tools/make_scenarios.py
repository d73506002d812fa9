#!/usr/bin/env python3
"""Generate the bundled example scenarios into src/sitecoord/data/.

The mock site is a hand-designed four-vehicle layout with two merge-split
corridors and five crossings, sized so the uncoordinated optima collide in
several zones while the coordinated problem stays comfortably feasible.
Run after editing geometry; tests consume the YAML output.
"""

import math
import sys
from pathlib import Path

import yaml

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from sitecoord.routes import RouteBuilder

DATA = Path(__file__).resolve().parents[1] / "src" / "sitecoord" / "data"


def vehicle_block(vid, waypoints, v_initial="50 km/h"):
    return {
        "id": vid,
        "waypoints": [[round(float(x), 4), round(float(y), 4)] for x, y in waypoints],
        "v_min": "3.6 km/h",
        "v_max": "90 km/h",
        "v_initial": v_initial,
        "a_lon_max": 4.0,
        "a_lat_max": 2.0,
        "weights": {"P": 1.0, "Q": 1.0, "R": 10.0},
    }


def emit(name, vehicles, zones, grid_n):
    doc = {"vehicles": vehicles, "zones": zones, "grid": {"N": grid_n}}
    (DATA / name).write_text(yaml.safe_dump(doc, sort_keys=False, width=100))
    print(f"wrote {DATA / name}")


def s_curve_angle(radius, dy):
    """Turn angle (deg) of a symmetric S-curve covering lateral offset dy."""
    return math.degrees(math.acos(1.0 - dy / (2.0 * radius)))


AUTO_MARGINS = {"auto": {"intersection_margin": 5.0, "merge_margin": 15.0, "lateral_threshold": 2.0}}


def build_mock_site():
    R = 60.0
    th_up = s_curve_angle(R, 70.0)
    th_dn = s_curve_angle(R, 43.0)

    # red: west-east artery along y = 0
    red = RouteBuilder(-450.0, 0.0, 0.0, step=2.0).straight(760.0)

    # blue: S-curve up into the red corridor, shares it to x = 60, S-curve
    # down onto the lower corridor, long east leg
    blue = RouteBuilder(-230.0, -70.0, 0.0, step=2.0)
    blue.straight(80.0)
    blue.arc(R, th_up).arc(R, -th_up)
    blue.straight(60.0 - blue.position[0])
    blue.arc(R, -th_dn).arc(R, th_dn)
    y_low = blue.position[1]
    blue.straight(260.0 - blue.position[0])

    # green: long climb from the south at x = -30, right turn east onto the
    # lower corridor shared with blue, exits north-east
    green = RouteBuilder(-30.0, y_low - 60.0 - 320.0, 90.0, step=2.0)
    green.straight(320.0)
    green.arc(R, -90.0)
    green.straight(190.0 - green.position[0])
    green.arc(R, 40.0)
    green.straight(80.0)

    # black: southbound at x = 180 across red and the lower corridor, right
    # turn west at y = -160, crossing green's climb
    black = RouteBuilder(180.0, 630.0, -90.0, step=2.0)
    black.straight(790.0)
    black.arc(R, -90.0)
    black.straight(300.0)

    return {
        "red": red.waypoints(),
        "blue": blue.waypoints(),
        "green": green.waypoints(),
        "black": black.waypoints(),
    }


def build_crossing_pair():
    # perpendicular straights; a starts 20 m closer to the crossing
    a = RouteBuilder(-180.0, 0.0, 0.0, step=2.0).straight(400.0)
    b = RouteBuilder(0.0, -200.0, 90.0, step=2.0).straight(400.0)
    return {"a": a.waypoints(), "b": b.waypoints()}


def build_merge_pair():
    R = 70.0
    th = s_curve_angle(R, 60.0)
    th2 = s_curve_angle(R, 50.0)
    lead = RouteBuilder(-260.0, 0.0, 0.0, step=2.0).straight(520.0)
    join = RouteBuilder(-198.0, -60.0, 0.0, step=2.0)
    join.straight(40.0)
    join.arc(R, th).arc(R, -th)               # up onto the corridor
    join.straight(80.0 - join.position[0])
    join.arc(R, -th2).arc(R, th2)             # split back down
    join.straight(120.0)
    return {"lead": lead.waypoints(), "join": join.waypoints()}


def build_triple_intersection():
    a = RouteBuilder(-210.0, 0.0, 0.0, step=2.0).straight(420.0)
    b = RouteBuilder(0.0, -218.0, 90.0, step=2.0).straight(420.0)
    c = RouteBuilder(-160.0, -160.0, 45.0, step=2.0).straight(440.0)
    return {"a": a.waypoints(), "b": b.waypoints(), "c": c.waypoints()}


def build_staggered_pair():
    a = RouteBuilder(-60.0, 0.0, 0.0, step=2.0).straight(400.0)
    b = RouteBuilder(0.0, -340.0, 90.0, step=2.0).straight(420.0)
    return {"a": a.waypoints(), "b": b.waypoints()}


def main():
    DATA.mkdir(parents=True, exist_ok=True)
    emit(
        "mock_site.yaml",
        [vehicle_block(vid, wps) for vid, wps in build_mock_site().items()],
        zones=AUTO_MARGINS,
        grid_n=100,
    )
    emit("crossing_pair.yaml", [vehicle_block(v, w) for v, w in build_crossing_pair().items()],
         zones=AUTO_MARGINS, grid_n=50)
    emit("merge_pair.yaml", [vehicle_block(v, w) for v, w in build_merge_pair().items()],
         zones=AUTO_MARGINS, grid_n=50)
    emit("triple_intersection.yaml", [vehicle_block(v, w) for v, w in build_triple_intersection().items()],
         zones=AUTO_MARGINS, grid_n=50)
    emit("staggered_pair.yaml", [vehicle_block(v, w) for v, w in build_staggered_pair().items()],
         zones=AUTO_MARGINS, grid_n=50)


if __name__ == "__main__":
    main()
