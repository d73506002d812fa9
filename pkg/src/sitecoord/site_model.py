"""Site description: vehicle paths, curvature and conflict zones.

A site is a set of fixed vehicle routes through a confined area. Routes may
cross at isolated points (intersection conflict zones) or share a stretch of
road (merge-split conflict zones). Everything here is immutable after
construction and safe to share between solver runs.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

INTERSECTION = "intersection"
MERGE_SPLIT = "merge_split"

# Defaults for merge-split separation when a scenario does not spell them out:
# 0.5 s headway, no extra distance offset (absorbed into the zone margins).
DEFAULT_TIME_HEADWAY = 0.5
DEFAULT_DISTANCE_OFFSET = 0.0


class ScenarioError(ValueError):
    """A scenario document is malformed or violates a model invariant."""


class DegenerateGeometryError(ValueError):
    """Path geometry is unusable (e.g. duplicate consecutive waypoints)."""


@dataclass(frozen=True)
class Waypoint:
    x: float
    y: float


@dataclass(frozen=True)
class VehicleParams:
    """Per-vehicle limits, start state and objective weights (SI units)."""

    v_min: float = 1.0
    v_max: float = 25.0
    a_lon_max: float = 4.0
    a_lat_max: float = 2.0
    v_initial: float = 50.0 / 3.6
    a_initial: float = 0.0
    weight_accel: float = 1.0
    weight_jerk: float = 1.0
    weight_time: float = 10.0

    def validate(self, where: str) -> None:
        if not (0.0 < self.v_min <= self.v_initial <= self.v_max):
            raise ScenarioError(
                f"{where}: need 0 < v_min <= v_initial <= v_max "
                f"(got v_min={self.v_min}, v_initial={self.v_initial}, "
                f"v_max={self.v_max}); a zero v_min is not allowed because "
                f"the spatial model is singular at standstill"
            )
        if self.a_lon_max <= 0.0:
            raise ScenarioError(f"{where}.a_lon_max: must be > 0")
        if self.a_lat_max <= 0.0:
            raise ScenarioError(f"{where}.a_lat_max: must be > 0")
        for name in ("weight_accel", "weight_jerk", "weight_time"):
            if getattr(self, name) < 0.0:
                raise ScenarioError(f"{where}.{name}: must be >= 0")


@dataclass(frozen=True)
class Path:
    """A fixed route, arc-length parameterized, with a curvature profile."""

    vehicle_id: str
    waypoints: np.ndarray          # (n, 2) meters
    cumulative_arclength: np.ndarray   # (n,) meters, 0 at first waypoint
    curvature: np.ndarray          # (n,) 1/m, nonnegative magnitude

    def __post_init__(self):
        wp = np.asarray(self.waypoints, dtype=float)
        if wp.ndim != 2 or wp.shape[1] != 2 or wp.shape[0] < 2:
            raise ScenarioError(
                f"path[{self.vehicle_id}].waypoints: need at least 2 [x, y] pairs"
            )
        if not np.all(np.isfinite(wp)):
            raise ScenarioError(f"path[{self.vehicle_id}].waypoints: non-finite coordinate")
        s = np.asarray(self.cumulative_arclength, dtype=float)
        if s[0] != 0.0 or np.any(np.diff(s) <= 0.0):
            raise ScenarioError(
                f"path[{self.vehicle_id}]: cumulative arc-length must start at 0 "
                f"and be strictly increasing"
            )
        k = np.asarray(self.curvature, dtype=float)
        if not np.all(np.isfinite(k)):
            raise ScenarioError(f"path[{self.vehicle_id}].curvature: non-finite sample")
        object.__setattr__(self, "waypoints", wp)
        object.__setattr__(self, "cumulative_arclength", s)
        object.__setattr__(self, "curvature", k)

    @property
    def length(self) -> float:
        return float(self.cumulative_arclength[-1])

    def curvature_at(self, p) -> np.ndarray:
        """Curvature magnitude at arc-length position(s) p, linearly interpolated."""
        return np.interp(p, self.cumulative_arclength, self.curvature)

    def point_at(self, p) -> np.ndarray:
        """Cartesian point(s) at arc-length position(s) p."""
        x = np.interp(p, self.cumulative_arclength, self.waypoints[:, 0])
        y = np.interp(p, self.cumulative_arclength, self.waypoints[:, 1])
        return np.stack(np.broadcast_arrays(x, y), axis=-1)


@dataclass(frozen=True)
class ZoneMember:
    vehicle_id: str
    p_in: float
    p_out: float
    time_headway: float = 0.0
    distance_offset: float = 0.0


@dataclass(frozen=True)
class ConflictZone:
    """A mutually exclusive stretch of road shared by two or more routes."""

    zone_id: str
    kind: str                      # INTERSECTION or MERGE_SPLIT
    members: tuple[ZoneMember, ...]

    def member(self, vehicle_id: str) -> ZoneMember:
        for m in self.members:
            if m.vehicle_id == vehicle_id:
                return m
        raise KeyError(f"vehicle {vehicle_id!r} is not a member of zone {self.zone_id}")

    def vehicle_ids(self) -> list[str]:
        return [m.vehicle_id for m in self.members]

    def validate(self, paths: dict[str, Path], where: str) -> None:
        if self.kind not in (INTERSECTION, MERGE_SPLIT):
            raise ScenarioError(f"{where}.kind: unknown kind {self.kind!r}")
        if len(self.members) < 2:
            raise ScenarioError(
                f"{where}.members: a conflict zone needs at least 2 members"
            )
        seen = set()
        for i, m in enumerate(self.members):
            mw = f"{where}.members[{i}]"
            if m.vehicle_id not in paths:
                raise ScenarioError(f"{mw}.vehicle: unknown vehicle {m.vehicle_id!r}")
            if m.vehicle_id in seen:
                raise ScenarioError(f"{mw}.vehicle: duplicate member {m.vehicle_id!r}")
            seen.add(m.vehicle_id)
            if not m.p_in < m.p_out:
                raise ScenarioError(f"{mw}: p_in must be < p_out")
            L = paths[m.vehicle_id].length
            if m.p_in < -1e-9 or m.p_out > L + 1e-9:
                raise ScenarioError(
                    f"{mw}: [{m.p_in}, {m.p_out}] outside path range [0, {L}]"
                )


@dataclass(frozen=True)
class Scenario:
    """Immutable site description consumed by the solvers."""

    paths: dict[str, Path]
    zones: tuple[ConflictZone, ...]
    vehicle_params: dict[str, VehicleParams]
    grid_n: int

    def __post_init__(self):
        if self.grid_n < 2:
            raise ScenarioError("grid.N: must be >= 2")
        for vid, params in self.vehicle_params.items():
            params.validate(f"vehicles[{vid}]")
        for vid in self.paths:
            if vid not in self.vehicle_params:
                raise ScenarioError(f"vehicles[{vid}]: missing parameters")
        for i, z in enumerate(self.zones):
            z.validate(self.paths, f"zones[{i}]({z.zone_id})")

    @property
    def vehicle_ids(self) -> list[str]:
        return sorted(self.paths)

    def zones_for(self, vehicle_id: str) -> list[ConflictZone]:
        """Zones on one vehicle's path, ordered by entry position."""
        zs = [z for z in self.zones if vehicle_id in z.vehicle_ids()]
        zs.sort(key=lambda z: z.member(vehicle_id).p_in)
        return zs


def polyline_arclength(waypoints: np.ndarray) -> np.ndarray:
    wp = np.asarray(waypoints, dtype=float)
    seg = np.linalg.norm(np.diff(wp, axis=0), axis=1)
    if np.any(seg < 1e-12):
        raise DegenerateGeometryError("duplicate consecutive waypoints")
    return np.concatenate([[0.0], np.cumsum(seg)])


def compute_curvature(waypoints, smoothing_window: int = 3) -> np.ndarray:
    """Per-waypoint curvature magnitude of a polyline.

    Uses the circumscribed circle through each interior waypoint triple
    (Menger curvature); endpoints copy their neighbor's value. An optional
    moving average damps sampling noise on hand-drawn routes.
    """
    wp = np.asarray(waypoints, dtype=float)
    n = wp.shape[0]
    if n < 2:
        raise DegenerateGeometryError("need at least 2 waypoints")
    polyline_arclength(wp)  # rejects duplicate consecutive points
    if n == 2:
        return np.zeros(2)
    a = wp[:-2]
    b = wp[1:-1]
    c = wp[2:]
    ab = b - a
    bc = c - b
    ac = c - a
    cross = ab[:, 0] * ac[:, 1] - ab[:, 1] * ac[:, 0]
    denom = (
        np.linalg.norm(ab, axis=1)
        * np.linalg.norm(bc, axis=1)
        * np.linalg.norm(ac, axis=1)
    )
    kappa = np.zeros(n)
    interior = np.where(denom > 1e-12, 2.0 * np.abs(cross) / np.maximum(denom, 1e-300), 0.0)
    kappa[1:-1] = interior
    kappa[0] = kappa[1]
    kappa[-1] = kappa[-2]
    if smoothing_window and smoothing_window > 1 and n > smoothing_window:
        kernel = np.ones(smoothing_window) / smoothing_window
        pad = smoothing_window // 2
        padded = np.concatenate([np.repeat(kappa[0], pad), kappa, np.repeat(kappa[-1], pad)])
        kappa = np.convolve(padded, kernel, mode="valid")[:n]
    return kappa


def make_path(vehicle_id: str, waypoints, smoothing_window: int = 3) -> Path:
    wp = np.asarray(waypoints, dtype=float)
    return Path(
        vehicle_id=vehicle_id,
        waypoints=wp,
        cumulative_arclength=polyline_arclength(wp),
        curvature=compute_curvature(wp, smoothing_window=smoothing_window),
    )


# ---------------------------------------------------------------------------
# Conflict zone detection


def _resample(path: Path, step: float) -> tuple[np.ndarray, np.ndarray]:
    """Dense (arclength, point) samples along a path at roughly `step` spacing."""
    n = max(2, int(math.ceil(path.length / step)) + 1)
    s = np.linspace(0.0, path.length, n)
    return s, path.point_at(s)


def _point_segment_distances(points: np.ndarray, polyline: np.ndarray) -> np.ndarray:
    """Min distance from each point to a polyline (all segments, vectorized)."""
    a = polyline[:-1]           # (m, 2)
    d = polyline[1:] - a        # (m, 2)
    dd = np.einsum("ij,ij->i", d, d)
    # t[i, j]: projection parameter of point i onto segment j, clamped to [0, 1]
    diff = points[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("ijk,jk->ij", diff, d) / np.maximum(dd, 1e-300), 0.0, 1.0)
    proj = a[None, :, :] + t[:, :, None] * d[None, :, :]
    dist = np.linalg.norm(points[:, None, :] - proj, axis=2)
    return dist.min(axis=1)


def _closest_arclength(point: np.ndarray, s: np.ndarray, pts: np.ndarray) -> float:
    """Arc-length of the dense sample closest to `point` (fine-grained enough
    that nearest-sample beats segment projection bookkeeping)."""
    i = int(np.argmin(np.linalg.norm(pts - point[None, :], axis=1)))
    return float(s[i])


def _segment_crossings(pa: np.ndarray, pb: np.ndarray) -> list[tuple[int, float, int, float]]:
    """Proper (transversal) crossings between two polylines.

    Returns (segment index on a, param on segment, index on b, param) tuples.
    Collinear overlaps are ignored; those stretches belong to merge detection.
    """
    out = []
    a0 = pa[:-1]
    a1 = pa[1:]
    for j in range(len(pb) - 1):
        b0, b1 = pb[j], pb[j + 1]
        r = a1 - a0
        q = b1 - b0
        denom = r[:, 0] * q[1] - r[:, 1] * q[0]
        keep = np.abs(denom) > 1e-12
        if not np.any(keep):
            continue
        w = b0[None, :] - a0
        t = np.where(keep, (w[:, 0] * q[1] - w[:, 1] * q[0]) / np.where(keep, denom, 1.0), -1.0)
        u = np.where(keep, (w[:, 0] * r[:, 1] - w[:, 1] * r[:, 0]) / np.where(keep, denom, 1.0), -1.0)
        hit = keep & (t >= -1e-12) & (t <= 1 + 1e-12) & (u >= -1e-12) & (u <= 1 + 1e-12)
        for i in np.nonzero(hit)[0]:
            out.append((int(i), float(np.clip(t[i], 0, 1)), j, float(np.clip(u[i], 0, 1))))
    return out


def _contiguous_runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Index ranges [i0, i1] of maximal True runs."""
    runs = []
    i = 0
    n = len(mask)
    while i < n:
        if mask[i]:
            j = i
            while j + 1 < n and mask[j + 1]:
                j += 1
            runs.append((i, j))
            i = j + 1
        else:
            i += 1
    return runs


def detect_conflict_zones(
    paths: list[Path],
    intersection_margin: float = 5.0,
    merge_margin: float = 15.0,
    lateral_merge_threshold: float = 2.0,
    time_headway: float = DEFAULT_TIME_HEADWAY,
    distance_offset: float = DEFAULT_DISTANCE_OFFSET,
    sample_step: float = 0.5,
) -> list[ConflictZone]:
    """Find conflict zones between every pair of paths.

    Isolated transversal crossings become intersection zones with the
    intersection margin applied ahead of and behind the crossing point.
    Maximal stretches where two paths stay within the lateral threshold
    become merge-split zones with the merge margin applied at both ends.
    Stretches shorter than a crossing footprint (4x the lateral threshold)
    are treated as crossings, not merges.
    """
    ordered = sorted(paths, key=lambda p: p.vehicle_id)
    dense = {p.vehicle_id: _resample(p, sample_step) for p in ordered}

    intersections: list[dict] = []
    merges: list[dict] = []
    min_merge_len = 4.0 * lateral_merge_threshold

    for ia in range(len(ordered)):
        for ib in range(ia + 1, len(ordered)):
            pa, pb = ordered[ia], ordered[ib]
            sa, qa = dense[pa.vehicle_id]
            sb, qb = dense[pb.vehicle_id]

            # Merge stretches: where path a runs within the lateral threshold of b.
            close = _point_segment_distances(qa, pb.waypoints) <= lateral_merge_threshold
            merge_spans_a: list[tuple[float, float]] = []
            for i0, i1 in _contiguous_runs(close):
                lo, hi = float(sa[i0]), float(sa[i1])
                if hi - lo >= min_merge_len:
                    merge_spans_a.append((lo, hi))

            for lo, hi in merge_spans_a:
                b_lo = _closest_arclength(pa.point_at(lo), sb, qb)
                b_hi = _closest_arclength(pa.point_at(hi), sb, qb)
                if b_hi <= b_lo:
                    # Opposite travel directions share the stretch; the
                    # merge-split headway model does not cover head-on use.
                    continue
                merges.append(
                    {
                        "pair": (pa.vehicle_id, pb.vehicle_id),
                        "a": (max(0.0, lo - merge_margin), min(pa.length, hi + merge_margin)),
                        "b": (max(0.0, b_lo - merge_margin), min(pb.length, b_hi + merge_margin)),
                    }
                )

            # Transversal crossings outside any merge stretch.
            seen_cross: list[tuple[float, float]] = []
            arc_a = pa.cumulative_arclength
            arc_b = pb.cumulative_arclength
            for i, t, j, u in _segment_crossings(pa.waypoints, pb.waypoints):
                ca = float(arc_a[i] + t * (arc_a[i + 1] - arc_a[i]))
                cb = float(arc_b[j] + u * (arc_b[j + 1] - arc_b[j]))
                if any(lo - 1e-6 <= ca <= hi + 1e-6 for lo, hi in merge_spans_a):
                    continue
                if any(abs(ca - x) < 2.0 and abs(cb - y) < 2.0 for x, y in seen_cross):
                    continue
                seen_cross.append((ca, cb))
                intersections.append(
                    {
                        "pair": (pa.vehicle_id, pb.vehicle_id),
                        "a": (max(0.0, ca - intersection_margin), min(pa.length, ca + intersection_margin)),
                        "b": (max(0.0, cb - intersection_margin), min(pb.length, cb + intersection_margin)),
                    }
                )

    def merge_overlaps(zones: list[dict]) -> list[dict]:
        changed = True
        while changed:
            changed = False
            for i in range(len(zones)):
                for j in range(i + 1, len(zones)):
                    zi, zj = zones[i], zones[j]
                    if zi["pair"] != zj["pair"]:
                        continue
                    overlap = (
                        zi["a"][0] <= zj["a"][1] and zj["a"][0] <= zi["a"][1]
                        and zi["b"][0] <= zj["b"][1] and zj["b"][0] <= zi["b"][1]
                    )
                    if overlap:
                        zi["a"] = (min(zi["a"][0], zj["a"][0]), max(zi["a"][1], zj["a"][1]))
                        zi["b"] = (min(zi["b"][0], zj["b"][0]), max(zi["b"][1], zj["b"][1]))
                        zones.pop(j)
                        changed = True
                        break
                if changed:
                    break
        return zones

    intersections = merge_overlaps(intersections)
    merges = merge_overlaps(merges)

    def snap_boundaries(zone_dicts: list[dict], tol: float = 0.01) -> None:
        """Snap per-vehicle boundary positions that nearly coincide.

        Two zones touching the same spot on one path (e.g. a crossing of a
        shared corridor) must reference exactly the same arc-length, or the
        solvers see two grid nodes millimeters apart and two almost
        dependent timing quantities.
        """
        per_vehicle: dict[str, list[tuple[float, dict, str, int]]] = {}
        for z in zone_dicts:
            for slot, vid in zip(("a", "b"), z["pair"]):
                lo, hi = z[slot]
                per_vehicle.setdefault(vid, []).append((lo, z, slot, 0))
                per_vehicle.setdefault(vid, []).append((hi, z, slot, 1))
        for vid, entries in per_vehicle.items():
            entries.sort(key=lambda e: e[0])
            cluster_start = 0
            for i in range(1, len(entries) + 1):
                if i == len(entries) or entries[i][0] - entries[i - 1][0] > tol:
                    snapped = entries[cluster_start][0]
                    for value, z, slot, side in entries[cluster_start:i]:
                        pair = list(z[slot])
                        pair[side] = snapped
                        z[slot] = tuple(pair)
                    cluster_start = i

    snap_boundaries(intersections + merges)

    def build(raw: list[dict], kind: str, prefix: str) -> list[ConflictZone]:
        raw.sort(key=lambda z: (z["a"][0], z["b"][0], z["pair"]))
        zones = []
        for idx, z in enumerate(raw, start=1):
            headway = time_headway if kind == MERGE_SPLIT else 0.0
            offset = distance_offset if kind == MERGE_SPLIT else 0.0
            members = tuple(
                ZoneMember(vid, lo, hi, headway, offset)
                for vid, (lo, hi) in sorted(zip(z["pair"], (z["a"], z["b"])))
            )
            zones.append(ConflictZone(f"{prefix}{idx}", kind, members))
        return zones

    return build(intersections, INTERSECTION, "I") + build(merges, MERGE_SPLIT, "M")


# ---------------------------------------------------------------------------
# Scenario document I/O

_UNIT_RE = re.compile(r"^\s*([-+0-9.eE]+)\s*(m/s|km/h|m/s\^?2|m|s)?\s*$")
_UNIT_SCALE = {None: 1.0, "m/s": 1.0, "km/h": 1.0 / 3.6, "m/s2": 1.0, "m/s^2": 1.0, "m": 1.0, "s": 1.0}


def _quantity(value, where: str) -> float:
    """Parse a number or a '<number> <unit>' string into SI units."""
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        m = _UNIT_RE.match(value)
        if m:
            try:
                num = float(m.group(1))
            except ValueError:
                raise ScenarioError(f"{where}: cannot parse quantity {value!r}") from None
            return num * _UNIT_SCALE[m.group(2)]
    raise ScenarioError(f"{where}: cannot parse quantity {value!r}")


def _require(mapping: dict, key: str, where: str):
    if not isinstance(mapping, dict) or key not in mapping:
        raise ScenarioError(f"{where}: missing required key {key!r}")
    return mapping[key]


def load_scenario(text: str) -> Scenario:
    """Parse a scenario document (YAML) and validate all model invariants.

    Zones may be given explicitly or as `auto` with detection margins, in
    which case conflict zones are derived from the path geometry on load.
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ScenarioError("top level: expected a mapping")

    raw_vehicles = _require(doc, "vehicles", "top level")
    if not isinstance(raw_vehicles, list) or not raw_vehicles:
        raise ScenarioError("vehicles: expected a non-empty list")

    paths: dict[str, Path] = {}
    params: dict[str, VehicleParams] = {}
    for i, rv in enumerate(raw_vehicles):
        where = f"vehicles[{i}]"
        vid = str(_require(rv, "id", where))
        where = f"vehicles[{vid}]"
        if vid in paths:
            raise ScenarioError(f"{where}: duplicate vehicle id")
        wps = _require(rv, "waypoints", where)
        try:
            path = make_path(vid, wps, smoothing_window=int(rv.get("curvature_smoothing", 3)))
        except DegenerateGeometryError as exc:
            raise ScenarioError(f"{where}.waypoints: {exc}") from exc
        paths[vid] = path
        weights = rv.get("weights", {})
        params[vid] = VehicleParams(
            v_min=_quantity(rv.get("v_min", 1.0), f"{where}.v_min"),
            v_max=_quantity(rv.get("v_max", 25.0), f"{where}.v_max"),
            a_lon_max=_quantity(rv.get("a_lon_max", 4.0), f"{where}.a_lon_max"),
            a_lat_max=_quantity(rv.get("a_lat_max", 2.0), f"{where}.a_lat_max"),
            v_initial=_quantity(rv.get("v_initial", 50 / 3.6), f"{where}.v_initial"),
            a_initial=_quantity(rv.get("a_initial", 0.0), f"{where}.a_initial"),
            weight_accel=_quantity(weights.get("P", 1.0), f"{where}.weights.P"),
            weight_jerk=_quantity(weights.get("Q", 1.0), f"{where}.weights.Q"),
            weight_time=_quantity(weights.get("R", 10.0), f"{where}.weights.R"),
        )

    raw_zones = doc.get("zones", "auto")
    zones: list[ConflictZone]
    if raw_zones == "auto" or isinstance(raw_zones, dict):
        margins = raw_zones if isinstance(raw_zones, dict) else {}
        if "auto" in margins:
            margins = margins["auto"] or {}
        zones = detect_conflict_zones(
            list(paths.values()),
            intersection_margin=_quantity(margins.get("intersection_margin", 5.0), "zones.auto.intersection_margin"),
            merge_margin=_quantity(margins.get("merge_margin", 15.0), "zones.auto.merge_margin"),
            lateral_merge_threshold=_quantity(margins.get("lateral_threshold", 2.0), "zones.auto.lateral_threshold"),
        )
    elif isinstance(raw_zones, list):
        zones = []
        for i, rz in enumerate(raw_zones):
            where = f"zones[{i}]"
            kind = str(_require(rz, "kind", where)).lower().replace("-", "_")
            members = []
            for j, rm in enumerate(_require(rz, "members", where)):
                mw = f"{where}.members[{j}]"
                default_dt = DEFAULT_TIME_HEADWAY if kind == MERGE_SPLIT else 0.0
                members.append(
                    ZoneMember(
                        vehicle_id=str(_require(rm, "vehicle", mw)),
                        p_in=_quantity(_require(rm, "p_in", mw), f"{mw}.p_in"),
                        p_out=_quantity(_require(rm, "p_out", mw), f"{mw}.p_out"),
                        time_headway=_quantity(rm.get("time_headway", default_dt), f"{mw}.time_headway"),
                        distance_offset=_quantity(rm.get("distance_offset", 0.0), f"{mw}.distance_offset"),
                    )
                )
            zones.append(
                ConflictZone(
                    zone_id=str(rz.get("id", f"Z{i + 1}")),
                    kind=kind,
                    members=tuple(sorted(members, key=lambda m: m.vehicle_id)),
                )
            )
    else:
        raise ScenarioError("zones: expected 'auto', an auto-margins mapping, or a zone list")

    zones.sort(key=lambda z: (z.members[0].p_in, z.zone_id))
    grid = doc.get("grid", {})
    grid_n = int(_require(grid, "N", "grid")) if isinstance(grid, dict) else int(grid)
    return Scenario(paths=paths, zones=tuple(zones), vehicle_params=params, grid_n=grid_n)


def load_scenario_file(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return load_scenario(fh.read())


def save_scenario(scenario: Scenario) -> str:
    """Serialize a scenario to YAML. Zones are written out explicitly."""
    doc: dict = {"vehicles": [], "zones": [], "grid": {"N": scenario.grid_n}}
    for vid in scenario.vehicle_ids:
        p = scenario.paths[vid]
        prm = scenario.vehicle_params[vid]
        doc["vehicles"].append(
            {
                "id": vid,
                "waypoints": [[float(x), float(y)] for x, y in p.waypoints],
                "v_min": prm.v_min,
                "v_max": prm.v_max,
                "a_lon_max": prm.a_lon_max,
                "a_lat_max": prm.a_lat_max,
                "v_initial": prm.v_initial,
                "a_initial": prm.a_initial,
                "weights": {"P": prm.weight_accel, "Q": prm.weight_jerk, "R": prm.weight_time},
            }
        )
    for z in scenario.zones:
        doc["zones"].append(
            {
                "id": z.zone_id,
                "kind": z.kind,
                "members": [
                    {
                        "vehicle": m.vehicle_id,
                        "p_in": float(m.p_in),
                        "p_out": float(m.p_out),
                        "time_headway": float(m.time_headway),
                        "distance_offset": float(m.distance_offset),
                    }
                    for m in z.members
                ],
            }
        )
    return yaml.safe_dump(doc, sort_keys=False)


def with_grid_n(scenario: Scenario, grid_n: int) -> Scenario:
    return replace(scenario, grid_n=grid_n)
