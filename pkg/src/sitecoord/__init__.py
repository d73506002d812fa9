"""Joint speed-profile coordination for automated vehicles in confined sites."""

__version__ = "0.1.0"

from .site_model import (  # noqa: F401
    ConflictZone,
    Path,
    Scenario,
    ScenarioError,
    VehicleParams,
    Waypoint,
    ZoneMember,
    compute_curvature,
    detect_conflict_zones,
    load_scenario,
    load_scenario_file,
    make_path,
    save_scenario,
)
