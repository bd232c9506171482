from ipcnav.world.maps import LaneSegment, MapError, SpawnPoint, WorldMap, builtin_map, load_map, map_from_json, resolve_map
from ipcnav.world.sim import (
    DT,
    V_MAX,
    Action,
    EpisodeTerminatedError,
    EventFlags,
    VehicleState,
    WorldState,
    apply_kinematics,
    compute_reward,
    detect_events,
    expert_policy,
    is_terminated,
    place_vehicle,
    reset,
    scripted_policy,
    step,
)
