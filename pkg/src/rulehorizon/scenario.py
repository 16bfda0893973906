"""Highway scenario model: lanes, recorded tracks, signs and Frenet geometry.

Coordinates are kept in the native frame of the source data (for drone
recordings that frame has y growing downward). Left/right are always
resolved through lane metadata (``right_index``), never through the raw
sign of y. Lanes are straight and parallel, so the Frenet reference line
(the rightmost lane centre) is a straight line and s coincides with the
longitudinal axis.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, FormatError, GenerationError, OutOfDomainError

ARCHIVE_HEADER = "RHSCN 1"

SIGN_NO_OVERTAKING_START = "no_overtaking_start"
SIGN_NO_OVERTAKING_END = "no_overtaking_end"
_SIGN_KINDS = (SIGN_NO_OVERTAKING_START, SIGN_NO_OVERTAKING_END)

EGO_ID = -1


def _normalize_heading(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class VehicleState:
    """Kinematic state of one vehicle at one timestep."""

    vehicle_id: int
    x: float
    y: float
    vx: float
    vy: float
    ax: float
    ay: float
    heading: float
    length: float
    width: float
    lane_id: int

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise DataError(
                f"vehicle {self.vehicle_id}: non-positive dimensions "
                f"({self.length} x {self.width})"
            )

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


@dataclass(frozen=True)
class Lane:
    """One straight lane. ``right_index`` is 0 for the rightmost lane."""

    lane_id: int
    center_offset: float      # lateral position of the centre line (native frame)
    width: float
    s_min: float
    s_max: float
    direction: int            # +1: driving towards +x, -1: towards -x
    right_index: int


@dataclass(frozen=True)
class TrafficSign:
    kind: str
    s: float
    direction: int = 1

    def __post_init__(self):
        if self.kind not in _SIGN_KINDS:
            raise DataError(f"unknown sign kind {self.kind!r}")


@dataclass(frozen=True)
class EgoConfig:
    start_min: float = 150.0   # start window, metres before the goal
    start_max: float = 350.0
    start_speed: float = 15.0
    goal_s: float = 0.0
    length: float = 4.5
    width: float = 1.8


class LaneNetwork:
    """Ordered set of parallel straight lanes plus the Frenet mapping.

    The reference line is the centre of the rightmost lane; d is the signed
    lateral offset with leftward (driver's perspective) positive.
    """

    def __init__(self, lanes):
        lanes = tuple(sorted(lanes, key=lambda ln: ln.right_index))
        if not lanes:
            raise DataError("lane network needs at least one lane")
        ids = [ln.lane_id for ln in lanes]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate lane ids")
        if sorted(ln.right_index for ln in lanes) != list(range(len(lanes))):
            raise DataError("right_index values must be 0..n-1")
        directions = {ln.direction for ln in lanes}
        if directions - {1, -1}:
            raise DataError("lane direction must be +1 or -1")
        if len(directions) != 1:
            raise DataError("mixed-direction lane networks are not supported")
        for ln in lanes:
            if ln.width <= 0:
                raise DataError(f"lane {ln.lane_id}: width must be positive")
            if ln.s_min >= ln.s_max:
                raise DataError(f"lane {ln.lane_id}: empty longitudinal extent")
        if len(lanes) > 1:
            offs = [ln.center_offset for ln in lanes]
            steps = np.diff(offs)
            if not (np.all(steps > 0) or np.all(steps < 0)):
                raise DataError("lane offsets not monotone in right_index")
            for a, b in zip(lanes, lanes[1:]):
                if abs(b.center_offset - a.center_offset) + 1e-9 < (a.width + b.width) / 2:
                    raise DataError(f"lanes {a.lane_id} and {b.lane_id} overlap")
            self._leftward = 1.0 if steps[0] > 0 else -1.0
        else:
            self._leftward = 1.0
        self.lanes = lanes
        self._by_id = {ln.lane_id: ln for ln in lanes}
        self.direction = lanes[0].direction
        self._ref_offset = lanes[0].center_offset

    @property
    def rightmost(self) -> Lane:
        return self.lanes[0]

    @property
    def leftward(self) -> float:
        """+1 when driver-left corresponds to increasing native y, else -1."""
        return self._leftward

    @property
    def leftmost(self) -> Lane:
        return self.lanes[-1]

    @property
    def s_min(self) -> float:
        return min(ln.s_min for ln in self.lanes)

    @property
    def s_max(self) -> float:
        return max(ln.s_max for ln in self.lanes)

    @property
    def d_min(self) -> float:
        """Right road boundary in frenet d."""
        return -self.rightmost.width / 2.0

    @property
    def d_max(self) -> float:
        """Left road boundary in frenet d."""
        return self.d_center(self.leftmost.lane_id) + self.leftmost.width / 2.0

    @property
    def heading(self) -> float:
        """Driving direction expressed as a native-frame heading."""
        return 0.0 if self.direction == 1 else math.pi

    def lane(self, lane_id: int) -> Lane:
        try:
            return self._by_id[lane_id]
        except KeyError:
            raise DataError(f"unknown lane id {lane_id}") from None

    def has_lane(self, lane_id: int) -> bool:
        return lane_id in self._by_id

    def d_center(self, lane_id: int) -> float:
        ln = self.lane(lane_id)
        return self._leftward * (ln.center_offset - self._ref_offset)

    def lane_at_d(self, d: float) -> Lane:
        """Lane whose band contains d; outside the road, the nearest lane."""
        best = min(self.lanes, key=lambda ln: abs(d - self.d_center(ln.lane_id)))
        return best

    def frenet_of(self, x: float, y: float) -> tuple:
        """Map a native position to (s, d). Raises outside road +- one lane width."""
        s = x * self.direction
        d = self._leftward * (y - self._ref_offset)
        margin = max(ln.width for ln in self.lanes)
        if not (self.d_min - margin <= d <= self.d_max + margin):
            raise OutOfDomainError(f"position ({x}, {y}) laterally off-road")
        if not (self.s_min - margin <= s <= self.s_max + margin):
            raise OutOfDomainError(f"position ({x}, {y}) beyond road extent")
        return float(s), float(d)

    def frenet_unchecked(self, x: float, y: float) -> tuple:
        """Frenet mapping without the domain guard, for planner probe states
        that may momentarily overrun the recorded extent."""
        return float(x * self.direction), float(self._leftward * (y - self._ref_offset))

    def cartesian_of(self, s: float, d: float) -> tuple:
        x = s * self.direction
        y = self._ref_offset + self._leftward * d
        return float(x), float(y)


@dataclass(frozen=True)
class Track:
    """Presence interval plus per-frame states of one vehicle."""

    first_frame: int
    states: tuple

    @property
    def last_frame(self) -> int:
        return self.first_frame + len(self.states) - 1

    def state_at(self, frame: int):
        if self.first_frame <= frame <= self.last_frame:
            return self.states[frame - self.first_frame]
        return None


@dataclass(frozen=True)
class Scenario:
    """Immutable bundle of lanes, recorded tracks, signs and ego settings."""

    timestep: float
    n_frames: int
    lane_network: LaneNetwork
    tracks: dict
    signs: tuple = ()
    ego: EgoConfig = field(default_factory=EgoConfig)

    def __post_init__(self):
        if self.timestep <= 0:
            raise DataError("scenario timestep must be positive")

    def vehicles_at(self, frame: int):
        """All vehicle states present at a frame, ordered by id."""
        out = []
        for vid in sorted(self.tracks):
            state = self.tracks[vid].state_at(frame)
            if state is not None:
                out.append(state)
        return out

    def state_of(self, vehicle_id: int, frame: int):
        track = self.tracks.get(vehicle_id)
        return None if track is None else track.state_at(frame)

    @property
    def duration(self) -> float:
        return (self.n_frames - 1) * self.timestep

    def start_signs(self):
        return tuple(s for s in self.signs if s.kind == SIGN_NO_OVERTAKING_START)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

_META_COLUMNS = ("frameRate", "laneId", "centerOffset", "width", "sMin", "sMax",
                 "direction", "rightIndex")
_TRACK_COLUMNS = ("frame", "id", "x", "y", "width", "height", "xVelocity",
                  "yVelocity", "xAcceleration", "yAcceleration", "laneId")


def _reader(text) -> csv.DictReader:
    if isinstance(text, str):
        text = io.StringIO(text)
    return csv.DictReader(text)


def _require_columns(reader: csv.DictReader, required, what: str):
    have = reader.fieldnames or []
    for column in required:
        if column not in have:
            raise FormatError(f"{what}: missing column {column!r}")


def parse_meta_csv(meta_text) -> tuple:
    """Parse the meta CSV into (frame_rate, LaneNetwork)."""
    reader = _reader(meta_text)
    _require_columns(reader, _META_COLUMNS, "meta CSV")
    lanes = []
    frame_rate = None
    for row in reader:
        try:
            rate = float(row["frameRate"])
            lane = Lane(
                lane_id=int(row["laneId"]),
                center_offset=float(row["centerOffset"]),
                width=float(row["width"]),
                s_min=float(row["sMin"]),
                s_max=float(row["sMax"]),
                direction=int(row["direction"]),
                right_index=int(row["rightIndex"]),
            )
        except (TypeError, ValueError) as exc:
            raise FormatError(f"meta CSV: bad row {row!r}") from exc
        if frame_rate is None:
            frame_rate = rate
        elif rate != frame_rate:
            raise DataError("meta CSV: inconsistent frameRate values")
        lanes.append(lane)
    if frame_rate is None:
        frame_rate = 25.0
    if frame_rate <= 0:
        raise DataError("meta CSV: frameRate must be positive")
    return frame_rate, LaneNetwork(lanes)


def parse_tracks_csv(meta_text, tracks_text) -> Scenario:
    """Ingest drone-recording style track data into a :class:`Scenario`.

    ``width``/``height`` columns follow the recording convention: width is
    the longitudinal extent (vehicle length), height the lateral extent.
    Positions are kept in the file's native frame and are interpreted as
    bounding-box centres. Headings are derived from the velocity vector.
    """
    frame_rate, network = parse_meta_csv(meta_text)
    reader = _reader(tracks_text)
    _require_columns(reader, _TRACK_COLUMNS, "tracks CSV")

    rows_by_id: dict = {}
    for row in reader:
        try:
            vid = int(row["id"])
            frame = int(row["frame"])
        except (TypeError, ValueError) as exc:
            raise FormatError(f"tracks CSV: bad id/frame in row {row!r}") from exc
        if vid < 0:
            raise DataError(f"tracks CSV: negative vehicle id {vid}")
        rows_by_id.setdefault(vid, []).append((frame, row))

    tracks = {}
    max_frame = 0
    for vid, rows in rows_by_id.items():
        states = []
        previous_frame = None
        for frame, row in rows:
            if previous_frame is not None and frame != previous_frame + 1:
                raise DataError(
                    f"vehicle {vid}: frames not consecutive at frame {frame}"
                )
            previous_frame = frame
            lane_id = int(row["laneId"])
            if not network.has_lane(lane_id):
                raise DataError(f"vehicle {vid}: unknown laneId {lane_id} at frame {frame}")
            vx = float(row["xVelocity"])
            vy = float(row["yVelocity"])
            if math.hypot(vx, vy) > 1e-6:
                heading = math.atan2(vy, vx)
            else:
                heading = network.heading
            states.append(VehicleState(
                vehicle_id=vid,
                x=float(row["x"]),
                y=float(row["y"]),
                vx=vx,
                vy=vy,
                ax=float(row["xAcceleration"]),
                ay=float(row["yAcceleration"]),
                heading=_normalize_heading(heading),
                length=float(row["width"]),
                width=float(row["height"]),
                lane_id=lane_id,
            ))
        first = rows[0][0]
        tracks[vid] = Track(first_frame=first, states=tuple(states))
        max_frame = max(max_frame, first + len(states) - 1)

    ego = EgoConfig(goal_s=network.s_max - 5.0)
    return Scenario(
        timestep=1.0 / frame_rate,
        n_frames=max_frame + 1 if tracks else 1,
        lane_network=network,
        tracks=tracks,
        ego=ego,
    )


def emit_tracks_csv(scenario: Scenario) -> str:
    """Re-emit parsed kinematics in the ingestion column layout."""
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(_TRACK_COLUMNS)
    for vid in sorted(scenario.tracks):
        track = scenario.tracks[vid]
        for offset, st in enumerate(track.states):
            writer.writerow([
                track.first_frame + offset, vid, repr(st.x), repr(st.y),
                repr(st.length), repr(st.width), repr(st.vx), repr(st.vy),
                repr(st.ax), repr(st.ay), st.lane_id,
            ])
    return out.getvalue()


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BrakeEvent:
    t_start: float
    decel: float      # positive magnitude (m/s^2)
    duration: float


@dataclass(frozen=True)
class SynthSpec:
    n_lanes: int = 3
    n_vehicles: int = 0
    speed_min: float = 8.0
    speed_max: float = 20.0
    duration: float = 40.0
    dt: float = 0.1
    lane_width: float = 3.5
    road_length: float = 420.0
    min_gap: float = 20.0
    brake: BrakeEvent | None = None
    n_lane_changes: int = 0


def _lane_network_for(spec: SynthSpec) -> LaneNetwork:
    lanes = [
        Lane(lane_id=i + 1, center_offset=i * spec.lane_width, width=spec.lane_width,
             s_min=0.0, s_max=spec.road_length, direction=1, right_index=i)
        for i in range(spec.n_lanes)
    ]
    return LaneNetwork(lanes)


def generate_synthetic_scenario(spec: SynthSpec, seed: int) -> Scenario:
    """Deterministic constant-speed / piecewise-braking traffic.

    Vehicles are distributed round-robin over lanes with random gaps of at
    least ``min_gap``; followers brake to match a slower leader once the gap
    drops below one second of headway, which keeps replayed tracks
    collision-free.
    """
    if spec.n_lanes < 1:
        raise GenerationError("need at least one lane")
    if spec.duration <= 0:
        raise GenerationError("duration must be positive")
    rng = np.random.default_rng(seed)
    network = _lane_network_for(spec)
    n_frames = int(round(spec.duration / spec.dt)) + 1

    # Per-lane round-robin assignment, then longitudinal placement.
    per_lane: dict = {i: [] for i in range(spec.n_lanes)}
    lengths = rng.uniform(4.0, 5.5, size=spec.n_vehicles)
    widths = rng.uniform(1.7, 2.0, size=spec.n_vehicles)
    speeds = rng.uniform(spec.speed_min, spec.speed_max, size=spec.n_vehicles)
    for k in range(spec.n_vehicles):
        per_lane[k % spec.n_lanes].append(k)

    usable = spec.road_length - 40.0
    starts = np.zeros(spec.n_vehicles)
    for lane_index, members in per_lane.items():
        if not members:
            continue
        required = sum(lengths[m] for m in members) + spec.min_gap * (len(members) - 1)
        if required > usable:
            raise GenerationError(
                f"{len(members)} vehicles do not fit in lane {lane_index + 1} "
                f"at min gap {spec.min_gap} m"
            )
        slack = usable - required
        weights = rng.uniform(0.2, 1.0, size=len(members))
        extras = slack * weights / weights.sum()
        s = 10.0
        for member, extra in zip(members, extras):
            s += lengths[member] / 2.0
            starts[member] = s
            s += lengths[member] / 2.0 + spec.min_gap + extra

    # Choose the braking vehicle: a leader with a follower behind it. The
    # second-by-position vehicle of the fullest lane stays in the recording
    # window longer than the front vehicle.
    brake_target = None
    if spec.brake is not None and spec.n_vehicles:
        lane_index = max(per_lane, key=lambda i: (len(per_lane[i]), -i))
        ordered = sorted(per_lane[lane_index], key=lambda m: starts[m])
        brake_target = ordered[1] if len(ordered) > 1 else ordered[0]

    # Lane-change assignments (vehicle, start time, lateral delta).
    lane_changes = {}
    for _ in range(spec.n_lane_changes):
        if not spec.n_vehicles or spec.n_lanes < 2:
            break
        member = int(rng.integers(0, spec.n_vehicles))
        t0 = float(rng.uniform(5.0, max(5.5, spec.duration - 8.0)))
        current = member % spec.n_lanes
        options = [i for i in (current - 1, current + 1) if 0 <= i < spec.n_lanes]
        target = options[int(rng.integers(0, len(options)))]
        lane_changes[member] = (t0, current, target)

    # Forward-integrate speeds with the reactive follower rule per lane.
    v = speeds.copy()
    s = starts.copy()
    s_hist = np.zeros((n_frames, spec.n_vehicles))
    v_hist = np.zeros((n_frames, spec.n_vehicles))
    a_hist = np.zeros((n_frames, spec.n_vehicles))
    for f in range(n_frames):
        t = f * spec.dt
        accel = np.zeros(spec.n_vehicles)
        if brake_target is not None and spec.brake.t_start <= t < spec.brake.t_start + spec.brake.duration:
            accel[brake_target] = -spec.brake.decel
        for members in per_lane.values():
            ordered = sorted(members, key=lambda m: s[m])
            for follower, leader in zip(ordered, ordered[1:]):
                gap = (s[leader] - lengths[leader] / 2.0) - (s[follower] + lengths[follower] / 2.0)
                if gap < max(5.0, v[follower] * 1.0) and v[follower] > v[leader]:
                    accel[follower] = -3.0
        s_hist[f] = s
        v_hist[f] = v
        a_hist[f] = accel
        v = np.maximum(0.0, v + accel * spec.dt)
        s = s + v * spec.dt

    # Lateral profiles: lane centre, with smooth lane-change blends.
    tracks = {}
    blend_T = 3.0
    for k in range(spec.n_vehicles):
        home = k % spec.n_lanes
        d0 = network.d_center(home + 1)
        d = np.full(n_frames, d0)
        dd = np.zeros(n_frames)
        if k in lane_changes:
            t0, current, target = lane_changes[k]
            d1 = network.d_center(target + 1)
            for f in range(n_frames):
                t = f * spec.dt
                if t <= t0:
                    continue
                u = min(1.0, (t - t0) / blend_T)
                # Quintic smoothstep: zero velocity/acceleration at both ends.
                blend = u ** 3 * (10 - 15 * u + 6 * u * u)
                dblend = (30 * u * u - 60 * u ** 3 + 30 * u ** 4) / blend_T
                d[f] = d0 + (d1 - d0) * blend
                dd[f] = (d1 - d0) * dblend if u < 1.0 else 0.0
        states = []
        for f in range(n_frames):
            if s_hist[f, k] > spec.road_length:
                break  # vehicle leaves the recording window
            x, y = network.cartesian_of(float(s_hist[f, k]), float(d[f]))
            vx = float(v_hist[f, k])
            vy = float(dd[f])
            heading = math.atan2(vy, vx) if math.hypot(vx, vy) > 1e-6 else 0.0
            lane = network.lane_at_d(float(d[f]))
            states.append(VehicleState(
                vehicle_id=k + 1, x=x, y=y, vx=vx, vy=vy,
                ax=float(a_hist[f, k]), ay=0.0, heading=_normalize_heading(heading),
                length=float(lengths[k]), width=float(widths[k]),
                lane_id=lane.lane_id,
            ))
        tracks[k + 1] = Track(first_frame=0, states=tuple(states))

    ego = EgoConfig(goal_s=spec.road_length - 5.0)
    return Scenario(
        timestep=spec.dt,
        n_frames=n_frames,
        lane_network=network,
        tracks=tracks,
        ego=ego,
    )


def insert_no_overtaking_sign(scenario: Scenario, rng_seed: int,
                              s_range: tuple = (100.0, 350.0)) -> Scenario:
    """Return a copy of the scenario with one start sign placed uniformly."""
    lo, hi = s_range
    network = scenario.lane_network
    if network.s_min > lo or network.s_max < hi:
        raise OutOfDomainError(
            f"road extent [{network.s_min}, {network.s_max}] does not cover "
            f"the sign range [{lo}, {hi}]"
        )
    rng = np.random.default_rng(rng_seed)
    s = float(rng.uniform(lo, hi))
    sign = TrafficSign(kind=SIGN_NO_OVERTAKING_START, s=s, direction=network.direction)
    return replace(scenario, signs=scenario.signs + (sign,))


# ---------------------------------------------------------------------------
# Frenet helpers (module-level operation wrappers)
# ---------------------------------------------------------------------------

def frenet_of(position: tuple, lane_network: LaneNetwork) -> tuple:
    return lane_network.frenet_of(position[0], position[1])


def cartesian_of(frenet: tuple, lane_network: LaneNetwork) -> tuple:
    return lane_network.cartesian_of(frenet[0], frenet[1])


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def resample_scenario(scenario: Scenario, interval: float) -> Scenario:
    """Linear-interpolate all tracks onto a new timestep grid.

    Used to bring 25 Hz recordings onto the 0.1 s simulation interval.
    Lane ids are recomputed from the interpolated lateral position.
    """
    if interval <= 0:
        raise DataError("resample interval must be positive")
    if abs(interval - scenario.timestep) < 1e-12:
        return scenario
    network = scenario.lane_network
    total = scenario.duration
    n_frames = int(math.floor(total / interval + 1e-9)) + 1
    tracks = {}
    for vid, track in scenario.tracks.items():
        t0 = track.first_frame * scenario.timestep
        t1 = track.last_frame * scenario.timestep
        f_start = int(math.ceil(t0 / interval - 1e-9))
        f_end = int(math.floor(t1 / interval + 1e-9))
        if f_end < f_start:
            continue
        old_t = t0 + np.arange(len(track.states)) * scenario.timestep
        new_t = np.arange(f_start, f_end + 1) * interval
        def col(getter):
            return np.interp(new_t, old_t, [getter(s) for s in track.states])
        xs, ys = col(lambda s: s.x), col(lambda s: s.y)
        vxs, vys = col(lambda s: s.vx), col(lambda s: s.vy)
        axs, ays = col(lambda s: s.ax), col(lambda s: s.ay)
        headings = np.interp(new_t, old_t, np.unwrap([s.heading for s in track.states]))
        length = track.states[0].length
        width = track.states[0].width
        states = []
        for i in range(len(new_t)):
            _, d = network.frenet_of(float(xs[i]), float(ys[i]))
            lane = network.lane_at_d(d)
            states.append(VehicleState(
                vehicle_id=vid, x=float(xs[i]), y=float(ys[i]),
                vx=float(vxs[i]), vy=float(vys[i]),
                ax=float(axs[i]), ay=float(ays[i]),
                heading=_normalize_heading(float(headings[i])),
                length=length, width=width, lane_id=lane.lane_id,
            ))
        tracks[vid] = Track(first_frame=f_start, states=tuple(states))
    return Scenario(
        timestep=interval,
        n_frames=n_frames,
        lane_network=network,
        tracks=tracks,
        signs=scenario.signs,
        ego=scenario.ego,
    )


# ---------------------------------------------------------------------------
# Scenario archive: the single self-describing text bundle
# ---------------------------------------------------------------------------

def to_archive(scenario: Scenario) -> str:
    """Serialise a scenario into the versioned ``RHSCN 1`` text format."""
    out = io.StringIO()
    out.write(ARCHIVE_HEADER + "\n")
    out.write("[meta]\n")
    out.write(f"timestep = {scenario.timestep!r}\n")
    out.write(f"frames = {scenario.n_frames}\n")
    out.write("[lanes]\n")
    out.write("lane_id,center_offset,width,s_min,s_max,direction,right_index\n")
    for lane in scenario.lane_network.lanes:
        out.write(f"{lane.lane_id},{lane.center_offset!r},{lane.width!r},"
                  f"{lane.s_min!r},{lane.s_max!r},{lane.direction},{lane.right_index}\n")
    out.write("[signs]\n")
    out.write("kind,s,direction\n")
    for sign in scenario.signs:
        out.write(f"{sign.kind},{sign.s!r},{sign.direction}\n")
    ego = scenario.ego
    out.write("[ego]\n")
    out.write(f"start_min = {ego.start_min!r}\n")
    out.write(f"start_max = {ego.start_max!r}\n")
    out.write(f"start_speed = {ego.start_speed!r}\n")
    out.write(f"goal_s = {ego.goal_s!r}\n")
    out.write(f"length = {ego.length!r}\n")
    out.write(f"width = {ego.width!r}\n")
    out.write("[tracks]\n")
    out.write("id,frame,x,y,vx,vy,ax,ay,heading,length,width,lane_id\n")
    for vid in sorted(scenario.tracks):
        track = scenario.tracks[vid]
        for offset, st in enumerate(track.states):
            out.write(f"{vid},{track.first_frame + offset},{st.x!r},{st.y!r},"
                      f"{st.vx!r},{st.vy!r},{st.ax!r},{st.ay!r},{st.heading!r},"
                      f"{st.length!r},{st.width!r},{st.lane_id}\n")
    return out.getvalue()


def from_archive(text: str) -> Scenario:
    """Parse the ``RHSCN 1`` archive format back into a scenario."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != ARCHIVE_HEADER:
        raise FormatError("not a scenario archive (expected 'RHSCN 1' header)")
    sections: dict = {}
    current = None
    for line in lines[1:]:
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1]
            sections[current] = []
        elif current is None:
            raise FormatError(f"content before first section: {stripped!r}")
        else:
            sections[current].append(stripped)

    for required in ("meta", "lanes", "ego", "tracks"):
        if required not in sections:
            raise FormatError(f"archive missing [{required}] section")

    def kv(section):
        pairs = {}
        for line in sections[section]:
            if "=" not in line:
                raise FormatError(f"[{section}]: expected key = value, got {line!r}")
            key, _, value = line.partition("=")
            pairs[key.strip()] = value.strip()
        return pairs

    meta = kv("meta")
    try:
        timestep = float(meta["timestep"])
        n_frames = int(meta["frames"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad [meta] section: {exc}") from exc

    def table(section, expected_header):
        rows = sections[section]
        if not rows or rows[0] != expected_header:
            raise FormatError(f"[{section}]: expected header {expected_header!r}")
        return [row.split(",") for row in rows[1:]]

    lanes = []
    for parts in table("lanes", "lane_id,center_offset,width,s_min,s_max,direction,right_index"):
        if len(parts) != 7:
            raise FormatError(f"[lanes]: bad row {parts!r}")
        lanes.append(Lane(
            lane_id=int(parts[0]), center_offset=float(parts[1]), width=float(parts[2]),
            s_min=float(parts[3]), s_max=float(parts[4]), direction=int(parts[5]),
            right_index=int(parts[6]),
        ))
    network = LaneNetwork(lanes)

    signs = []
    if "signs" in sections:
        for parts in table("signs", "kind,s,direction"):
            if len(parts) != 3:
                raise FormatError(f"[signs]: bad row {parts!r}")
            signs.append(TrafficSign(kind=parts[0], s=float(parts[1]), direction=int(parts[2])))

    ego_kv = kv("ego")
    try:
        ego = EgoConfig(
            start_min=float(ego_kv["start_min"]),
            start_max=float(ego_kv["start_max"]),
            start_speed=float(ego_kv["start_speed"]),
            goal_s=float(ego_kv["goal_s"]),
            length=float(ego_kv["length"]),
            width=float(ego_kv["width"]),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad [ego] section: {exc}") from exc

    track_rows: dict = {}
    for parts in table("tracks", "id,frame,x,y,vx,vy,ax,ay,heading,length,width,lane_id"):
        if len(parts) != 12:
            raise FormatError(f"[tracks]: bad row {parts!r}")
        vid = int(parts[0])
        frame = int(parts[1])
        state = VehicleState(
            vehicle_id=vid, x=float(parts[2]), y=float(parts[3]),
            vx=float(parts[4]), vy=float(parts[5]), ax=float(parts[6]),
            ay=float(parts[7]), heading=float(parts[8]), length=float(parts[9]),
            width=float(parts[10]), lane_id=int(parts[11]),
        )
        if not network.has_lane(state.lane_id):
            raise DataError(f"vehicle {vid}: unknown lane {state.lane_id}")
        track_rows.setdefault(vid, []).append((frame, state))

    tracks = {}
    for vid, rows in track_rows.items():
        frames = [f for f, _ in rows]
        first = frames[0]
        if frames != list(range(first, first + len(frames))):
            raise DataError(f"vehicle {vid}: non-consecutive frames in archive")
        tracks[vid] = Track(first_frame=first, states=tuple(st for _, st in rows))

    return Scenario(
        timestep=timestep, n_frames=n_frames, lane_network=network,
        tracks=tracks, signs=tuple(signs), ego=ego,
    )


def load_archive(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as handle:
        return from_archive(handle.read())


def save_archive(scenario: Scenario, path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(to_archive(scenario))
