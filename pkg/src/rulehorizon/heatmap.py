"""Grid-segmented road evaluation: state-value and robustness heatmaps.

Each on-road cell gets an ego template (given speed, lane-aligned heading,
zero yaw rate and acceleration) placed at its centre; the quantity is then
either the critic's value of the resulting graph or the instantaneous rule
body robustness. Grids export to CSV and to a simple SVG rendering with a
yellow-to-purple ramp (high to low).
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .config import EvalConfig, ModelConfig, RuleParams
from .errors import DataError, FormatError
from .graph import build_graph
from .network import ValueNetParams, value_forward
from .rules import constant_ego, rule_robustness
from .scenario import EGO_ID, Lane, Scenario, VehicleState

GRID_CSV_HEADER = "cell_x,cell_y,value"


@dataclass
class EvalGrid:
    """Rectangular cell grid over the road in frenet (s, d) coordinates."""

    cell_long: float
    cell_lat: float
    origin_s: float
    origin_d: float
    values: np.ndarray               # (rows, cols): rows over d, cols over s
    mask: np.ndarray                 # True where the cell is off-road
    quantity: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def cell_center(self, row: int, col: int) -> tuple:
        return (self.origin_s + (col + 0.5) * self.cell_long,
                self.origin_d + (row + 0.5) * self.cell_lat)

    def equals(self, other: "EvalGrid") -> bool:
        return (
            self.cell_long == other.cell_long
            and self.cell_lat == other.cell_lat
            and self.origin_s == other.origin_s
            and self.origin_d == other.origin_d
            and self.values.shape == other.values.shape
            and bool(np.array_equal(self.mask, other.mask))
            and bool(np.array_equal(self.values[~self.mask],
                                    other.values[~other.mask]))
        )


def make_grid_layout(scenario: Scenario, cfg: EvalConfig) -> EvalGrid:
    network = scenario.lane_network
    length = network.s_max - network.s_min
    width = network.d_max - network.d_min
    cols = int(math.ceil(length / cfg.cell_long - 1e-9))
    rows = int(math.ceil(width / cfg.cell_lat - 1e-9))
    grid = EvalGrid(
        cell_long=cfg.cell_long, cell_lat=cfg.cell_lat,
        origin_s=network.s_min, origin_d=network.d_min,
        values=np.zeros((rows, cols)),
        mask=np.zeros((rows, cols), dtype=bool),
    )
    for row in range(rows):
        for col in range(cols):
            s, d = grid.cell_center(row, col)
            if not (network.d_min <= d <= network.d_max
                    and network.s_min <= s <= network.s_max):
                grid.mask[row, col] = True
    return grid


def ego_template(scenario: Scenario, s: float, d: float, speed: float,
                 length: float = 4.5, width: float = 1.8) -> VehicleState:
    """Lane-aligned ego probe at a frenet position."""
    network = scenario.lane_network
    x, y = network.cartesian_of(s, d)
    heading = network.heading
    lane = network.lane_at_d(d)
    return VehicleState(
        vehicle_id=EGO_ID, x=x, y=y,
        vx=speed * math.cos(heading), vy=speed * math.sin(heading),
        ax=0.0, ay=0.0, heading=heading, length=length, width=width,
        lane_id=lane.lane_id,
    )


def value_heatmap(params: ValueNetParams, scenario: Scenario, t: int,
                  ego_speed: float, cfg: EvalConfig,
                  model: ModelConfig | None = None) -> EvalGrid:
    """Critic value per cell with the ego template placed at the centre."""
    model = model or params.model
    grid = make_grid_layout(scenario, cfg)
    grid.quantity = "value"
    grid.meta = {"ego_speed": ego_speed, "time_index": t}
    for row in range(grid.rows):
        for col in range(grid.cols):
            if grid.mask[row, col]:
                continue
            s, d = grid.cell_center(row, col)
            ego = ego_template(scenario, s, d, ego_speed)
            graph = build_graph(scenario, ego, t, model, yaw_rate=0.0,
                                goal_s=scenario.ego.goal_s)
            grid.values[row, col] = value_forward(graph, params)
    return grid


def robustness_heatmap(rule_id: str, scenario: Scenario, t: int,
                       ego_speed: float, cfg: EvalConfig,
                       rule_params: RuleParams | None = None) -> EvalGrid:
    """Instantaneous rule-body robustness per cell; no learned state involved."""
    rule_params = rule_params or RuleParams()
    grid = make_grid_layout(scenario, cfg)
    grid.quantity = f"robustness:{rule_id}"
    grid.meta = {"ego_speed": ego_speed, "time_index": t, "rule": rule_id}
    for row in range(grid.rows):
        for col in range(grid.cols):
            if grid.mask[row, col]:
                continue
            s, d = grid.cell_center(row, col)
            ego = ego_template(scenario, s, d, ego_speed)
            grid.values[row, col] = rule_robustness(
                rule_id, scenario, constant_ego(ego), t, rule_params)
    return grid


# ---------------------------------------------------------------------------
# Onset analysis
# ---------------------------------------------------------------------------

def lane_rows(grid: EvalGrid, lane_d_center: float, lane_width: float) -> list:
    rows = []
    for row in range(grid.rows):
        d = grid.origin_d + (row + 0.5) * grid.cell_lat
        if abs(d - lane_d_center) <= lane_width / 2.0 - 1e-9:
            rows.append(row)
    return rows


def lane_profile(grid: EvalGrid, lane_d_center: float, lane_width: float):
    """(s centres, per-column mean over the lane's rows)."""
    rows = lane_rows(grid, lane_d_center, lane_width)
    if not rows:
        raise DataError("lane does not intersect the grid")
    s = np.array([grid.origin_s + (col + 0.5) * grid.cell_long
                  for col in range(grid.cols)])
    block = grid.values[rows, :]
    mask = grid.mask[rows, :]
    values = np.where(mask.all(axis=0), np.nan,
                      np.nanmean(np.where(mask, np.nan, block), axis=0))
    return s, values


def default_threshold(grid: EvalGrid, lane_d_center: float, lane_width: float,
                      sign_s: float, upstream_margin: float = 100.0) -> float:
    """Midpoint between the typical far-upstream level and the lane minimum."""
    s, values = lane_profile(grid, lane_d_center, lane_width)
    upstream = values[(s <= sign_s - upstream_margin) & ~np.isnan(values)]
    if len(upstream) == 0:
        upstream = values[~np.isnan(values)]
    reference = float(np.median(upstream))
    lane_min = float(np.nanmin(values))
    return 0.5 * (reference + lane_min)


def onset_distance(grid: EvalGrid, lane: Lane, sign_s: float,
                   threshold: float, lane_d_center: float) -> float | None:
    """Largest distance before the sign where the lane value drops below
    threshold, scanning from upstream towards the sign. None without a
    crossing."""
    s, values = lane_profile(grid, lane_d_center, lane.width)
    for si, vi in zip(s, values):
        if si >= sign_s:
            break
        if not np.isnan(vi) and vi < threshold:
            return float(sign_s - si)
    return None


def sign_binarize(grid: EvalGrid, level: float = 0.0) -> np.ndarray:
    """Boolean map of cells strictly below a level (off-road cells False)."""
    below = grid.values < level
    below[grid.mask] = False
    return below


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------

def grid_to_csv(grid: EvalGrid) -> str:
    out = io.StringIO()
    out.write("# RHGRID 1\n")
    out.write(f"# quantity = {grid.quantity}\n")
    out.write(f"# cell_long = {grid.cell_long!r}\n")
    out.write(f"# cell_lat = {grid.cell_lat!r}\n")
    out.write(f"# origin_s = {grid.origin_s!r}\n")
    out.write(f"# origin_d = {grid.origin_d!r}\n")
    out.write(f"# rows = {grid.rows}\n")
    out.write(f"# cols = {grid.cols}\n")
    for key in sorted(grid.meta):
        out.write(f"# meta.{key} = {grid.meta[key]}\n")
    out.write(GRID_CSV_HEADER + "\n")
    for row in range(grid.rows):
        for col in range(grid.cols):
            if grid.mask[row, col]:
                continue
            s, d = grid.cell_center(row, col)
            out.write(f"{s!r},{d!r},{grid.values[row, col]!r}\n")
    return out.getvalue()


def grid_from_csv(text: str) -> EvalGrid:
    header = {}
    meta = {}
    data_lines = []
    saw_header_row = False
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, _, value = body.partition("=")
                key = key.strip()
                if key.startswith("meta."):
                    meta[key[5:]] = value.strip()
                else:
                    header[key] = value.strip()
            continue
        if not saw_header_row:
            if line != GRID_CSV_HEADER:
                raise FormatError(f"grid CSV: expected header {GRID_CSV_HEADER!r}")
            saw_header_row = True
            continue
        data_lines.append(line)
    try:
        grid = EvalGrid(
            cell_long=float(header["cell_long"]),
            cell_lat=float(header["cell_lat"]),
            origin_s=float(header["origin_s"]),
            origin_d=float(header["origin_d"]),
            values=np.zeros((int(header["rows"]), int(header["cols"]))),
            mask=np.ones((int(header["rows"]), int(header["cols"])), dtype=bool),
            quantity=header.get("quantity", ""),
            meta=meta,
        )
    except KeyError as exc:
        raise FormatError(f"grid CSV: missing header field {exc}") from exc
    for line in data_lines:
        parts = line.split(",")
        if len(parts) != 3:
            raise FormatError(f"grid CSV: bad row {line!r}")
        s, d, value = (float(p) for p in parts)
        col = int(math.floor((s - grid.origin_s) / grid.cell_long))
        row = int(math.floor((d - grid.origin_d) / grid.cell_lat))
        if not (0 <= row < grid.rows and 0 <= col < grid.cols):
            raise DataError(f"grid CSV: cell ({s}, {d}) outside the grid")
        grid.values[row, col] = value
        grid.mask[row, col] = False
    return grid


_PURPLE = (68, 1, 84)
_YELLOW = (253, 231, 37)
_GREY = "#808080"


def _ramp(fraction: float) -> str:
    fraction = min(max(fraction, 0.0), 1.0)
    rgb = tuple(int(round(p + (y - p) * fraction))
                for p, y in zip(_PURPLE, _YELLOW))
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def grid_to_svg(grid: EvalGrid, scenario: Scenario | None = None,
                pixels_per_meter: float = 2.0) -> str:
    """Render cells on a yellow(high)-to-purple(low) ramp with lane lines
    and sign markers; masked cells are grey."""
    ppm = pixels_per_meter
    width_px = grid.cols * grid.cell_long * ppm
    height_px = grid.rows * grid.cell_lat * ppm
    finite = grid.values[~grid.mask]
    lo = float(finite.min()) if finite.size else 0.0
    hi = float(finite.max()) if finite.size else 1.0
    span = hi - lo if hi > lo else 1.0
    out = io.StringIO()
    out.write(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width_px:.0f}" '
        f'height="{height_px:.0f}" viewBox="0 0 {width_px:.2f} {height_px:.2f}">\n')
    out.write(f'<title>{grid.quantity}</title>\n')
    for row in range(grid.rows):
        for col in range(grid.cols):
            x = col * grid.cell_long * ppm
            # Rows render top-down with larger d at the top (driver-left up).
            y = (grid.rows - 1 - row) * grid.cell_lat * ppm
            if grid.mask[row, col]:
                fill = _GREY
            else:
                fill = _ramp((grid.values[row, col] - lo) / span)
            out.write(f'<rect x="{x:.2f}" y="{y:.2f}" '
                      f'width="{grid.cell_long * ppm:.2f}" '
                      f'height="{grid.cell_lat * ppm:.2f}" fill="{fill}"/>\n')
    if scenario is not None:
        network = scenario.lane_network
        boundaries = [network.d_min]
        for lane in network.lanes:
            boundaries.append(network.d_center(lane.lane_id) + lane.width / 2.0)
        for d in boundaries:
            y = (grid.rows * grid.cell_lat - (d - grid.origin_d)) * ppm
            out.write(f'<line x1="0" y1="{y:.2f}" x2="{width_px:.2f}" '
                      f'y2="{y:.2f}" stroke="white" stroke-width="1"/>\n')
        for sign in scenario.signs:
            x = (sign.s - grid.origin_s) * ppm
            out.write(f'<line x1="{x:.2f}" y1="0" x2="{x:.2f}" '
                      f'y2="{height_px:.2f}" stroke="red" stroke-width="2" '
                      f'stroke-dasharray="6,3"/>\n')
    out.write("</svg>\n")
    return out.getvalue()


def emit_grid(grid: EvalGrid, path, fmt: str, scenario: Scenario | None = None) -> None:
    if fmt == "csv":
        content = grid_to_csv(grid)
    elif fmt == "svg":
        content = grid_to_svg(grid, scenario)
    else:
        raise DataError(f"unknown grid format {fmt!r} (expected csv or svg)")
    try:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(content)
    except OSError as exc:
        raise DataError(f"cannot write grid to {path}: {exc}") from exc
