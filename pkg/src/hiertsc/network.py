"""Static road-network model: grid construction, lanes, movements, phases, pressure and regions."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

SIDES = ("N", "E", "S", "W")
TURNS = ("left", "through", "right")
VEHICLE_FOOTPRINT = 7.5  # meters of jam spacing per vehicle
NUM_PHASES = 8
LANES_PER_INTERSECTION = 12


def _exit_side(approach: int, turn: str) -> int:
    # sides are indexed clockwise; a driver arriving from `approach` heads toward the opposite side
    return {"left": (approach + 1) % 4, "through": (approach + 2) % 4, "right": (approach + 3) % 4}[turn]


@dataclass(frozen=True)
class Lane:
    id: int
    name: str
    link: int
    length: float
    speed_limit: float
    capacity: int
    direction: str
    turn_role: str
    upstream: int | None
    downstream: int | None

    def __post_init__(self):
        if self.length <= 0 or self.speed_limit <= 0 or self.capacity < 1:
            raise ValueError(f"invalid lane {self.name}: length={self.length}, "
                             f"speed_limit={self.speed_limit}, capacity={self.capacity}")

    @property
    def free_flow_time(self) -> float:
        return self.length / self.speed_limit


@dataclass(frozen=True)
class Link:
    """Three parallel lanes (left, through, right) from `upstream` to `downstream`.

    Either end may be None: a None upstream is a boundary source, a None downstream a sink.
    `side` is the approach side at the downstream node (or the exit side at the upstream node
    for sinks).
    """

    id: int
    upstream: int | None
    downstream: int | None
    side: str
    lanes: tuple[int, int, int]


@dataclass(frozen=True)
class Movement:
    in_lane: int
    out_lane: int
    turn: str


@dataclass(frozen=True)
class Phase:
    index: int
    movements: tuple[Movement, ...]

    @property
    def signalized(self) -> tuple[Movement, ...]:
        return tuple(m for m in self.movements if m.turn != "right")


@dataclass(frozen=True)
class Intersection:
    id: int
    name: str
    position: tuple[float, float]
    incoming: tuple[int | None, ...]
    outgoing: tuple[int | None, ...]
    phases: tuple[Phase, ...]
    neighbors: tuple[int, ...]
    approach_links: tuple[int | None, ...]
    exit_links: tuple[int | None, ...]


@dataclass(frozen=True)
class RegionPartition:
    grid: tuple[int, int]
    members: tuple[tuple[int, ...], ...]
    centroids: tuple[tuple[float, float], ...]
    assignment: tuple[int, ...]

    @property
    def count(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class Network:
    rows: int
    cols: int
    link_length: float
    speed_limit: float
    intersections: tuple[Intersection, ...]
    lanes: tuple[Lane, ...]
    links: tuple[Link, ...]
    adjacency: np.ndarray = field(repr=False)
    regions: RegionPartition = field(repr=False)
    routes: tuple[tuple[int, ...], ...] = field(repr=False)
    routes_by_source: tuple[tuple[int, ...], ...] = field(repr=False)

    @property
    def num_intersections(self) -> int:
        return len(self.intersections)

    @property
    def source_links(self) -> tuple[Link, ...]:
        return tuple(lk for lk in self.links if lk.upstream is None)

    @property
    def sink_links(self) -> tuple[Link, ...]:
        return tuple(lk for lk in self.links if lk.downstream is None)

    @property
    def bounding_box(self) -> tuple[float, float, float, float]:
        xs = [i.position[0] for i in self.intersections]
        ys = [i.position[1] for i in self.intersections]
        return min(xs), min(ys), max(xs), max(ys)

    def with_regions(self, region_rows: int, region_cols: int) -> "Network":
        return replace(self, regions=partition_regions(self, region_rows, region_cols))

    def route_free_flow_time(self, route: Sequence[int]) -> float:
        return sum(self.lanes[l].free_flow_time for l in route)


def standard_phase_set(
    incoming: Sequence[int | None] | None = None,
    exit_lanes: Sequence[Sequence[int] | None] | None = None,
) -> tuple[Phase, ...]:
    """Return the fixed 8-phase scheme.

    Phase order: NS-through, NS-left, EW-through, EW-left, then the four single-approach
    through+left phases N, S, E, W.  Right turns are permitted in every phase.

    Without arguments the movements use symbolic lane ids: incoming lane ``3*side + turn``
    and outgoing lanes ``100 + 3*exit_side + k``.  A network supplies its real lane ids; an
    approach whose lane is None contributes no movements.
    """
    if incoming is None:
        incoming = list(range(LANES_PER_INTERSECTION))
    if exit_lanes is None:
        exit_lanes = [tuple(100 + 3 * s + k for k in range(3)) for s in range(4)]

    def moves(side: str, turn: str) -> list[Movement]:
        s, t = SIDES.index(side), TURNS.index(turn)
        lane = incoming[3 * s + t]
        outs = exit_lanes[_exit_side(s, turn)]
        if lane is None or outs is None:
            return []
        return [Movement(lane, out, turn) for out in outs]

    rights = [m for side in SIDES for m in moves(side, "right")]
    groups = [
        [("N", "through"), ("S", "through")],
        [("N", "left"), ("S", "left")],
        [("E", "through"), ("W", "through")],
        [("E", "left"), ("W", "left")],
        [("N", "through"), ("N", "left")],
        [("S", "through"), ("S", "left")],
        [("E", "through"), ("E", "left")],
        [("W", "through"), ("W", "left")],
    ]
    phases = []
    for k, group in enumerate(groups):
        movements = [m for side, turn in group for m in moves(side, turn)]
        phases.append(Phase(k, tuple(movements + rights)))
    return tuple(phases)


def phase_pressure(queues: Mapping[int, float], intersection: Intersection | None, phase: Phase) -> float:
    """Sum of (upstream count - downstream count) over the phase's signalized movements."""
    total = 0.0
    for m in phase.signalized:
        try:
            total += queues[m.in_lane] - queues[m.out_lane]
        except KeyError as exc:
            where = f" at intersection {intersection.name}" if intersection is not None else ""
            raise KeyError(f"no queue value for lane {exc.args[0]}{where}") from None
    return total


def partition_regions(network: Network, region_rows: int, region_cols: int) -> RegionPartition:
    """Bucket intersections into a region_rows x region_cols grid over the bounding box."""
    if region_rows < 1 or region_cols < 1:
        raise ValueError(f"region grid must be at least 1x1, got {region_rows}x{region_cols}")
    n = len(network.intersections)
    if region_rows * region_cols > n:
        raise ValueError(f"region grid {region_rows}x{region_cols} exceeds {n} intersections")
    x0, y0, x1, y1 = network.bounding_box
    width, height = x1 - x0, y1 - y0

    def bucket(v: float, lo: float, extent: float, k: int) -> int:
        if extent <= 0:
            return 0
        return min(int((v - lo) / extent * k), k - 1)

    cells: dict[int, list[int]] = {}
    for inter in network.intersections:
        x, y = inter.position
        # region row 0 is the northern band
        row = region_rows - 1 - bucket(y, y0, height, region_rows)
        col = bucket(x, x0, width, region_cols)
        cells.setdefault(row * region_cols + col, []).append(inter.id)
    members = tuple(tuple(sorted(cells[c])) for c in sorted(cells))
    assignment = [0] * n
    centroids = []
    for r, ids in enumerate(members):
        for i in ids:
            assignment[i] = r
        pts = np.array([network.intersections[i].position for i in ids], dtype=float)
        centroids.append((float(pts[:, 0].mean()), float(pts[:, 1].mean())))
    return RegionPartition((region_rows, region_cols), members, tuple(centroids), tuple(assignment))


def build_grid_network(rows: int, cols: int, link_length: float = 200.0, speed_limit: float = 13.89,
                       region_rows: int = 1, region_cols: int = 1) -> Network:
    """Build a rows x cols grid of 4-leg intersections.

    Interior links join adjacent intersections in both directions. Every side without a
    neighbor gets a boundary source link (entering) and a sink link (leaving), so each
    intersection has 12 incoming and 12 outgoing lanes.
    """
    if not (isinstance(rows, int) and isinstance(cols, int)) or rows < 1 or cols < 1:
        raise ValueError(f"grid dimensions must be positive integers, got {rows}x{cols}")
    if link_length <= 0 or speed_limit <= 0:
        raise ValueError(f"link_length and speed_limit must be positive, got {link_length}, {speed_limit}")

    capacity = int(math.floor(link_length / VEHICLE_FOOTPRINT))
    n = rows * cols
    positions = [(c * link_length, (rows - 1 - r) * link_length) for r in range(rows) for c in range(cols)]
    offsets = {0: (-1, 0), 1: (0, 1), 2: (1, 0), 3: (0, -1)}  # N, E, S, W in (row, col)

    def neighbor(i: int, side: int) -> int | None:
        r, c = divmod(i, cols)
        dr, dc = offsets[side]
        rr, cc = r + dr, c + dc
        if 0 <= rr < rows and 0 <= cc < cols:
            return rr * cols + cc
        return None

    lanes: list[Lane] = []
    links: list[Link] = []
    approach = [[None] * 4 for _ in range(n)]
    exits = [[None] * 4 for _ in range(n)]

    def add_link(up: int | None, down: int | None, side: int) -> int:
        lid = len(links)
        ids = []
        for t, turn in enumerate(TURNS):
            ends = f"{'src' if up is None else up}->{'sink' if down is None else down}"
            lanes.append(Lane(len(lanes), f"{ends}:{SIDES[side]}:{turn}", lid, float(link_length),
                              float(speed_limit), capacity, SIDES[side], turn, up, down))
            ids.append(lanes[-1].id)
        links.append(Link(lid, up, down, SIDES[side], tuple(ids)))
        return lid

    for i in range(n):
        for side in range(4):
            j = neighbor(i, side)
            if j is None:
                approach[i][side] = add_link(None, i, side)
                exits[i][side] = add_link(i, None, side)
            else:
                # link i -> j arrives at j from the opposite side
                lid = add_link(i, j, (side + 2) % 4)
                exits[i][side] = lid
                approach[j][(side + 2) % 4] = lid

    adjacency = np.zeros((n, n), dtype=bool)
    intersections = []
    for i in range(n):
        incoming = tuple(links[approach[i][s]].lanes[t] for s in range(4) for t in range(3))
        outgoing = tuple(links[exits[i][s]].lanes[t] for s in range(4) for t in range(3))
        exit_lanes = [links[exits[i][s]].lanes for s in range(4)]
        nbrs = [j for j in (neighbor(i, s) for s in range(4)) if j is not None]
        px, py = positions[i]
        nbrs.sort(key=lambda j: (math.hypot(positions[j][0] - px, positions[j][1] - py), j))
        adjacency[i, nbrs] = True
        intersections.append(Intersection(
            id=i, name=f"i{i // cols}_{i % cols}", position=positions[i], incoming=incoming,
            outgoing=outgoing, phases=standard_phase_set(incoming, exit_lanes), neighbors=tuple(nbrs),
            approach_links=tuple(approach[i]), exit_links=tuple(exits[i]),
        ))
    adjacency.setflags(write=False)

    routes, by_source = _enumerate_routes(links, lanes, approach, exits)
    net = Network(rows, cols, float(link_length), float(speed_limit), tuple(intersections), tuple(lanes),
                  tuple(links), adjacency, RegionPartition((1, 1), (tuple(range(n)),), ((0.0, 0.0),),
                                                          (0,) * n), routes, by_source)
    return replace(net, regions=partition_regions(net, region_rows, region_cols))


def _enumerate_routes(links, lanes, approach, exits):
    """Shortest (fewest-link) lane routes from every source link to every reachable sink.

    Trips that leave through the sink on the same side of the same intersection they entered
    (U-turns) are skipped. Ties prefer through movements, then left, then right.
    """
    pref = ("through", "left", "right")
    routes: list[tuple[int, ...]] = []
    by_source: list[tuple[int, ...]] = []
    for src in links:
        if src.upstream is not None:
            continue
        parent: dict[int, tuple[int, str] | None] = {src.id: None}
        queue = deque([src.id])
        while queue:
            lid = queue.popleft()
            node = links[lid].downstream
            if node is None:
                continue
            side = approach[node].index(lid)
            for turn in pref:
                nxt = exits[node][_exit_side(side, turn)]
                if nxt not in parent:
                    parent[nxt] = (lid, turn)
                    queue.append(nxt)
        mine = []
        for sink in links:
            if sink.downstream is not None or sink.id not in parent:
                continue
            if sink.upstream == src.downstream and sink.side == src.side:
                continue
            path = [sink.lanes[TURNS.index("through")]]
            cur = sink.id
            while parent[cur] is not None:
                prev, turn = parent[cur]
                path.append(links[prev].lanes[TURNS.index(turn)])
                cur = prev
            mine.append(len(routes))
            routes.append(tuple(reversed(path)))
        by_source.append(tuple(mine))
    return tuple(routes), tuple(by_source)
