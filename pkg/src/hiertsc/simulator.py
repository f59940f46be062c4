"""Queue-based 1 s tick traffic simulation with yellow transitions, flow injection and ATT/ADT accounting.

Vehicles travel each lane at the speed limit and stop at the tail of the lane's queue.
Queue heads leave at most once per saturation headway when their movement is green and the
next lane on their route has room. Right turns ignore the signal.
"""

from __future__ import annotations

import hashlib
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .network import NUM_PHASES, VEHICLE_FOOTPRINT, Intersection, Network, phase_pressure

YELLOW_TIME = 5
GREEN_TIME = 10
CONTROL_STEP = YELLOW_TIME + GREEN_TIME
SATURATION_HEADWAY = 2
EPISODE_SECONDS = 3600
STEPS_PER_EPISODE = EPISODE_SECONDS // CONTROL_STEP

FLOW_PATTERNS = ("constant", "multimodal_gaussian", "peak_transition", "holiday_rush")


class NoTrafficError(ValueError):
    """Raised when a metric is requested over zero observed vehicles."""


@dataclass(frozen=True)
class FlowSpec:
    """Network-wide arrival-rate profile in vehicles per second.

    rate(t) = min_rate + (max_rate - min_rate) * shape(t), with shape(t) in [0, 1].
    `components` are (peak time s, std s, weight) triples for the Gaussian patterns; when
    omitted they come from `default_components(pattern, horizon, seed)`.
    """

    pattern: str = "constant"
    min_rate: float = 0.02
    max_rate: float = 0.02
    components: tuple[tuple[float, float, float], ...] = ()
    seed: int = 0
    horizon: int = EPISODE_SECONDS

    def __post_init__(self):
        if self.pattern not in FLOW_PATTERNS:
            raise ValueError(f"unknown flow pattern {self.pattern!r}; expected one of {FLOW_PATTERNS}")
        if not (0 < self.min_rate <= self.max_rate):
            raise ValueError(f"need 0 < min_rate <= max_rate, got {self.min_rate}, {self.max_rate}")
        if self.components:
            total = sum(w for _, _, w in self.components)
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"Gaussian weights must sum to 1, got {total}")
            if any(s <= 0 for _, s, _ in self.components):
                raise ValueError("Gaussian component std must be positive")
        object.__setattr__(self, "components", tuple(tuple(float(v) for v in c) for c in self.components))
        grid = np.arange(self.horizon + 1, dtype=float)
        object.__setattr__(self, "_peak", float(self._mixture(grid).max()))

    def _mixture(self, t) -> np.ndarray:
        comps = self.components or default_components(self.pattern, self.horizon, self.seed)
        out = 0.0
        for mu, sd, w in comps:
            out = out + w * np.exp(-0.5 * ((t - mu) / sd) ** 2)
        return out

    def shape(self, t) -> np.ndarray:
        if self.pattern == "constant":
            return np.ones_like(t, dtype=float) if np.ndim(t) else 1.0
        if self.pattern == "peak_transition":
            scale = self.horizon / 20.0
            return 1.0 / (1.0 + np.exp(-(np.asarray(t, dtype=float) - self.horizon / 2.0) / scale))
        mix = self._mixture(t) / self._peak
        if self.pattern == "holiday_rush":
            return 0.5 + 0.5 * mix
        return mix

    def rate(self, t) -> np.ndarray | float:
        r = self.min_rate + (self.max_rate - self.min_rate) * self.shape(t)
        return float(r) if np.ndim(r) == 0 else r


def default_components(pattern: str, horizon: int, seed: int = 0) -> tuple[tuple[float, float, float], ...]:
    """Canonical mixture for seed 0; other seeds jitter peak times (±5% of the horizon),
    widths (×0.8–1.2) and weights deterministically."""
    if pattern == "holiday_rush":
        base = ((0.35, 0.08, 0.5), (0.7, 0.1, 0.5))
    else:
        base = ((0.25, 0.08, 0.4), (0.5, 0.06, 0.25), (0.75, 0.08, 0.35))
    if seed:
        rng = np.random.default_rng(seed)
        mus = np.clip([m + rng.uniform(-0.05, 0.05) for m, _, _ in base], 0.05, 0.95)
        sds = [sd * rng.uniform(0.8, 1.2) for _, sd, _ in base]
        ws = np.array([w * rng.uniform(0.8, 1.2) for _, _, w in base])
        base = tuple(zip(mus, sds, ws / ws.sum()))
    return tuple((float(m) * horizon, float(sd) * horizon, float(w)) for m, sd, w in base)


class Vehicle:
    __slots__ = ("id", "route", "route_index", "entry_time", "exit_time", "position", "speed",
                 "wait_prior", "wait_start", "lane_entry", "theoretical_time")

    def __init__(self, vid: int, route: tuple[int, ...], theoretical_time: float):
        self.id = vid
        self.route = route
        self.route_index = 0
        self.entry_time: float | None = None
        self.exit_time: float | None = None
        self.position = 0.0
        self.speed = 0.0
        self.wait_prior = 0.0
        self.wait_start: float | None = None
        self.lane_entry = 0.0
        self.theoretical_time = theoretical_time

    @property
    def current_lane(self) -> int:
        return self.route[self.route_index]

    def cumulative_wait(self, clock: float) -> float:
        if self.wait_start is None:
            return self.wait_prior
        return self.wait_prior + (clock - self.wait_start)

    def __repr__(self):
        return (f"Vehicle(id={self.id}, lane={self.current_lane}, pos={self.position:.2f}, "
                f"entry={self.entry_time}, exit={self.exit_time})")


@dataclass
class SignalState:
    current_phase: int = 0
    time_in_phase: int = 0
    yellow_remaining: int = 0


@dataclass
class SimState:
    """Mutable world state for one episode of one environment instance."""

    network: Network
    flow: FlowSpec | None = None
    seed: int = 0
    horizon: int = EPISODE_SECONDS
    clock: int = 0
    control_step: int = 0
    vehicles: dict[int, Vehicle] = field(default_factory=dict)
    departed: list[Vehicle] = field(default_factory=list)
    injected: int = 0

    def __post_init__(self):
        net = self.network
        self.rng = np.random.default_rng(self.seed)
        self.lane_transit: list[deque[Vehicle]] = [deque() for _ in net.lanes]
        self.lane_queues: list[deque[Vehicle]] = [deque() for _ in net.lanes]
        self.last_discharge = [-math.inf] * len(net.lanes)
        self.signals = [SignalState() for _ in net.intersections]
        self.pending: list[deque[Vehicle]] = [deque() for _ in net.source_links]
        self.source_links = net.source_links
        self.crossed = [0] * len(net.intersections)
        # lanes with a signal at their downstream end, in id order
        self._controlled = [(lane.id, lane.downstream, lane.turn_role) for lane in net.lanes
                            if lane.downstream is not None]
        self._green = [[frozenset(m.in_lane for m in ph.signalized) for ph in inter.phases]
                       for inter in net.intersections]
        self._capacity = [lane.capacity for lane in net.lanes]
        self._length = [lane.length for lane in net.lanes]
        self._speed = [lane.speed_limit for lane in net.lanes]
        self._sink = [lane.downstream is None for lane in net.lanes]
        self._next_id = 0

    # -- queries ---------------------------------------------------------------------
    @property
    def pending_count(self) -> int:
        return sum(len(p) for p in self.pending)

    def lane_count(self, lane: int) -> int:
        return len(self.lane_transit[lane]) + len(self.lane_queues[lane])

    def lane_counts(self) -> dict[int, int]:
        return {l: len(t) + len(q) for l, (t, q) in enumerate(zip(self.lane_transit, self.lane_queues))}

    def queue_counts(self) -> dict[int, int]:
        return {l: len(q) for l, q in enumerate(self.lane_queues)}

    def head_wait(self, lane: int) -> float:
        q = self.lane_queues[lane]
        if not q:
            return 0.0
        return float(self.clock - q[0].wait_start)

    def fingerprint(self) -> str:
        """Digest of the full dynamic state; equal digests mean identical traces."""
        h = hashlib.sha256()
        h.update(repr((self.clock, self.injected, self.rng.bit_generator.state["state"])).encode())
        for lane in range(len(self.lane_transit)):
            h.update(repr([(v.id, v.position, v.route_index) for v in self.lane_transit[lane]]).encode())
            h.update(repr([(v.id, v.position, v.wait_start) for v in self.lane_queues[lane]]).encode())
        h.update(repr([(s.current_phase, s.time_in_phase, s.yellow_remaining) for s in self.signals]).encode())
        h.update(repr([(v.id, v.exit_time) for v in self.departed]).encode())
        return h.hexdigest()

    # -- dynamics --------------------------------------------------------------------
    def spawn(self, route: Sequence[int], source: int = 0) -> Vehicle:
        """Create a vehicle on `route` and queue it for insertion at `source`."""
        route = tuple(route)
        v = Vehicle(self._next_id, route, self.network.route_free_flow_time(route))
        self._next_id += 1
        self.injected += 1
        self.pending[source].append(v)
        return v

    def place(self, vehicle: Vehicle, position: float = 0.0) -> None:
        """Put a vehicle directly onto the first lane of its route (test and setup helper)."""
        lane = vehicle.current_lane
        vehicle.entry_time = float(self.clock)
        vehicle.lane_entry = float(self.clock)
        vehicle.position = position
        vehicle.speed = self._speed[lane]
        self.vehicles[vehicle.id] = vehicle
        self.lane_transit[lane].append(vehicle)

    def _release_pending(self) -> None:
        for queue in self.pending:
            while queue:
                v = queue[0]
                lane = v.current_lane
                if self.lane_count(lane) >= self._capacity[lane]:
                    break
                queue.popleft()
                self.place(v)

    def inject(self, flow: FlowSpec | None = None) -> None:
        flow = flow or self.flow
        if flow is None:
            return
        n_src = len(self.source_links)
        lam = flow.rate(self.clock) / n_src
        arrivals = self.rng.poisson(lam, size=n_src)
        routes = self.network.routes
        for s in np.flatnonzero(arrivals):
            options = self.network.routes_by_source[s]
            for _ in range(int(arrivals[s])):
                self.spawn(routes[options[int(self.rng.integers(len(options)))]], int(s))
        self._release_pending()

    def tick(self) -> None:
        t = self.clock
        end = t + 1
        # (a) free-flow progress; vehicles reaching the queue tail stop there
        for lane, transit in enumerate(self.lane_transit):
            if not transit:
                continue
            length = self._length[lane]
            if self._sink[lane]:
                while transit and transit[0].position + transit[0].speed >= length:
                    v = transit.popleft()
                    v.position = length
                    v.exit_time = float(end)
                    del self.vehicles[v.id]
                    self.departed.append(v)
                for v in transit:
                    v.position += v.speed
                continue
            queue = self.lane_queues[lane]
            tail = length - len(queue) * VEHICLE_FOOTPRINT
            for v in transit:
                v.position = min(v.position + v.speed, length)
            while transit and transit[0].position >= tail:
                v = transit.popleft()
                v.position = max(tail, 0.0)
                v.speed = 0.0
                v.wait_start = float(t)
                queue.append(v)
                tail -= VEHICLE_FOOTPRINT
        # (b) discharge from queue heads
        signals = self.signals
        for lane, node, turn in self._controlled:
            queue = self.lane_queues[lane]
            if not queue or t - self.last_discharge[lane] < SATURATION_HEADWAY:
                continue
            if turn != "right":
                sig = signals[node]
                if sig.yellow_remaining > 0 or lane not in self._green[node][sig.current_phase]:
                    continue
            v = queue[0]
            nxt = v.route[v.route_index + 1]
            if self.lane_count(nxt) >= self._capacity[nxt]:
                continue
            queue.popleft()
            self.last_discharge[lane] = t
            v.wait_prior += end - v.wait_start
            v.wait_start = None
            v.route_index += 1
            v.position = 0.0
            v.speed = self._speed[nxt]
            v.lane_entry = float(end)
            self.lane_transit[nxt].append(v)
            self.crossed[node] += 1
            # the vehicles behind shift forward by one footprint
            for w in queue:
                w.position = min(w.position + VEHICLE_FOOTPRINT, self._length[lane])
        # (e) signal timers
        for sig in signals:
            if sig.yellow_remaining > 0:
                sig.yellow_remaining -= 1
            else:
                sig.time_in_phase += 1
        self.clock = end

    def advance(self) -> None:
        """Inject this second's arrivals, then run one tick."""
        self.inject()
        self.tick()

    def apply_actions(self, actions: Mapping[int, int] | Sequence[int],
                      on_tick: Callable[["SimState"], None] | None = None) -> None:
        """Set phases and run one 15 s control step; `on_tick` (if given) is called after every tick."""
        if isinstance(actions, Mapping):
            actions = [actions[i] for i in range(len(self.signals))]
        actions = [int(a) for a in actions]
        if len(actions) != len(self.signals):
            raise ValueError(f"expected {len(self.signals)} actions, got {len(actions)}")
        for i, a in enumerate(actions):
            if not 0 <= a < NUM_PHASES:
                raise ValueError(f"phase index {a} out of range [0, {NUM_PHASES}) at intersection {i}")
        for sig, a in zip(self.signals, actions):
            if a != sig.current_phase:
                sig.current_phase = a
                sig.time_in_phase = 0
                sig.yellow_remaining = YELLOW_TIME
        self.crossed = [0] * len(self.signals)
        for _ in range(CONTROL_STEP):
            self.advance()
            if on_tick is not None:
                on_tick(self)
        self.control_step += 1

    @property
    def done(self) -> bool:
        return self.clock >= self.horizon


def new_state(network: Network, flow: FlowSpec | None = None, seed: int = 0,
              horizon: int = EPISODE_SECONDS) -> SimState:
    return SimState(network, flow=flow, seed=seed, horizon=horizon)


def inject_vehicles(state: SimState, flow: FlowSpec) -> SimState:
    state.inject(flow)
    return state


def step_tick(state: SimState) -> SimState:
    state.tick()
    return state


def apply_actions(state: SimState, actions) -> SimState:
    state.apply_actions(actions)
    return state


# -- metrics -------------------------------------------------------------------------

def _trips(departed: Iterable[Vehicle], active: Iterable[Vehicle], horizon: float):
    for v in departed:
        yield v.entry_time, v.exit_time, v.theoretical_time
    for v in active:
        yield v.entry_time, float(horizon), v.theoretical_time


def compute_att(departed: Iterable[Vehicle], active: Iterable[Vehicle], horizon: float) -> float:
    """Mean of (exit - entry); vehicles still in the network are censored at `horizon`."""
    times = [exit_ - entry for entry, exit_, _ in _trips(departed, active, horizon)]
    if not times:
        raise NoTrafficError("no vehicles observed; travel time undefined")
    return math.fsum(times) / len(times)


def compute_adt(departed: Iterable[Vehicle], active: Iterable[Vehicle], horizon: float) -> float:
    """Mean of (actual travel time - free-flow travel time), censored like compute_att."""
    delays = [(exit_ - entry) - tt for entry, exit_, tt in _trips(departed, active, horizon)]
    if not delays:
        raise NoTrafficError("no vehicles observed; delay undefined")
    return math.fsum(delays) / len(delays)


def episode_metrics(state: SimState) -> dict[str, float]:
    active = list(state.vehicles.values())
    return {
        "ATT": compute_att(state.departed, active, state.clock),
        "ADT": compute_adt(state.departed, active, state.clock),
        "throughput": float(len(state.departed)),
    }


# -- classical controllers -----------------------------------------------------------

def ftc_controller(state: SimState, cycle_order: Sequence[int] = tuple(range(NUM_PHASES)),
                   green: int = GREEN_TIME) -> list[int]:
    """Round-robin fixed-time plan; the phase advances every ceil(green / GREEN_TIME) steps."""
    hold = max(1, math.ceil(green / GREEN_TIME))
    phase = cycle_order[(state.control_step // hold) % len(cycle_order)]
    return [phase] * len(state.signals)


def max_pressure_controller(state: SimState) -> list[int]:
    counts = state.lane_counts()
    return [max_pressure_phase(counts, inter) for inter in state.network.intersections]


def max_pressure_phase(counts: Mapping[int, float], inter: Intersection) -> int:
    best, best_p = 0, -math.inf
    for k, phase in enumerate(inter.phases):
        p = phase_pressure(counts, inter, phase)
        if p > best_p:
            best, best_p = k, p
    return best


def run_episode(network: Network, flow: FlowSpec, controller, seed: int,
                horizon: int = EPISODE_SECONDS) -> SimState:
    """Run a full episode under a callable `controller(state) -> actions`."""
    state = new_state(network, flow, seed, horizon)
    while not state.done:
        state.apply_actions(controller(state))
    return state
