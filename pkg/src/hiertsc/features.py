"""Observation extraction: 66-dim per-intersection vectors, 4-dim regional states, and history."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import LANES_PER_INTERSECTION, Intersection, Network
from .simulator import CONTROL_STEP, SATURATION_HEADWAY, SimState

OBS_DIM = 66
REGION_DIM = 4
HISTORY_LEN = 20
WAIT_CLIP = 300.0
STOP_SPEED = 0.1

# block offsets inside the observation vector
CAR_NUM, QUEUE_LENGTH, OCCUPANCY, STOP_CAR_NUM, WAITING_TIME = (k * 12 for k in range(5))
FLOW, AVERAGE_SPEED, PRESSURE, DELAY_TIME, PHASE_INDEX, TIME_IN_PHASE = range(60, 66)
PHASE_TIME_SCALE = 120.0
DELAY_SCALE = 300.0


@dataclass
class IntersectionStats:
    """Raw (unnormalized) per-intersection quantities shared by observations and rewards."""

    counts: np.ndarray          # vehicles per incoming lane
    queued: np.ndarray          # stopped vehicles per incoming lane
    head_wait: np.ndarray       # waiting time of the first queued vehicle, s
    capacity: np.ndarray
    length: np.ndarray
    present: np.ndarray         # False where the lane slot does not exist
    pressure: float             # sum over signalized movements of (in - out) vehicle counts
    movements: int
    mean_speed: float           # m/s over vehicles on incoming lanes (0 if none)
    speed_limit: float
    mean_delay: float           # s, time on lane beyond free-flow time to current position
    crossed: int


def _movements(inter: Intersection):
    seen = {}
    for ph in inter.phases:
        for m in ph.signalized:
            seen[(m.in_lane, m.out_lane)] = m
    return list(seen.values())


def intersection_stats(state: SimState, inter: Intersection) -> IntersectionStats:
    net = state.network
    counts = np.zeros(LANES_PER_INTERSECTION)
    queued = np.zeros(LANES_PER_INTERSECTION)
    head_wait = np.zeros(LANES_PER_INTERSECTION)
    capacity = np.ones(LANES_PER_INTERSECTION)
    length = np.ones(LANES_PER_INTERSECTION)
    present = np.zeros(LANES_PER_INTERSECTION, dtype=bool)
    speeds, delays = [], []
    limit = net.speed_limit
    clock = state.clock
    for k, lane_id in enumerate(inter.incoming):
        if lane_id is None:
            continue
        lane = net.lanes[lane_id]
        present[k] = True
        capacity[k], length[k] = lane.capacity, lane.length
        transit, queue = state.lane_transit[lane_id], state.lane_queues[lane_id]
        counts[k] = len(transit) + len(queue)
        queued[k] = sum(1 for v in queue if v.speed < STOP_SPEED)
        head_wait[k] = state.head_wait(lane_id)
        for v in transit:
            speeds.append(v.speed)
            delays.append(max(0.0, (clock - v.lane_entry) - v.position / lane.speed_limit))
        for v in queue:
            speeds.append(v.speed)
            delays.append(max(0.0, (clock - v.lane_entry) - v.position / lane.speed_limit))
    moves = _movements(inter)
    pressure = float(sum(state.lane_count(m.in_lane) - state.lane_count(m.out_lane) for m in moves))
    return IntersectionStats(
        counts=counts, queued=queued, head_wait=head_wait, capacity=capacity, length=length,
        present=present, pressure=pressure, movements=max(len(moves), 1),
        mean_speed=float(np.mean(speeds)) if speeds else 0.0, speed_limit=limit,
        mean_delay=float(np.mean(delays)) if delays else 0.0, crossed=state.crossed[inter.id],
    )


def observation_from_stats(st: IntersectionStats, phase: int, time_in_phase: float) -> np.ndarray:
    obs = np.zeros(OBS_DIM)
    cap = st.capacity
    obs[CAR_NUM:CAR_NUM + 12] = st.counts / cap
    obs[QUEUE_LENGTH:QUEUE_LENGTH + 12] = np.minimum(st.queued * 7.5 / st.length, 1.0)
    obs[OCCUPANCY:OCCUPANCY + 12] = np.minimum(st.counts * 7.5 / st.length, 1.0)
    obs[STOP_CAR_NUM:STOP_CAR_NUM + 12] = st.queued / cap
    obs[WAITING_TIME:WAITING_TIME + 12] = np.minimum(st.head_wait, WAIT_CLIP) / WAIT_CLIP
    obs[:60].reshape(5, 12)[:, ~st.present] = 0.0
    obs[FLOW] = min(st.crossed / flow_saturation(), 1.0)
    obs[AVERAGE_SPEED] = st.mean_speed / st.speed_limit
    obs[PRESSURE] = st.pressure / (st.movements * cap.max())
    obs[DELAY_TIME] = min(st.mean_delay, DELAY_SCALE) / DELAY_SCALE
    obs[PHASE_INDEX] = phase / 7.0
    obs[TIME_IN_PHASE] = min(time_in_phase, PHASE_TIME_SCALE) / PHASE_TIME_SCALE
    return obs


def flow_saturation() -> float:
    """Most vehicles 12 lanes can discharge in one control step."""
    return LANES_PER_INTERSECTION * math.ceil(CONTROL_STEP / SATURATION_HEADWAY)


def intersection_observation(state: SimState, inter: Intersection) -> np.ndarray:
    sig = state.signals[inter.id]
    return observation_from_stats(intersection_stats(state, inter), sig.current_phase, sig.time_in_phase)


def all_observations(state: SimState) -> tuple[np.ndarray, list[IntersectionStats]]:
    stats = [intersection_stats(state, inter) for inter in state.network.intersections]
    obs = np.stack([observation_from_stats(st, sig.current_phase, sig.time_in_phase)
                    for st, sig in zip(stats, state.signals)])
    return obs, stats


class RegionalFeaturizer:
    """Computes per-region (stop_car_num, waiting_time, centroid_x, centroid_y).

    The waiting-time component is divided by the largest regional sum seen so far in the
    episode; call `reset` at episode start.
    """

    def __init__(self, network: Network):
        self.network = network
        x0, y0, x1, y1 = network.bounding_box
        self.centroids = np.array([
            [(cx - x0) / (x1 - x0) if x1 > x0 else 0.5, (cy - y0) / (y1 - y0) if y1 > y0 else 0.5]
            for cx, cy in network.regions.centroids
        ])
        self.running_max = 0.0

    def reset(self) -> None:
        self.running_max = 0.0

    def region_raw(self, stats: list[IntersectionStats], members) -> tuple[float, float]:
        if not members:
            raise ValueError("region has no member intersections")
        stop = sum(float((stats[i].queued / stats[i].capacity)[stats[i].present].sum()) for i in members)
        wait = sum(float(stats[i].head_wait.sum()) for i in members)
        return stop / (len(members) * LANES_PER_INTERSECTION), wait

    def snapshot(self, stats: list[IntersectionStats]) -> np.ndarray:
        raw = [self.region_raw(stats, m) for m in self.network.regions.members]
        waits = np.array([w for _, w in raw])
        self.running_max = max(self.running_max, float(waits.max(initial=0.0)))
        out = np.zeros((len(raw), REGION_DIM))
        out[:, 0] = [s for s, _ in raw]
        out[:, 1] = waits / self.running_max if self.running_max > 0 else 0.0
        out[:, 2:] = self.centroids
        return out


def regional_state(state: SimState, region: int, featurizer: RegionalFeaturizer | None = None) -> np.ndarray:
    """4-dim state of one region; uses a fresh featurizer (running max over this call) if none given."""
    featurizer = featurizer or RegionalFeaturizer(state.network)
    members = state.network.regions.members[region]
    if not members:
        raise ValueError(f"region {region} is empty")
    stats = [intersection_stats(state, inter) for inter in state.network.intersections]
    return featurizer.snapshot(stats)[region]


class RegionalHistory:
    """Fixed-length ring of regional snapshots, zero-padded at the front until full."""

    def __init__(self, regions: int, length: int = HISTORY_LEN):
        if regions < 1:
            raise ValueError("need at least one region")
        self.regions = regions
        self.length = length
        self._buf = np.zeros((length, regions, REGION_DIM))
        self.count = 0

    def push(self, snapshot: np.ndarray) -> "RegionalHistory":
        snapshot = np.asarray(snapshot, dtype=float)
        if snapshot.shape != (self.regions, REGION_DIM):
            raise ValueError(f"snapshot shape {snapshot.shape} != {(self.regions, REGION_DIM)}")
        self._buf = np.roll(self._buf, -1, axis=0)
        self._buf[-1] = snapshot
        self.count += 1
        return self

    @property
    def full(self) -> bool:
        return self.count >= self.length

    def tensor(self) -> np.ndarray:
        """(T, M, 4) view, oldest first and newest in the last row."""
        return self._buf.copy()


def push_history(history: RegionalHistory, snapshot: np.ndarray) -> RegionalHistory:
    return history.push(snapshot)
