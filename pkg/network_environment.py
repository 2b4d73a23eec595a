import logging
from collections import deque
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Deque, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from channel_model import GainMatrix
from scenario_config import ScenarioConfig
from simulation_errors import ContractViolation, DomainError, OutputError, ShapeError

logger = logging.getLogger(__name__)

GainLike = Union[GainMatrix, np.ndarray]


def _gains(G: GainLike) -> np.ndarray:
    return G.g if isinstance(G, GainMatrix) else np.asarray(G, dtype=float)


def received_powers(powers, G: GainLike) -> np.ndarray:
    """received[k, n] = p_k * g[k, n], the power of AP k arriving at UE n."""
    g = _gains(G)
    p = np.asarray(powers, dtype=float)
    if p.shape != (g.shape[0],):
        raise ShapeError(f"Expected {g.shape[0]} powers, got shape {p.shape}")
    return p[:, np.newaxis] * g


def interference_powers(powers, G: GainLike) -> np.ndarray:
    """Sum over k != n of p_k * g[k, n], for every receiver n."""
    received = received_powers(powers, G)
    np.fill_diagonal(received, 0.0)
    return received.sum(axis=0)


def link_sinrs(powers, G: GainLike, noise: float) -> np.ndarray:
    """SINR of every link under the given powers."""
    received = received_powers(powers, G)
    signal = np.diag(received).copy()
    np.fill_diagonal(received, 0.0)
    return signal / (received.sum(axis=0) + noise)


def compute_sinr(powers, G: GainLike, noise: float, n: int) -> float:
    """gamma_n = p_n g[n, n] / (sum_{k != n} p_k g[k, n] + noise)."""
    return float(link_sinrs(powers, G, noise)[n])


def compute_rate(sinr, bandwidth: float):
    """Shannon rate B log2(1 + sinr) in bps."""
    s = np.asarray(sinr, dtype=float)
    if np.any(s < 0):
        raise DomainError(f"SINR must be non-negative, got {sinr}")
    rate = bandwidth * np.log2(1.0 + s)
    return float(rate) if rate.ndim == 0 else rate


def sum_rate(powers, G: GainLike, noise: float, bandwidth: float) -> float:
    """Total rate of all links in bps."""
    return float(np.sum(compute_rate(link_sinrs(powers, G, noise), bandwidth)))


@dataclass(frozen=True)
class LocalState:
    """The seven local measurements AP n holds at the start of a slot."""
    g_own_prev: float
    p_prev: float
    interf_prev: float
    sinr_prev: float
    rate_prev: float
    g_own_now: float
    interf_now: float

    def as_vector(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=float)


LOCAL_STATE_FIELDS = tuple(f.name for f in fields(LocalState))
RATE_FIELD_INDEX = LOCAL_STATE_FIELDS.index("rate_prev")


@dataclass(frozen=True)
class AuxiliaryInfo:
    """Per-interferer received powers p_k(t-1) g[k, n](t) measured at UE n."""
    receiver: int
    received: Dict[int, float]

    def total(self) -> float:
        return float(sum(self.received.values()))


@dataclass(frozen=True)
class SlotRecord:
    """Outcome of one slot: gains in force, chosen powers and resulting rates."""
    slot: int
    gains: GainMatrix
    powers: np.ndarray
    sinrs: np.ndarray
    rates: np.ndarray
    spectral_efficiency: np.ndarray
    sum_rate: float

    @property
    def sum_spectral_efficiency(self) -> float:
        return float(np.sum(self.spectral_efficiency))


def make_slot_record(slot: int, powers, G: GainMatrix, noise: float, bandwidth: float) -> SlotRecord:
    """Evaluate SINRs and rates of a slot and package them as a record."""
    p = np.asarray(powers, dtype=float).copy()
    sinrs = link_sinrs(p, G, noise)
    efficiency = np.log2(1.0 + sinrs)
    rates = bandwidth * efficiency
    return SlotRecord(
        slot=slot,
        gains=G,
        powers=p,
        sinrs=sinrs,
        rates=rates,
        spectral_efficiency=efficiency,
        sum_rate=float(np.sum(rates)),
    )


def build_local_state(prev: SlotRecord, G_now: GainLike, n: int) -> LocalState:
    """
    Assemble s_n(t) from the previous slot's record and the current gains.

    The current-slot interference is measured under the previous slot's
    powers, since no AP has chosen its new power yet.
    """
    g_prev = prev.gains.g
    g_now = _gains(G_now)
    return LocalState(
        g_own_prev=float(g_prev[n, n]),
        p_prev=float(prev.powers[n]),
        interf_prev=float(interference_powers(prev.powers, g_prev)[n]),
        sinr_prev=float(prev.sinrs[n]),
        rate_prev=float(prev.spectral_efficiency[n]),
        g_own_now=float(g_now[n, n]),
        interf_now=float(interference_powers(prev.powers, g_now)[n]),
    )


def build_aux_info(powers_prev, G_now: GainLike, n: int) -> AuxiliaryInfo:
    """Received power from every other AP at UE n, under previous powers and current gains."""
    received = received_powers(powers_prev, G_now)[:, n]
    return AuxiliaryInfo(
        receiver=n,
        received={k: float(received[k]) for k in range(received.shape[0]) if k != n},
    )


def feature_map(x):
    """f(x) = 10 log10(1 + x), applied elementwise."""
    values = np.asarray(x, dtype=float)
    if np.any(values < 0):
        raise DomainError("Features must be non-negative before the log mapping")
    mapped = 10.0 * np.log10(1.0 + values)
    return float(mapped) if mapped.ndim == 0 else mapped


def preprocess_features(raw: Union[LocalState, GainMatrix, np.ndarray, float]):
    """
    Map noise-normalized measurements into network features.

    Local states get f on every entry except the rate, which stays in
    bps/Hz; gain matrices are mapped entrywise and flattened row-major.
    """
    if isinstance(raw, LocalState):
        vector = raw.as_vector()
        mapped = feature_map(vector)
        mapped[RATE_FIELD_INDEX] = vector[RATE_FIELD_INDEX]
        return mapped
    if isinstance(raw, GainMatrix):
        return feature_map(raw.g).reshape(-1)
    return feature_map(raw)


class DelayLine:
    """FIFO channel that releases a payload exactly `delay` slots after it was sent."""

    def __init__(self, delay: int):
        if delay < 0:
            raise ContractViolation(f"Delay must be non-negative, got {delay}")
        self.delay = delay
        self._queue: Deque[Tuple[int, Any]] = deque()

    def push(self, payload: Any, slot: int) -> int:
        """Send a payload in `slot`; returns the slot in which it becomes visible."""
        release = slot + self.delay
        if self._queue and release < self._queue[-1][0]:
            raise ContractViolation("Payloads must be pushed in slot order")
        self._queue.append((release, payload))
        return release

    def pop_released(self, slot: int) -> List[Any]:
        """Remove and return, in sending order, every payload visible by `slot`."""
        released = []
        while self._queue and self._queue[0][0] <= slot:
            released.append(self._queue.popleft()[1])
        return released

    def __len__(self) -> int:
        return len(self._queue)


class HetNetEnvironment:
    """Time-slotted downlink interference channel seen by N APs."""

    def __init__(self, config: ScenarioConfig, gain_source: Iterable[GainMatrix], start_slot: int = 0):
        """
        Initialize the environment.

        Args:
            config: Scenario with noise power, bandwidth and power caps
            gain_source: Raw gain matrices, one per slot starting at `start_slot`
            start_slot: Index of the bootstrap slot consumed by reset()
        """
        self.config = config
        self.noise_power = config.noise_power_watts
        self.bandwidth = config.bandwidth_hz
        self.p_max = config.p_max
        self.p_floor = config.p_floor
        self.start_slot = start_slot
        self._gain_source = iter(gain_source)
        self.last_record: Optional[SlotRecord] = None
        self.next_gains: Optional[GainMatrix] = None

    @property
    def num_aps(self) -> int:
        return self.config.num_aps

    def _draw_gains(self) -> GainMatrix:
        try:
            raw = next(self._gain_source)
        except StopIteration:
            raise ContractViolation("Gain source exhausted before the run finished")
        if raw.size != self.num_aps:
            raise ShapeError(f"Gain matrix for {raw.size} APs in a {self.num_aps}-AP scenario")
        return raw.normalized(self.noise_power)

    def _check_powers(self, powers: np.ndarray) -> None:
        if powers.shape != (self.num_aps,):
            raise ShapeError(f"Expected {self.num_aps} actions, got shape {powers.shape}")
        if np.any(powers < self.p_floor) or np.any(powers > self.p_max) or not np.all(np.isfinite(powers)):
            raise ContractViolation(f"Actions {powers} outside [p_floor, p_max]")

    def _measure(self) -> Tuple[List[LocalState], List[AuxiliaryInfo]]:
        prev = self.last_record
        states = [build_local_state(prev, self.next_gains, n) for n in range(self.num_aps)]
        aux = [build_aux_info(prev.powers, self.next_gains, n) for n in range(self.num_aps)]
        return states, aux

    def reset(self, initial_powers) -> Tuple[List[LocalState], List[AuxiliaryInfo]]:
        """
        Play the bootstrap slot with `initial_powers` and measure the first real slot.

        Returns:
            Tuple of (local states, auxiliary infos) for slot start_slot + 1
        """
        powers = np.asarray(initial_powers, dtype=float)
        self._check_powers(powers)
        self.last_record = make_slot_record(self.start_slot, powers, self._draw_gains(), 1.0, self.bandwidth)
        self.next_gains = self._draw_gains()
        return self._measure()

    @property
    def current_slot(self) -> int:
        """Slot whose actions advance() will apply next."""
        return self.last_record.slot + 1

    def advance(self, actions) -> Tuple[SlotRecord, List[LocalState], List[AuxiliaryInfo]]:
        """
        Apply one slot's transmit powers.

        The slot's gains were drawn when the previous slot ended and the UEs
        measured them under the old powers; rates are computed with the new
        powers, then the next slot's gains are drawn and measured.

        Returns:
            Tuple of (record of this slot, next local states, next auxiliary infos)
        """
        if self.last_record is None:
            raise ContractViolation("reset() must be called before advance()")
        powers = np.asarray(actions, dtype=float)
        self._check_powers(powers)
        record = make_slot_record(self.current_slot, powers, self.next_gains, 1.0, self.bandwidth)
        self.last_record = record
        self.next_gains = self._draw_gains()
        states, aux = self._measure()
        return record, states, aux


def env_advance(env: HetNetEnvironment, actions) -> Tuple[SlotRecord, List[LocalState], List[AuxiliaryInfo]]:
    """Advance `env` by one slot with the given actions."""
    return env.advance(actions)


def records_to_frame(records: Sequence[SlotRecord]) -> pd.DataFrame:
    """Tabulate slot records as columns slot, p_1..p_N, r_1..r_N, R (rates in bps)."""
    if not records:
        return pd.DataFrame(columns=["slot", "R"])
    n = records[0].powers.shape[0]
    rows = []
    for record in records:
        row = {"slot": record.slot}
        row.update({f"p_{i + 1}": record.powers[i] for i in range(n)})
        row.update({f"r_{i + 1}": record.rates[i] for i in range(n)})
        row["R"] = record.sum_rate
        rows.append(row)
    return pd.DataFrame(rows)


def write_records_csv(records: Sequence[SlotRecord], path: Union[str, Path]) -> Path:
    """Write slot records to CSV with 17 significant digits."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        records_to_frame(records).to_csv(path, index=False, float_format="%.17g")
    except OSError as e:
        raise OutputError(f"Could not write {path}: {e}") from e
    return path
