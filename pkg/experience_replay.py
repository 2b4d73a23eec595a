import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Deque, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from channel_model import GainMatrix
from network_environment import LOCAL_STATE_FIELDS, AuxiliaryInfo, LocalState, preprocess_features
from simulation_errors import ConfigurationError, IncompleteSlotError, InsufficientDataError, OutputError, ReconstructionError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LocalExperience:
    """e_n(t) = (s_n(t), a_n(t), r_n(t), s_n(t+1)) recorded by AP n."""
    ap: int
    s: LocalState
    a: float
    r: float
    s_next: LocalState
    slot: int


@dataclass(frozen=True)
class LocalUpload:
    """What AP n sends to the core network after slot t: its experience and both aux measurements."""
    experience: LocalExperience
    aux_prev: AuxiliaryInfo
    aux_now: AuxiliaryInfo

    @property
    def slot(self) -> int:
        return self.experience.slot


@dataclass
class GlobalExperience:
    """Joint experience of all APs for one slot, with reconstructed gain matrices."""
    states: List[LocalState]
    s_o: GainMatrix
    actions: np.ndarray
    reward_sum: float
    next_states: List[LocalState]
    s_o_next: GainMatrix
    slot: int
    _features: Optional[np.ndarray] = field(default=None, repr=False)
    _next_features: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def num_aps(self) -> int:
        return len(self.states)

    def state_features(self) -> np.ndarray:
        """Critic state input: preprocessed local states followed by the flattened gain matrix."""
        if self._features is None:
            self._features = global_state_features(self.states, self.s_o)
        return self._features

    def next_state_features(self) -> np.ndarray:
        if self._next_features is None:
            self._next_features = global_state_features(self.next_states, self.s_o_next)
        return self._next_features


def global_state_features(states: Sequence[LocalState], gains: GainMatrix) -> np.ndarray:
    """Concatenate f(s_1), ..., f(s_N) and f(G) into a 7N + N^2 vector."""
    return np.concatenate([preprocess_features(s) for s in states] + [preprocess_features(gains)])


def reconstruct_gain_matrix(local_states: Sequence[LocalState], aux: Sequence[AuxiliaryInfo],
                            powers_prev, p_floor=None) -> GainMatrix:
    """
    Recover the full gain matrix of a slot from local measurements.

    Own gains come from the local states; cross gains are the received
    powers divided by the transmit powers that produced them.

    Args:
        local_states: s_n(t) for every AP
        aux: Auxiliary info o_n(t) for every AP, ordered by receiver
        powers_prev: Transmit powers p(t-1) under which aux was measured
        p_floor: Minimum admissible power per AP (defaults to strictly positive)

    Returns:
        Reconstructed GainMatrix for slot t
    """
    n_aps = len(local_states)
    powers = np.asarray(powers_prev, dtype=float)
    if len(aux) != n_aps or powers.shape != (n_aps,):
        raise ReconstructionError(
            f"Need {n_aps} aux entries and powers, got {len(aux)} and shape {powers.shape}"
        )
    floor = np.zeros(n_aps) if p_floor is None else np.broadcast_to(np.asarray(p_floor, dtype=float), (n_aps,))
    too_low = (powers < floor) | (powers <= 0)
    if np.any(too_low):
        raise ReconstructionError(f"Powers {powers} below floor; interference gains are unrecoverable")

    g = np.zeros((n_aps, n_aps))
    for n, (state, info) in enumerate(zip(local_states, aux)):
        if info.receiver != n:
            raise ReconstructionError(f"Aux info for receiver {info.receiver} found at position {n}")
        g[n, n] = state.g_own_now
        for k, received in info.received.items():
            g[k, n] = received / powers[k]
        missing = set(range(n_aps)) - {n} - set(info.received)
        if missing:
            raise ReconstructionError(f"Receiver {n} has no measurement for transmitters {sorted(missing)}")
    return GainMatrix(g)


def assemble_global(experiences: Sequence[LocalExperience], aux_prev: Sequence[AuxiliaryInfo],
                    aux_now: Sequence[AuxiliaryInfo], powers=None, p_floor=None) -> GlobalExperience:
    """
    Combine one slot's N local experiences into a global experience.

    Args:
        experiences: e_n(t) of every AP, ordered by AP index
        aux_prev: o_n(t), measured under p(t-1)
        aux_now: o_n(t+1), measured under p(t)
        powers: Optional (p(t-1), p(t)); read from the local states when omitted
        p_floor: Minimum admissible power per AP

    Returns:
        GlobalExperience stamped with slot t
    """
    if not experiences:
        raise IncompleteSlotError("No local experiences to assemble")
    slots = {e.slot for e in experiences}
    if len(slots) != 1:
        raise IncompleteSlotError(f"Local experiences carry mismatched slots {sorted(slots)}")
    if [e.ap for e in experiences] != list(range(len(experiences))):
        raise IncompleteSlotError(f"Expected uploads from APs 0..{len(experiences) - 1} in order")

    states = [e.s for e in experiences]
    next_states = [e.s_next for e in experiences]
    if powers is None:
        powers_prev = np.array([s.p_prev for s in states])
        powers_now = np.array([s.p_prev for s in next_states])
    else:
        powers_prev, powers_now = (np.asarray(p, dtype=float) for p in powers)

    return GlobalExperience(
        states=states,
        s_o=reconstruct_gain_matrix(states, aux_prev, powers_prev, p_floor),
        actions=np.array([e.a for e in experiences], dtype=float),
        reward_sum=float(sum(e.r for e in experiences)),
        next_states=next_states,
        s_o_next=reconstruct_gain_matrix(next_states, aux_now, powers_now, p_floor),
        slot=slots.pop(),
    )


def assemble_uploads(uploads: Sequence[LocalUpload], num_aps: int, p_floor=None) -> GlobalExperience:
    """Assemble a slot from the uploads delivered to the core network; all-or-nothing."""
    if len(uploads) != num_aps:
        slot = uploads[0].slot if uploads else None
        raise IncompleteSlotError(f"Slot {slot}: {len(uploads)} of {num_aps} uploads arrived")
    ordered = sorted(uploads, key=lambda u: u.experience.ap)
    return assemble_global(
        [u.experience for u in ordered],
        [u.aux_prev for u in ordered],
        [u.aux_now for u in ordered],
        p_floor=p_floor,
    )


class ReplayBuffer:
    """FIFO memory of global experiences with capacity M."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigurationError(f"Replay capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._items: Deque[GlobalExperience] = deque(maxlen=capacity)
        self.total_pushed = 0

    def push(self, experience: GlobalExperience) -> "ReplayBuffer":
        self._items.append(experience)
        self.total_pushed += 1
        return self

    def sample(self, batch_size: int, rng: np.random.Generator) -> List[GlobalExperience]:
        """Draw `batch_size` experiences uniformly without replacement."""
        if len(self._items) < batch_size:
            raise InsufficientDataError(f"Buffer holds {len(self._items)} experiences, batch needs {batch_size}")
        indices = rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[i] for i in indices]

    def items(self) -> List[GlobalExperience]:
        return list(self._items)

    def __len__(self) -> int:
        return len(self._items)


def buffer_push(buffer: ReplayBuffer, exp: GlobalExperience) -> ReplayBuffer:
    return buffer.push(exp)


def buffer_sample(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> List[GlobalExperience]:
    return buffer.sample(batch_size, rng)


def experiences_to_frame(experiences: Iterable[GlobalExperience]) -> pd.DataFrame:
    """Flatten global experiences into slot, s_<n>_<field>, a_<n>, R columns."""
    rows = []
    for exp in experiences:
        row = {"slot": exp.slot}
        for n, state in enumerate(exp.states, start=1):
            row.update({f"s_{n}_{name}": value for name, value in zip(LOCAL_STATE_FIELDS, state.as_vector())})
        row.update({f"a_{n}": a for n, a in enumerate(exp.actions, start=1)})
        row["R"] = exp.reward_sum
        rows.append(row)
    return pd.DataFrame(rows)


def write_experience_log(experiences: Iterable[GlobalExperience], path: Union[str, Path]) -> Path:
    """Dump experiences to CSV for offline inspection."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        experiences_to_frame(experiences).to_csv(path, index=False, float_format="%.17g")
    except OSError as e:
        logger.error(f"Error writing experience log: {e}")
        raise OutputError(f"Could not write {path}: {e}") from e
    logger.info(f"Experience log written to {path}")
    return path
