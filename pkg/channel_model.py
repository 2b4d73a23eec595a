import logging
from dataclasses import dataclass
from typing import Iterator, List, Optional

import numpy as np

from scenario_config import ScenarioConfig
from simulation_errors import DomainError, NumericError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Topology:
    """AP and UE positions of one trial; distances[k, n] is AP k -> UE n in meters."""
    ap_positions: np.ndarray
    ue_positions: np.ndarray
    distances: np.ndarray

    @property
    def num_aps(self) -> int:
        return self.ap_positions.shape[0]


@dataclass(frozen=True)
class LargeScale:
    """Linear-scale path loss plus shadowing phi[k, n], fixed for a trial."""
    phi: np.ndarray


@dataclass
class FadingState:
    """Complex small-scale coefficients h[k, n] of the current slot."""
    h: np.ndarray


@dataclass(frozen=True)
class GainMatrix:
    """Instantaneous channel gains g[k, n] from transmitter k to receiver n."""
    g: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.g, dtype=float)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ShapeError(f"Gain matrix must be square, got shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("Gain matrix contains non-finite entries")
        if np.any(g < 0):
            raise DomainError("Gain matrix entries must be non-negative")
        object.__setattr__(self, "g", g)

    @property
    def size(self) -> int:
        return self.g.shape[0]

    def normalized(self, noise_power: float) -> "GainMatrix":
        """Gains divided by the noise power, so that the noise becomes 1."""
        return GainMatrix(self.g / noise_power)


def sample_topology(config: ScenarioConfig, rng: np.random.Generator) -> Topology:
    """
    Place one UE per AP uniformly over the annulus [nu_min, nu_max] around it.

    Args:
        config: Scenario with AP positions and coverage radii
        rng: Random stream

    Returns:
        Topology with all N x N AP-to-UE distances
    """
    ap = np.asarray(config.ap_positions, dtype=float)
    nu_min = np.asarray(config.nu_min_m, dtype=float)
    nu_max = np.asarray(config.nu_max_m, dtype=float)
    u = rng.random(config.num_aps)
    radius = np.sqrt(u * (nu_max ** 2 - nu_min ** 2) + nu_min ** 2)
    angle = rng.uniform(0.0, 2.0 * np.pi, size=config.num_aps)
    ue = ap + radius[:, np.newaxis] * np.column_stack([np.cos(angle), np.sin(angle)])
    distances = np.linalg.norm(ap[:, np.newaxis, :] - ue[np.newaxis, :, :], axis=-1)
    return Topology(ap_positions=ap, ue_positions=ue, distances=distances)


def path_loss_db(distance_km):
    """Path loss 120.9 + 37.6 log10(d) in dB for a distance in kilometers."""
    d = np.asarray(distance_km, dtype=float)
    if np.any(d <= 0):
        raise DomainError(f"Distance must be positive, got {distance_km}")
    loss = 120.9 + 37.6 * np.log10(d)
    return float(loss) if loss.ndim == 0 else loss


def draw_large_scale(topology: Topology, config: ScenarioConfig, rng: np.random.Generator) -> LargeScale:
    """Draw log-normal shadowing once per link and combine it with path loss."""
    distances_km = np.maximum(topology.distances, config.min_link_distance_m) / 1000.0
    shadowing_db = rng.normal(0.0, config.shadowing_std_db, size=distances_km.shape)
    phi = 10.0 ** (-(path_loss_db(distances_km) + shadowing_db) / 10.0)
    return LargeScale(phi=phi)


def fading_step(state: Optional[FadingState], rho: float, rng: np.random.Generator,
                size: Optional[int] = None) -> FadingState:
    """
    Advance the first-order autoregressive Rayleigh fading by one slot.

    Args:
        state: Previous slot's fading, or None to draw h(0) ~ CN(0, 1)
        rho: Correlation between successive slots, in [0, 1]
        rng: Random stream
        size: Number of APs, required when state is None

    Returns:
        Fading of the new slot
    """
    if not 0.0 <= rho <= 1.0:
        raise DomainError(f"rho must lie in [0, 1], got {rho}")
    if state is None and size is None:
        raise ShapeError("size is required to draw the initial fading state")
    n = state.h.shape[0] if state is not None else size
    innovation = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / np.sqrt(2.0)
    if state is None:
        return FadingState(h=innovation)
    return FadingState(h=rho * state.h + np.sqrt(1.0 - rho ** 2) * innovation)


def gain_matrix(large: LargeScale, fading: FadingState) -> GainMatrix:
    """g[k, n] = phi[k, n] * |h[k, n]|^2."""
    if large.phi.shape != fading.h.shape:
        raise ShapeError(f"Large-scale {large.phi.shape} and fading {fading.h.shape} shapes differ")
    return GainMatrix(large.phi * np.abs(fading.h) ** 2)


class ChannelSimulator:
    """Evolves the channel of one trial: fixed topology and shadowing, fading per slot."""

    def __init__(self, config: ScenarioConfig, rng: np.random.Generator,
                 topology: Optional[Topology] = None, large_scale: Optional[LargeScale] = None):
        """
        Initialize the channel of a trial.

        Args:
            config: Scenario parameters
            rng: Random stream; topology, shadowing and fading are drawn from it in that order
            topology: Reuse an existing topology instead of sampling one
            large_scale: Reuse existing large-scale attenuation
        """
        self.config = config
        self.rng = rng
        self.topology = topology if topology is not None else sample_topology(config, rng)
        self.large_scale = large_scale if large_scale is not None else draw_large_scale(self.topology, config, rng)
        if config.rho_mode == "random-per-trial":
            self.trial_rho = float(rng.uniform(0.0, 1.0))
        else:
            self.trial_rho = config.rho
        self.fading: Optional[FadingState] = None
        self.slot = -1
        logger.info(
            f"Channel ready for {self.topology.num_aps} APs "
            f"(rho mode {config.rho_mode}, rho {self.trial_rho:.3f})"
        )

    def current_rho(self) -> float:
        if self.config.rho_mode == "random-per-slot":
            return float(self.rng.uniform(0.0, 1.0))
        return self.trial_rho

    def step(self) -> GainMatrix:
        """Draw the next slot's raw (unnormalized) gain matrix."""
        self.fading = fading_step(self.fading, self.current_rho(), self.rng, size=self.topology.num_aps)
        self.slot += 1
        return gain_matrix(self.large_scale, self.fading)

    def generate_trace(self, num_slots: int) -> List[GainMatrix]:
        """Draw `num_slots` consecutive gain matrices."""
        return [self.step() for _ in range(num_slots)]

    def __iter__(self) -> Iterator[GainMatrix]:
        while True:
            yield self.step()
