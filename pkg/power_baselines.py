import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from channel_model import GainMatrix
from network_environment import SlotRecord, link_sinrs, make_slot_record
from scenario_config import ScenarioConfig
from simulation_errors import ConfigurationError, CostGuardError, DomainError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-3
DEFAULT_MAX_ITER = 500
ORACLE_MAX_APS = 4
WMMSE_WEIGHT_GUARD = 1e-12
ORACLE_TIE_TOLERANCE = 1e-12
BASELINE_ALGORITHMS = ("wmmse", "fp", "full", "random", "oracle")


@dataclass
class SolverReport:
    """Outcome of one baseline solve."""
    powers: np.ndarray
    sum_rate: float
    iterations: int
    objective_trace: List[float] = field(default_factory=list)
    converged: bool = True


def _check_instance(G, noise: float, p_max) -> tuple:
    g = G.g if isinstance(G, GainMatrix) else np.asarray(G, dtype=float)
    caps = np.asarray(p_max, dtype=float)
    if g.ndim != 2 or g.shape[0] != g.shape[1] or caps.shape != (g.shape[0],):
        raise ShapeError(f"Gain matrix {g.shape} does not match {caps.shape} power caps")
    if np.any(np.diag(g) <= 0):
        raise DomainError("Every direct-link gain must be positive")
    if noise <= 0:
        raise DomainError(f"Noise power must be positive, got {noise}")
    return g, caps


def _rate_per_link(powers: np.ndarray, g: np.ndarray, noise: float) -> float:
    return float(np.mean(np.log2(1.0 + link_sinrs(powers, g, noise))))


def _report(powers: np.ndarray, g: np.ndarray, noise: float, bandwidth_hz: float,
            iterations: int, trace: List[float], converged: bool) -> SolverReport:
    sum_rate = bandwidth_hz * float(np.sum(np.log2(1.0 + link_sinrs(powers, g, noise))))
    return SolverReport(powers=powers, sum_rate=sum_rate, iterations=iterations,
                        objective_trace=trace, converged=converged)


def wmmse_solve(G, noise: float, p_max, tol: float = DEFAULT_TOLERANCE,
                max_iter: int = DEFAULT_MAX_ITER, bandwidth_hz: float = 1.0) -> SolverReport:
    """
    Scalar-channel WMMSE power allocation.

    Starts from full power and iterates the receiver, weight and transmitter
    updates until the sum-rate per link changes by less than `tol` bps/Hz.

    Args:
        G: Gain matrix g[k, n] from AP k to UE n
        noise: Noise power in the units of G
        p_max: Power caps per AP
        tol: Stopping threshold on the per-link sum-rate change
        max_iter: Iteration limit
        bandwidth_hz: Multiplier applied to the reported sum-rate

    Returns:
        SolverReport with the final powers
    """
    g, caps = _check_instance(G, noise, p_max)
    a = np.sqrt(g)
    a_own = np.diag(a)
    v_max = np.sqrt(caps)
    v = v_max.copy()
    trace = [_rate_per_link(v ** 2, g, noise)]
    converged = False
    iterations = 0
    while iterations < max_iter:
        iterations += 1
        u = a_own * v / (noise + (a ** 2 * (v ** 2)[:, np.newaxis]).sum(axis=0))
        w = 1.0 / np.maximum(1.0 - u * a_own * v, WMMSE_WEIGHT_GUARD)
        denominator = (a ** 2 * (w * u ** 2)[np.newaxis, :]).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            v = np.where(denominator > 0, w * u * a_own / denominator, v_max)
        v = np.clip(v, 0.0, v_max)
        trace.append(_rate_per_link(v ** 2, g, noise))
        if abs(trace[-1] - trace[-2]) < tol:
            converged = True
            break
    return _report(np.minimum(v ** 2, caps), g, noise, bandwidth_hz, iterations, trace, converged)


def fp_solve(G, noise: float, p_max, tol: float = DEFAULT_TOLERANCE,
             max_iter: int = DEFAULT_MAX_ITER, bandwidth_hz: float = 1.0) -> SolverReport:
    """
    Closed-form fractional-programming power allocation (quadratic transform).

    Same interface and stopping rule as wmmse_solve.
    """
    g, caps = _check_instance(G, noise, p_max)
    g_own = np.diag(g)
    p = caps.copy()
    trace = [_rate_per_link(p, g, noise)]
    converged = False
    iterations = 0
    while iterations < max_iter:
        iterations += 1
        sinr = link_sinrs(p, g, noise)
        total = noise + (p[:, np.newaxis] * g).sum(axis=0)
        y = np.sqrt((1.0 + sinr) * p * g_own) / total
        denominator = (g * (y ** 2)[np.newaxis, :]).sum(axis=1) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            candidate = np.where(denominator > 0, y ** 2 * (1.0 + sinr) * g_own / denominator, caps)
        p = np.clip(candidate, 0.0, caps)
        trace.append(_rate_per_link(p, g, noise))
        if abs(trace[-1] - trace[-2]) < tol:
            converged = True
            break
    return _report(p, g, noise, bandwidth_hz, iterations, trace, converged)


def fixed_policy(kind: str, p_max, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Full power, or powers drawn uniformly on [0, p_max]."""
    caps = np.asarray(p_max, dtype=float)
    if kind == "full":
        return caps.copy()
    if kind == "random":
        if rng is None:
            raise ConfigurationError("Random power policy needs a random stream")
        return rng.uniform(0.0, caps)
    raise ConfigurationError(f"Unknown fixed policy '{kind}'")


def _grid_rates(levels_grid: np.ndarray, indices: np.ndarray, g: np.ndarray, noise: float) -> np.ndarray:
    powers = levels_grid[np.arange(g.shape[0]), indices]
    received = powers[:, :, np.newaxis] * g[np.newaxis, :, :]
    signal = np.einsum("bnn->bn", received)
    interference = received.sum(axis=1) - signal
    return np.sum(np.log2(1.0 + signal / (interference + noise)), axis=1)


def grid_oracle(G, noise: float, p_max, levels: int = 11, bandwidth_hz: float = 1.0,
                chunk_size: int = 65536) -> SolverReport:
    """
    Exhaustive search over a uniform power grid with `levels` points from 0 to p_max.

    Ties within a relative 1e-12 go to the lowest total power, then the
    lexicographically smallest power vector.
    """
    g, caps = _check_instance(G, noise, p_max)
    n_aps = g.shape[0]
    if n_aps > ORACLE_MAX_APS:
        raise CostGuardError(f"Grid oracle limited to {ORACLE_MAX_APS} APs, got {n_aps}")
    if levels < 2:
        raise DomainError(f"Grid needs at least 2 levels, got {levels}")

    levels_grid = caps[:, np.newaxis] * np.linspace(0.0, 1.0, levels)[np.newaxis, :]
    total = levels ** n_aps
    shape = (levels,) * n_aps

    def chunks():
        for start in range(0, total, chunk_size):
            flat = np.arange(start, min(start + chunk_size, total))
            yield flat, np.stack(np.unravel_index(flat, shape), axis=1)

    best_rate = max(float(np.max(_grid_rates(levels_grid, idx, g, noise))) for _, idx in chunks())
    threshold = best_rate - ORACLE_TIE_TOLERANCE * max(abs(best_rate), 1.0)

    best_key = None
    best_powers = None
    for flat, idx in chunks():
        rates = _grid_rates(levels_grid, idx, g, noise)
        for row in np.flatnonzero(rates >= threshold):
            powers = levels_grid[np.arange(n_aps), idx[row]]
            key = (float(powers.sum()), int(flat[row]))
            if best_key is None or key < best_key:
                best_key, best_powers = key, powers

    logger.debug(f"Grid oracle searched {total} points, best {best_rate:.6f} bps/Hz")
    return _report(best_powers, g, noise, bandwidth_hz, 1, [best_rate / n_aps], True)


def baseline_powers(algorithm: str, G: GainMatrix, config: ScenarioConfig,
                    rng: Optional[np.random.Generator] = None, noise: float = 1.0) -> np.ndarray:
    """Powers a baseline picks for one slot given perfect knowledge of G."""
    if algorithm == "wmmse":
        return wmmse_solve(G, noise, config.p_max).powers
    if algorithm == "fp":
        return fp_solve(G, noise, config.p_max).powers
    if algorithm in ("full", "random"):
        return fixed_policy(algorithm, config.p_max, rng)
    if algorithm == "oracle":
        return grid_oracle(G, noise, config.p_max, config.oracle_levels).powers
    raise ConfigurationError(f"Unknown baseline '{algorithm}'; choose from {BASELINE_ALGORITHMS}")


def evaluate_baseline(algorithm: str, gains: Sequence[GainMatrix], config: ScenarioConfig,
                      rng: Optional[np.random.Generator] = None, start_slot: int = 1,
                      on_slot: Optional[Callable[[int], None]] = None) -> List[SlotRecord]:
    """
    Run a baseline slot by slot on raw gain matrices.

    Args:
        algorithm: One of wmmse, fp, full, random, oracle
        gains: Raw gains, gains[i] in force in slot start_slot + i
        config: Scenario (noise, bandwidth and caps)
        rng: Random stream for the random policy
        start_slot: Slot index of gains[0]
        on_slot: Optional callback invoked with every finished slot

    Returns:
        One SlotRecord per gain matrix
    """
    records = []
    for offset, raw in enumerate(gains):
        G = raw.normalized(config.noise_power_watts)
        powers = baseline_powers(algorithm, G, config, rng)
        records.append(make_slot_record(start_slot + offset, powers, G, 1.0, config.bandwidth_hz))
        if on_slot is not None:
            on_slot(start_slot + offset)
    logger.info(f"Baseline {algorithm}: evaluated {len(records)} slots")
    return records


def solver_timing(algorithm: str, gains: Sequence[GainMatrix], config: ScenarioConfig) -> Dict[str, float]:
    """Mean wall-clock seconds per decision of a solver over a few slots."""
    samples = []
    for raw in gains:
        G = raw.normalized(config.noise_power_watts)
        started = time.perf_counter()
        baseline_powers(algorithm, G, config, np.random.default_rng(0))
        samples.append(time.perf_counter() - started)
    return {f"{algorithm}_decision": float(np.mean(samples))} if samples else {}
