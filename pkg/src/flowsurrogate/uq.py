"""Monte-Carlo moments of simulator and surrogate outputs over permeability ensembles."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import nets
from . import tensor as T
from .errors import ConfigError, DimensionError
from .simulator import FluidProps, PermField, WellSpec, run_simulation
from .training import NormStats, denormalize_pressure, normalize_inputs

SIMULATOR = "simulator"
SURROGATE = "surrogate"


@dataclass
class EnsembleStats:
    mean: np.ndarray  # (T, H, W)
    var: np.ndarray  # (T, H, W), unbiased
    n: int
    source: str
    field: str = "saturation"


def ensemble_moments(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell mean and unbiased variance along axis 0.

    Values are sorted along the ensemble axis and shifted by the per-cell
    minimum before summation, so the result does not depend on member order
    and an ensemble of identical members has exactly zero variance.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    if n < 2:
        raise ConfigError("at least two ensemble members are needed for a variance")
    ordered = np.sort(samples, axis=0)
    shift = ordered[0]
    mean = shift + (ordered - shift).sum(axis=0) / n
    dev2 = np.sort((samples - mean) ** 2, axis=0)
    return mean, dev2.sum(axis=0) / (n - 1)


def _as_perm_fields(perms) -> list[PermField]:
    if isinstance(perms, np.ndarray):
        return [PermField(k) for k in perms]
    return [p if isinstance(p, PermField) else PermField(p) for p in perms]


def simulator_outputs(perms: Sequence[PermField], steps: int, fluids: FluidProps | None = None,
                      wells: WellSpec | None = None, field: str = "saturation",
                      pressure_updates: int = 4) -> np.ndarray:
    return np.stack([getattr(run_simulation(p, fluids, wells, steps, pressure_updates), field)
                     for p in perms])


def surrogate_predictor(kind: str, params, config: nets.ModelConfig, stats: NormStats,
                        field: str = "saturation", batch_size: int = 32) -> Callable[[np.ndarray], np.ndarray]:
    """Map raw permeability arrays ``(N, H, W)`` to predicted ``(N, T, H, W)`` frames."""
    channel = {"saturation": 0, "pressure": 1}[field]
    if channel >= config.out_channels:
        raise ConfigError(f"model has no {field} channel")

    def predict(perm: np.ndarray) -> np.ndarray:
        x = normalize_inputs(perm, stats)
        outs = []
        with T.no_grad():
            for s in range(0, len(x), batch_size):
                outs.append(nets.forward(kind, params, config, x[s : s + batch_size]).data[:, :, channel])
        out = np.concatenate(outs)
        return denormalize_pressure(out, stats) if field == "pressure" else out

    return predict


def mcs_run(source: str, perms, *, steps: int = 8, fluids: FluidProps | None = None,
            wells: WellSpec | None = None, predictor: Callable | None = None,
            field: str = "saturation", pressure_updates: int = 4) -> EnsembleStats:
    """Moments of ``field`` over the ensemble ``perms`` from one source."""
    fields = _as_perm_fields(perms)
    if len(fields) < 2:
        raise ConfigError("Monte-Carlo run needs N >= 2 realizations")
    seeds = [p.seed for p in fields if p.seed is not None]
    if len(set(seeds)) != len(seeds):
        raise ConfigError("ensemble realizations must have distinct seeds")
    if source == SIMULATOR:
        samples = simulator_outputs(fields, steps, fluids, wells, field, pressure_updates)
    elif source == SURROGATE:
        if predictor is None:
            raise ConfigError("surrogate source needs a predictor")
        samples = predictor(np.stack([p.k for p in fields]))
    else:
        raise ConfigError(f"unknown source {source!r}")
    mean, var = ensemble_moments(samples)
    return EnsembleStats(mean, var, len(fields), source, field)


def _rel_l2(ref: np.ndarray, other: np.ndarray) -> float:
    # relative to the reference map; absolute when the reference is all zero
    num = float(np.linalg.norm(other - ref))
    den = float(np.linalg.norm(ref))
    return num / den if den > 0 else num


def compare_stats(a: EnsembleStats, b: EnsembleStats, t: int | None = None) -> dict:
    """Discrepancy of ``b`` against reference ``a`` at step ``t`` and over all steps."""
    if a.mean.shape != b.mean.shape or a.var.shape != b.var.shape:
        raise DimensionError(f"moment maps differ in shape: {a.mean.shape} vs {b.mean.shape}")
    steps = a.mean.shape[0]
    if t is None:
        t = steps // 2
    if not -steps <= t < steps:
        raise DimensionError(f"step {t} outside 0..{steps - 1}")
    report = {"t": int(t) % steps}
    for name in ("mean", "var"):
        ra, rb = getattr(a, name), getattr(b, name)
        report[name] = {
            "rel_l2_t": _rel_l2(ra[t], rb[t]),
            "max_abs_t": float(np.abs(rb[t] - ra[t]).max()),
            "rel_l2_all": _rel_l2(ra, rb),
            "max_abs_all": float(np.abs(rb - ra).max()),
        }
    return report
