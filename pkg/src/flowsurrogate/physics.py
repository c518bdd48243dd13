"""Differentiable water mass-balance residual of predicted (S, p) sequences.

The discretization is the one the simulator advances with: harmonic face
transmissibility, arithmetic face-averaged total mobility, fractional flow
taken from the upstream cell, and an explicit (start-of-interval) flux.  An
exact one-substep-per-frame simulator trajectory therefore has a residual at
round-off level.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .simulator import FluidProps, PermField, WellSpec
from .tensor import Tensor

# number of residual evaluations; lets callers prove a code path never ran
CALLS: Counter = Counter()


@dataclass
class FaceFluxes:
    """Water fluxes, positive toward increasing column (x) and row (y)."""

    x: Tensor  # (..., H, W-1)
    y: Tensor  # (..., H-1, W)


@dataclass
class ResidualField:
    r: Tensor  # (..., T-1, H, W)
    cell_volume: float = 1.0
    # injection rate per well-cell volume; makes the loss dimensionless
    rate_scale: float = 1.0

    @property
    def aggregate(self) -> float:
        return float(physics_loss(self).data)


def _k_array(perm) -> np.ndarray:
    return perm.k if isinstance(perm, PermField) else np.asarray(perm, dtype=np.float64)


def _harmonic_faces(k: np.ndarray, thickness: float = 1.0):
    tx = 2.0 * k[..., :, :-1] * k[..., :, 1:] / (k[..., :, :-1] + k[..., :, 1:]) * thickness
    ty = 2.0 * k[..., :-1, :] * k[..., 1:, :] / (k[..., :-1, :] + k[..., 1:, :]) * thickness
    return tx, ty


def _mobilities(s: Tensor, fluids: FluidProps):
    lw = T.scale(T.power(s, fluids.corey_w), 1.0 / fluids.mu_w)
    lo = T.scale(T.power(T.sub(1.0, s), fluids.corey_nw), 1.0 / fluids.mu_nw)
    return lw, lo


def darcy_flux(perm, p: Tensor, s: Tensor, fluids: FluidProps | None = None) -> FaceFluxes:
    """Two-point water fluxes with upstream fractional flow.

    ``perm`` is a ``PermField`` or a permeability array broadcastable against
    the trailing ``(H, W)`` axes of ``p`` and ``s``.
    """
    fluids = fluids or FluidProps()
    p, s = T.as_tensor(p), T.as_tensor(s)
    if p.shape != s.shape or p.ndim < 2:
        raise DimensionError(f"pressure {p.shape} and saturation {s.shape} must match")
    k = _k_array(perm)
    if k.shape[-2:] != p.shape[-2:]:
        raise DimensionError(f"permeability {k.shape} does not match grid {p.shape[-2:]}")
    thickness = perm.thickness if isinstance(perm, PermField) else 1.0
    tx, ty = _harmonic_faces(k, thickness)
    # permeability may carry a batch axis that the (T, H, W) sequences lack
    while tx.ndim < p.ndim:
        tx, ty = tx[..., None, :, :], ty[..., None, :, :]

    lw, lo = _mobilities(s, fluids)
    lt = T.add(lw, lo)
    fw = T.div(lw, lt)

    def faces(lo_idx, hi_idx, trans):
        dp = T.sub(p[lo_idx], p[hi_idx])
        lbar = T.scale(T.add(lt[lo_idx], lt[hi_idx]), 0.5)
        total = T.mul(T.mul(lbar, trans), dp)
        upstream = (dp.data >= 0.0).astype(np.float64)
        frac = T.add(T.mul(fw[lo_idx], upstream), T.mul(fw[hi_idx], 1.0 - upstream))
        return T.mul(total, frac)

    ell = (Ellipsis,)
    fx = faces(ell + (slice(None), slice(None, -1)), ell + (slice(None), slice(1, None)), tx)
    fy = faces(ell + (slice(None, -1), slice(None)), ell + (slice(1, None), slice(None)), ty)
    return FaceFluxes(fx, fy)


def flux_divergence(flux: FaceFluxes) -> Tensor:
    """Net outflow per cell."""
    nd = flux.x.ndim
    lead = [(0, 0)] * (nd - 2)
    out = T.sub(T.pad(flux.x, lead + [(0, 0), (0, 1)]), T.pad(flux.x, lead + [(0, 0), (1, 0)]))
    out = T.add(out, T.pad(flux.y, lead + [(0, 1), (0, 0)]))
    return T.sub(out, T.pad(flux.y, lead + [(1, 0), (0, 0)]))


def discrete_residual(perm, s_seq: Tensor, p_seq: Tensor, wells: WellSpec | None = None,
                      dt: float = 1.0, fluids: FluidProps | None = None,
                      cell_volume: float | None = None) -> ResidualField:
    """Per-cell water balance violation between consecutive frames.

    ``r = phi (S[t+1] - S[t]) / dt + (div F_w(S[t], p[t]) - q_w(S[t])) / V``
    for sequences shaped ``(..., T, H, W)``; the result has ``T - 1`` frames.
    """
    CALLS["discrete_residual"] += 1
    fluids = fluids or FluidProps()
    wells = wells or WellSpec()
    s_seq, p_seq = T.as_tensor(s_seq), T.as_tensor(p_seq)
    if s_seq.shape != p_seq.shape:
        raise DimensionError(f"saturation {s_seq.shape} and pressure {p_seq.shape} sequences differ")
    if s_seq.ndim < 3 or s_seq.shape[-3] < 2:
        raise DimensionError("residual needs at least two frames")
    h, w = s_seq.shape[-2:]
    if cell_volume is not None:
        volume = cell_volume
    else:
        volume = perm.cell_volume if isinstance(perm, PermField) else 1.0

    ell = (Ellipsis,)
    s_now = s_seq[ell + (slice(None, -1), slice(None), slice(None))]
    s_next = s_seq[ell + (slice(1, None), slice(None), slice(None))]
    p_now = p_seq[ell + (slice(None, -1), slice(None), slice(None))]

    flux = darcy_flux(perm, p_now, s_now, fluids)
    div = flux_divergence(flux)

    rate = wells.pvi * h * w * volume * fluids.porosity / wells.horizon
    inj = np.zeros((h, w))
    inj[wells.injector] = rate
    prod_mask = np.zeros((h, w))
    prod_mask[wells.producer_cell((h, w))] = rate
    fw_now = T.div(*_frac_parts(s_now, fluids))
    q_w = T.sub(inj, T.mul(fw_now, prod_mask))

    storage = T.scale(T.sub(s_next, s_now), fluids.porosity / dt)
    r = T.add(storage, T.scale(T.sub(div, q_w), 1.0 / volume))
    return ResidualField(r, volume, rate / volume if rate > 0 else 1.0)


def _frac_parts(s: Tensor, fluids: FluidProps):
    lw, lo = _mobilities(s, fluids)
    return lw, T.add(lw, lo)


def physics_loss(residual: ResidualField) -> Tensor:
    """Mean squared residual times the cell volume.

    The residual is first divided by ``rate_scale`` so each cell's defect reads
    as a fraction of the well-cell injection intensity.
    """
    r = T.scale(residual.r, 1.0 / residual.rate_scale)
    return T.scale(T.mean(T.square(r)), residual.cell_volume)
