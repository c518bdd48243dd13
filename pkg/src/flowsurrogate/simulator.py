"""Quarter five-spot oil/water waterflood: permeability sampler and IMPES solver.

Incompressible, horizontal, no capillarity.  Pressure is solved implicitly on a
5-point two-point-flux stencil with a preconditioned conjugate gradient; water
saturation is advanced explicitly with upwinded fractional flow under a CFL
bound computed from the frozen total fluxes.

Time is dimensionless: the injection horizon has length ``WellSpec.horizon``
(1 by default) and rates are expressed so that ``WellSpec.pvi`` pore volumes
enter over that horizon.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial.distance import cdist

from .errors import ConfigError, PhysicsError, SolverError

DEFAULT_LOG_MEAN = math.log(100.0)  # 100 mD geometric mean


@dataclass(frozen=True)
class FluidProps:
    rho_w: float = 999.0
    rho_nw: float = 600.0
    mu_w: float = 1.0
    mu_nw: float = 2.0
    corey_w: float = 2.0
    corey_nw: float = 2.0
    porosity: float = 1.0
    # carried for completeness; the areal model has no gravity term
    gravity: float = 9.80665

    def __post_init__(self):
        for name in ("rho_w", "rho_nw", "mu_w", "mu_nw", "corey_w", "corey_nw", "porosity"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    def mobilities(self, s):
        s = np.asarray(s, dtype=np.float64)
        return s**self.corey_w / self.mu_w, (1.0 - s) ** self.corey_nw / self.mu_nw

    def total_mobility(self, s):
        lw, lo = self.mobilities(s)
        return lw + lo

    def frac_flow(self, s):
        lw, lo = self.mobilities(s)
        return lw / (lw + lo)

    @functools.cached_property
    def max_frac_slope(self) -> float:
        """Lipschitz constant of the fractional-flow curve on [0, 1]."""
        s = np.linspace(0.0, 1.0, 20001)
        f = self.frac_flow(s)
        return float(np.max(np.abs(np.diff(f)) / np.diff(s))) * 1.01


@dataclass(frozen=True)
class PermField:
    k: np.ndarray
    seed: int | None = None
    correlation_length: float | None = None
    log_std: float | None = None
    log_mean: float = DEFAULT_LOG_MEAN
    cell_size: float = 1.0
    thickness: float = 1.0

    def __post_init__(self):
        k = np.asarray(self.k, dtype=np.float64)
        if k.ndim != 2:
            raise ConfigError(f"permeability must be 2-D, got shape {k.shape}")
        if not (np.isfinite(k).all() and (k > 0).all()):
            raise ConfigError("permeability must be finite and strictly positive")
        object.__setattr__(self, "k", k)

    @property
    def shape(self) -> tuple[int, int]:
        return self.k.shape

    @property
    def cell_volume(self) -> float:
        return self.cell_size * self.cell_size * self.thickness

    def scaled(self, factor: float) -> "PermField":
        return PermField(self.k * factor, self.seed, self.correlation_length, self.log_std,
                         self.log_mean, self.cell_size, self.thickness)


@dataclass(frozen=True)
class WellSpec:
    """Injector and producer at opposite corners with balanced rates."""

    pvi: float = 0.8
    horizon: float = 1.0
    injector: tuple[int, int] = (0, 0)
    producer: tuple[int, int] | None = None  # defaults to the far corner

    def __post_init__(self):
        if self.pvi < 0 or self.horizon <= 0:
            raise ConfigError("pvi must be >= 0 and horizon > 0")

    def producer_cell(self, shape) -> tuple[int, int]:
        return self.producer if self.producer is not None else (shape[0] - 1, shape[1] - 1)

    def rate(self, perm: PermField, fluids: FluidProps) -> float:
        pore_volume = perm.k.size * perm.cell_volume * fluids.porosity
        return self.pvi * pore_volume / self.horizon

    def source(self, perm: PermField, fluids: FluidProps) -> np.ndarray:
        """Volumetric source map: +q at the injector, -q at the producer."""
        q = np.zeros(perm.shape)
        rate = self.rate(perm, fluids)
        q[self.injector] += rate
        q[self.producer_cell(perm.shape)] -= rate
        return q


@dataclass
class SimOutput:
    saturation: np.ndarray  # (T, H, W)
    pressure: np.ndarray  # (T, H, W)
    times: np.ndarray  # (T,)
    mass_balance: np.ndarray  # (T,) worst per-substep relative water-balance error in each interval
    water_in_place: np.ndarray  # (T,)
    cum_injected: np.ndarray  # (T,)
    cum_produced: np.ndarray  # (T,)
    substeps: np.ndarray  # (T,) saturation substeps taken in each interval
    initial_water: float = 0.0
    meta: dict = field(default_factory=dict)


# -- permeability ------------------------------------------------------------
@functools.lru_cache(maxsize=16)
def _correlation_factor(h: int, w: int, corr_len: float) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pts = np.column_stack([yy.ravel(), xx.ravel()]).astype(np.float64)
    corr = np.exp(-cdist(pts, pts) / corr_len)
    try:
        factor = np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        try:
            factor = np.linalg.cholesky(corr + 1e-10 * np.eye(len(corr)))
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"covariance factorization failed for {h}x{w}, l={corr_len}") from exc
    factor.setflags(write=False)
    return factor


def generate_permeability(
    h: int,
    w: int,
    correlation_length: float = 4.0,
    log_std: float = 1.0,
    seed: int = 0,
    log_mean: float = DEFAULT_LOG_MEAN,
    cell_size: float = 1.0,
) -> PermField:
    """Log-normal field whose log has exponential covariance ``s^2 exp(-d/l)``.

    Sampled exactly through a dense Cholesky factor of the covariance, so it is
    limited to small grids (at most 64x64).
    """
    if correlation_length <= 0:
        raise ConfigError("correlation length must be positive")
    if log_std < 0:
        raise ConfigError("log standard deviation must be non-negative")
    if h * w > 64 * 64:
        raise ConfigError(f"{h}x{w} grid too large for dense covariance sampling")
    if log_std == 0:
        z = np.zeros((h, w))
    else:
        factor = _correlation_factor(h, w, float(correlation_length))
        rng = np.random.default_rng(seed)
        z = log_std * (factor @ rng.standard_normal(h * w)).reshape(h, w)
    return PermField(np.exp(log_mean + z), seed, correlation_length, log_std, log_mean, cell_size)


# -- pressure -----------------------------------------------------------------
def transmissibilities(perm: PermField) -> tuple[np.ndarray, np.ndarray]:
    """Harmonic-mean face transmissibilities ``(tx[H, W-1], ty[H-1, W])``.

    Square cells: face area over centre distance reduces to the thickness.
    """
    k = perm.k
    tx = 2.0 * k[:, :-1] * k[:, 1:] / (k[:, :-1] + k[:, 1:]) * perm.thickness
    ty = 2.0 * k[:-1, :] * k[1:, :] / (k[:-1, :] + k[1:, :]) * perm.thickness
    return tx, ty


def face_coefficients(perm: PermField, s: np.ndarray, fluids: FluidProps):
    """Transmissibility times the face-averaged total mobility."""
    lt = fluids.total_mobility(s)
    if not (lt > 0).all():
        raise PhysicsError("zero total mobility in at least one cell")
    tx, ty = transmissibilities(perm)
    cx = tx * 0.5 * (lt[:, :-1] + lt[:, 1:])
    cy = ty * 0.5 * (lt[:-1, :] + lt[1:, :])
    return cx, cy


def _assemble(cx: np.ndarray, cy: np.ndarray, pinned: int) -> sparse.csr_matrix:
    h, w = cy.shape[0] + 1, cx.shape[1] + 1
    n = h * w
    idx = np.arange(n).reshape(h, w)
    rows, cols, vals = [], [], []
    diag = np.zeros((h, w))
    for a, b, c in ((idx[:, :-1], idx[:, 1:], cx), (idx[:-1, :], idx[1:, :], cy)):
        rows += [a.ravel(), b.ravel()]
        cols += [b.ravel(), a.ravel()]
        vals += [-c.ravel(), -c.ravel()]
    diag[:, :-1] += cx
    diag[:, 1:] += cx
    diag[:-1, :] += cy
    diag[1:, :] += cy
    rows = np.concatenate(rows + [idx.ravel()])
    cols = np.concatenate(cols + [idx.ravel()])
    vals = np.concatenate(vals + [diag.ravel()])
    # Dirichlet gauge: drop the pinned row and column, keep a unit diagonal
    keep = ((rows != pinned) & (cols != pinned)) | ((rows == pinned) & (cols == pinned))
    vals = np.where((rows == pinned) & (cols == pinned), 1.0, vals)
    return sparse.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n))


def conjugate_gradient(a, b: np.ndarray, rtol: float = 1e-10, max_iter: int | None = None,
                       x0: np.ndarray | None = None) -> tuple[np.ndarray, int]:
    """Jacobi-preconditioned CG for a symmetric positive definite sparse ``a``.

    Stops when ``||b - a x|| <= rtol * ||b||``.
    """
    n = b.size
    max_iter = 10 * n if max_iter is None else max_iter
    inv_diag = 1.0 / a.diagonal()
    x = np.zeros(n) if x0 is None else x0.copy()
    r = b - a @ x
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0
    z = inv_diag * r
    d = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        ad = a @ d
        alpha = rz / (d @ ad)
        x += alpha * d
        r -= alpha * ad
        if np.linalg.norm(r) <= rtol * bnorm:
            return x, it
        z = inv_diag * r
        rz_new = r @ z
        d = z + (rz_new / rz) * d
        rz = rz_new
    raise SolverError(f"conjugate gradient did not converge in {max_iter} iterations")


def solve_pressure(perm: PermField, s: np.ndarray, fluids: FluidProps, wells: WellSpec,
                   rtol: float = 1e-10) -> np.ndarray:
    """Pressure map with the producer cell pinned to zero."""
    h, w = perm.shape
    cx, cy = face_coefficients(perm, s, fluids)
    prod = wells.producer_cell(perm.shape)
    pinned = prod[0] * w + prod[1]
    a = _assemble(cx, cy, pinned)
    b = wells.source(perm, fluids).ravel().copy()
    b[pinned] = 0.0
    p, _ = conjugate_gradient(a, b, rtol=rtol)
    return p.reshape(h, w)


def total_fluxes(perm: PermField, s: np.ndarray, p: np.ndarray, fluids: FluidProps):
    """Total face fluxes, positive towards +x (columns) and +y (rows)."""
    cx, cy = face_coefficients(perm, s, fluids)
    return cx * (p[:, :-1] - p[:, 1:]), cy * (p[:-1, :] - p[1:, :])


def divergence(fx: np.ndarray, fy: np.ndarray) -> np.ndarray:
    """Net outflow per cell from face fluxes."""
    h, w = fy.shape[0] + 1, fx.shape[1] + 1
    out = np.zeros((h, w))
    out[:, :-1] += fx
    out[:, 1:] -= fx
    out[:-1, :] += fy
    out[1:, :] -= fy
    return out


# -- saturation ---------------------------------------------------------------
def _face_throughput(fx: np.ndarray, fy: np.ndarray, q: np.ndarray):
    """Per-cell (inflow, outflow) volumes per unit time, wells included."""
    pos_x, neg_x = np.maximum(fx, 0.0), np.maximum(-fx, 0.0)
    pos_y, neg_y = np.maximum(fy, 0.0), np.maximum(-fy, 0.0)
    inflow = np.maximum(q, 0.0)
    outflow = np.maximum(-q, 0.0)
    inflow[:, 1:] += pos_x
    inflow[:, :-1] += neg_x
    inflow[1:, :] += pos_y
    inflow[:-1, :] += neg_y
    outflow[:, :-1] += pos_x
    outflow[:, 1:] += neg_x
    outflow[:-1, :] += pos_y
    outflow[1:, :] += neg_y
    return inflow, outflow


def cfl_time_step(fx: np.ndarray, fy: np.ndarray, q: np.ndarray, pore_volume: float,
                  fluids: FluidProps) -> float:
    """Largest explicit step keeping the upwind update monotone."""
    inflow, outflow = _face_throughput(fx, fy, q)
    throughput = np.maximum(inflow, outflow).max()
    if throughput == 0.0:
        return math.inf
    return pore_volume / (fluids.max_frac_slope * throughput)


def explicit_step(s: np.ndarray, fx: np.ndarray, fy: np.ndarray, q: np.ndarray,
                  pore_volume: float, fluids: FluidProps, dt: float):
    """One upwind fractional-flow update with frozen total fluxes.

    Returns the new saturation and the (injected, produced) water volumes.
    """
    fw = fluids.frac_flow(s)
    wx = fx * np.where(fx >= 0.0, fw[:, :-1], fw[:, 1:])
    wy = fy * np.where(fy >= 0.0, fw[:-1, :], fw[1:, :])
    qw = np.where(q > 0.0, q, q * fw)
    s_new = s + (dt / pore_volume) * (qw - divergence(wx, wy))
    return s_new, dt * qw[q > 0].sum(), -dt * qw[q < 0].sum()


def update_saturation(perm: PermField, s: np.ndarray, pressure: np.ndarray, fluids: FluidProps,
                      wells: WellSpec, dt: float, max_substeps: int = 100_000):
    """Advance saturation over ``dt`` with the total flux implied by ``pressure``.

    The interval is split into equal substeps no longer than the CFL limit.
    Returns ``(s_new, info)`` where ``info`` holds the substep count, the
    injected and produced water volumes and the worst relative balance error.
    """
    fx, fy = total_fluxes(perm, s, pressure, fluids)
    q = wells.source(perm, fluids)
    pv = perm.cell_volume * fluids.porosity
    limit = cfl_time_step(fx, fy, q, pv, fluids)
    n = 1 if math.isinf(limit) else max(1, math.ceil(dt / limit * (1.0 - 1e-12)))
    if n > max_substeps:
        raise PhysicsError(f"CFL requires {n} substeps (> {max_substeps})")
    sub = dt / n
    injected = produced = 0.0
    worst = 0.0
    for _ in range(n):
        s_next, inj, prod = explicit_step(s, fx, fy, q, pv, fluids, sub)
        stored = pv * (s_next.sum() - s.sum())
        scale = max(inj, 1e-300)
        worst = max(worst, abs(inj - prod - stored) / scale if inj > 0 else abs(stored))
        injected += inj
        produced += prod
        s = s_next
    if s.min() < -1e-12 or s.max() > 1.0 + 1e-12:
        raise PhysicsError(f"saturation left [0, 1]: [{s.min()}, {s.max()}]")
    return s, {"substeps": n, "injected": injected, "produced": produced, "balance": worst}


def run_simulation(perm: PermField, fluids: FluidProps | None = None, wells: WellSpec | None = None,
                   steps: int = 10, pressure_updates: int = 4,
                   initial_saturation: float = 0.0) -> SimOutput:
    """IMPES waterflood with ``steps`` uniformly spaced report frames.

    Each report interval is split into ``pressure_updates`` pressure solves,
    each followed by CFL-limited saturation substeps.  Frame ``t`` holds the
    saturation at ``(t + 1) * horizon / steps`` and the pressure solved for
    that saturation.
    """
    fluids = fluids or FluidProps()
    wells = wells or WellSpec()
    if steps < 1 or pressure_updates < 1:
        raise ConfigError("steps and pressure_updates must be >= 1")
    h, w = perm.shape
    pv = perm.cell_volume * fluids.porosity
    s = np.full((h, w), float(initial_saturation))
    initial_water = pv * s.sum()
    dt = wells.horizon / steps / pressure_updates

    sat = np.empty((steps, h, w))
    pres = np.empty((steps, h, w))
    balance = np.zeros(steps)
    wip = np.empty(steps)
    cum_in = np.empty(steps)
    cum_out = np.empty(steps)
    nsub = np.zeros(steps, dtype=np.int64)
    injected = produced = 0.0
    p = solve_pressure(perm, s, fluids, wells)
    for t in range(steps):
        for _ in range(pressure_updates):
            s, info = update_saturation(perm, s, p, fluids, wells, dt)
            p = solve_pressure(perm, s, fluids, wells)
            injected += info["injected"]
            produced += info["produced"]
            balance[t] = max(balance[t], info["balance"])
            nsub[t] += info["substeps"]
        sat[t] = s
        pres[t] = p
        wip[t] = pv * s.sum()
        cum_in[t] = injected
        cum_out[t] = produced
    times = wells.horizon * np.arange(1, steps + 1) / steps
    return SimOutput(sat, pres, times, balance, wip, cum_in, cum_out, nsub, initial_water,
                     meta={"steps": steps, "pressure_updates": pressure_updates, "pvi": wells.pvi,
                           "horizon": wells.horizon})


def sample_seeds(seed: int, n: int) -> list[int]:
    """Independent per-realization seeds derived from one master seed."""
    return [int(s.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
            for s in np.random.SeedSequence(seed).spawn(n)]


def generate_dataset(n: int, grid: int = 16, steps: int = 8, pvi: float = 0.8,
                     correlation_length: float = 4.0, log_std: float = 1.0, seed: int = 0,
                     fluids: FluidProps | None = None, pressure_updates: int = 4):
    """Simulate ``n`` permeability realizations into an in-memory ``Dataset``."""
    from dataclasses import asdict

    from .io import Dataset

    fluids = fluids or FluidProps()
    wells = WellSpec(pvi=pvi)
    seeds = sample_seeds(seed, n)
    perm = np.empty((n, grid, grid))
    sat = np.empty((n, steps, grid, grid))
    pres = np.empty((n, steps, grid, grid))
    for i, s in enumerate(seeds):
        field_ = generate_permeability(grid, grid, correlation_length, log_std, s)
        out = run_simulation(field_, fluids, wells, steps, pressure_updates)
        perm[i], sat[i], pres[i] = field_.k, out.saturation, out.pressure
    fluid_dict = {k: v for k, v in asdict(fluids).items()}
    header = {
        "generator": {"n": n, "grid": grid, "steps": steps, "pvi": pvi,
                      "correlation_length": correlation_length, "log_std": log_std,
                      "seed": seed, "pressure_updates": pressure_updates},
        "seeds": seeds,
        "pvi": pvi,
        "horizon": wells.horizon,
        "fluids": fluid_dict,
        "channel_names": ["perm", "saturation", "pressure"],
        "normalization": None,
    }
    return Dataset(perm, sat, pres, header)
