"""Loss assembly, normalization and the mini-batch Adam training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nets, physics
from . import tensor as T
from .errors import ConfigError, DimensionError, TrainingError
from .io import Dataset
from .optim import Adam
from .simulator import FluidProps, WellSpec
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Splits:
    train: int
    val: int
    test: int

    def check(self, n: int) -> None:
        if min(self.train, self.val, self.test) < 0 or self.train < 1:
            raise ConfigError(f"invalid split sizes {self}")
        if self.train + self.val + self.test > n:
            raise ConfigError(f"splits {self} exceed dataset size {n}")

    def indices(self, name: str) -> np.ndarray:
        start = {"train": 0, "val": self.train, "test": self.train + self.val}[name]
        return np.arange(start, start + getattr(self, name))


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters; defaults are the full-scale saturation-only setting."""

    model: str = nets.SEGNET
    lr: float = 3e-2
    dropout: float = 0.1
    weight_decay: float = 1e-4
    epochs: int = 150
    batch_size: int = 8
    lam: float = 0.0
    channels: int = 1
    splits: Splits = Splits(3550, 300, 150)
    seed: int = 0
    widths: tuple[int, int, int] = (16, 32, 64)
    hidden: int = 16
    kernel: int = 3

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("physics weight must be non-negative")
        if self.lam > 0 and self.channels != 2:
            raise ConfigError("physics loss needs the pressure channel (channels=2)")
        if self.channels not in (1, 2):
            raise ConfigError("channels must be 1 (saturation) or 2 (saturation, pressure)")
        if self.batch_size < 1 or self.epochs < 0 or self.lr < 0:
            raise ConfigError("batch size >= 1, epochs >= 0 and lr >= 0 required")
        if self.model not in nets.MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.model!r}")

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        base = dict(epochs=50, splits=Splits(300, 50, 50))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["splits"] = Splits(**d["splits"])
        d["widths"] = tuple(d["widths"])
        return cls(**d)

    def model_config(self, grid: int, steps: int) -> nets.ModelConfig:
        return nets.ModelConfig(grid=grid, steps=steps, widths=self.widths, hidden=self.hidden,
                                kernel=self.kernel, dropout=self.dropout,
                                out_channels=self.channels, seed=self.seed)


@dataclass
class LossReport:
    model: str
    seed: int
    lam: float
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    test_loss: float = float("nan")
    physics: dict[str, float] = field(default_factory=dict)
    param_count: int = 0
    wall_time: float = 0.0

    def to_json(self) -> str:
        """Deterministic serialization; wall time is left to the run manifest."""
        d = asdict(self)
        d.pop("wall_time")
        return json.dumps(d, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        rows = ["epoch,train_loss,val_loss"]
        rows += [f"{i},{tr!r},{va!r}" for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss))]
        return "\n".join(rows) + "\n"


# -- normalization --------------------------------------------------------------
@dataclass(frozen=True)
class NormStats:
    log_k_mean: float
    log_k_std: float
    p_min: float
    p_max: float

    def to_dict(self) -> dict:
        return asdict(self)


def fit_norm_stats(ds: Dataset, train_idx: np.ndarray) -> NormStats:
    logk = np.log(ds.perm[train_idx].astype(np.float64))
    p = ds.pressure[train_idx].astype(np.float64)
    mean, std = float(logk.mean()), float(logk.std())
    # summation round-off leaves a constant field with std ~ 1e-16
    if not std > 1e-12 * max(1.0, abs(mean)):
        raise ConfigError("log-permeability of the training split has zero variance")
    p_min, p_max = float(p.min()), float(p.max())
    if not p_max - p_min > 1e-12 * max(1.0, abs(p_max), abs(p_min)):
        raise ConfigError("pressure targets of the training split are constant")
    return NormStats(mean, std, p_min, p_max)


def normalize_inputs(perm: np.ndarray, stats: NormStats) -> np.ndarray:
    """Standardized log-permeability with a channel axis, ``(n, 1, H, W)``."""
    z = (np.log(np.asarray(perm, dtype=np.float64)) - stats.log_k_mean) / stats.log_k_std
    return z[:, None]


def denormalize_inputs(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.exp(np.asarray(x)[:, 0] * stats.log_k_std + stats.log_k_mean)


def normalize_pressure(p: np.ndarray, stats: NormStats) -> np.ndarray:
    return (np.asarray(p, dtype=np.float64) - stats.p_min) / (stats.p_max - stats.p_min)


def denormalize_pressure(p, stats: NormStats):
    """Works on arrays and on tensors (stays on the tape)."""
    span = stats.p_max - stats.p_min
    if isinstance(p, Tensor):
        return T.add(T.scale(p, span), stats.p_min)
    return np.asarray(p) * span + stats.p_min


def build_targets(ds: Dataset, stats: NormStats, channels: int) -> np.ndarray:
    """``(n, T, channels, H, W)``: saturation as is, pressure min-max scaled."""
    sat = ds.saturation.astype(np.float64)
    if channels == 1:
        return sat[:, :, None]
    return np.stack([sat, normalize_pressure(ds.pressure, stats)], axis=2)


@dataclass
class NormalizedData:
    x: np.ndarray
    y: np.ndarray
    perm: np.ndarray
    stats: NormStats
    splits: Splits


def normalize_dataset(ds: Dataset, splits: Splits, channels: int = 1,
                      stats: NormStats | None = None) -> NormalizedData:
    """Normalize with statistics fitted on the training split only, unless given."""
    splits.check(len(ds))
    if stats is None:
        stats = fit_norm_stats(ds, splits.indices("train"))
    return NormalizedData(normalize_inputs(ds.perm, stats), build_targets(ds, stats, channels),
                          ds.perm.astype(np.float64), stats, splits)


# -- losses -------------------------------------------------------------------------
def data_loss(y_pred, y_true) -> Tensor:
    """Mean squared error over every element."""
    y_pred, y_true = T.as_tensor(y_pred), T.as_tensor(y_true)
    if y_pred.shape != y_true.shape:
        raise DimensionError(f"prediction {y_pred.shape} and target {y_true.shape} differ")
    return T.mean(T.square(T.sub(y_pred, y_true)))


def total_loss(data: Tensor, physics_term: Tensor | None, lam: float) -> Tensor:
    if lam < 0:
        raise ConfigError("physics weight must be non-negative")
    if physics_term is None:
        if lam != 0:
            raise ConfigError("a physics term is required when lam > 0")
        return T.as_tensor(data)
    return T.add(data, T.scale(physics_term, lam))


def wells_from_header(header: dict) -> WellSpec:
    return WellSpec(pvi=header.get("pvi", 0.8), horizon=header.get("horizon", 1.0))


def fluids_from_header(header: dict) -> FluidProps:
    return FluidProps(**header["fluids"]) if "fluids" in header else FluidProps()


def batch_residual(pred: Tensor, perm: np.ndarray, stats: NormStats, wells: WellSpec,
                   fluids: FluidProps) -> physics.ResidualField:
    """Residual of a two-channel prediction ``(B, T, 2, H, W)``."""
    steps = pred.shape[1]
    sat = pred[:, :, 0]
    pres = denormalize_pressure(pred[:, :, 1], stats)
    return physics.discrete_residual(perm, sat, pres, wells, dt=wells.horizon / steps, fluids=fluids)


# -- training loop ------------------------------------------------------------------
class Trainer:
    def __init__(self, dataset: Dataset, config: TrainConfig, stats: NormStats | None = None):
        self.dataset = dataset
        self.config = config
        self.data = normalize_dataset(dataset, config.splits, config.channels, stats)
        h, w = dataset.grid
        if h != w:
            raise ConfigError("only square grids are supported")
        self.model_config = config.model_config(h, dataset.steps)
        self.wells = wells_from_header(dataset.header)
        self.fluids = fluids_from_header(dataset.header)

    def predict(self, params, idx: np.ndarray, batch_size: int = 32, train_mode: bool = False,
                rng=None) -> np.ndarray:
        outs = []
        with T.no_grad():
            for s in range(0, len(idx), batch_size):
                b = idx[s : s + batch_size]
                outs.append(nets.forward(self.config.model, params, self.model_config,
                                         self.data.x[b], train_mode, rng).data)
        shape = (0, self.model_config.steps, self.config.channels) + self.dataset.grid
        return np.concatenate(outs) if outs else np.zeros(shape)

    def evaluate(self, params, split: str, physics_loss: bool | None = None,
                 dropout: bool = False, rng=None) -> dict[str, float]:
        idx = self.data.splits.indices(split)
        pred = self.predict(params, idx, train_mode=dropout, rng=rng)
        out = {"data_loss": float(np.mean((pred - self.data.y[idx]) ** 2)) if len(idx) else float("nan")}
        if physics_loss is None:
            physics_loss = self.config.channels == 2
        if physics_loss and len(idx):
            res = batch_residual(Tensor(pred), self.data.perm[idx], self.data.stats, self.wells, self.fluids)
            out["physics_loss"] = float(physics.physics_loss(res).data)
        return out

    def train(self) -> tuple[nets.ModelParams, LossReport]:
        cfg = self.config
        start = time.perf_counter()
        params = nets.init_weights(self.model_config, cfg.model, cfg.seed)
        opt = Adam(params.tensors(), cfg.lr, cfg.weight_decay)
        rng = np.random.default_rng(cfg.seed)
        report = LossReport(cfg.model, cfg.seed, cfg.lam, param_count=nets.param_count(params))
        train_idx = self.data.splits.indices("train")
        best_val, best = np.inf, params.snapshot()

        for epoch in range(cfg.epochs):
            order = train_idx[rng.permutation(len(train_idx))]
            total, count = 0.0, 0
            for s in range(0, len(order), cfg.batch_size):
                b = order[s : s + cfg.batch_size]
                pred = nets.forward(cfg.model, params, self.model_config, self.data.x[b], True, rng)
                dl = data_loss(pred, self.data.y[b])
                pl = None
                if cfg.lam > 0:
                    res = batch_residual(pred, self.data.perm[b], self.data.stats, self.wells, self.fluids)
                    pl = physics.physics_loss(res)
                loss = total_loss(dl, pl, cfg.lam)
                if not np.isfinite(loss.data):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch samples {b.tolist()}: "
                        f"data={float(dl.data)!r}, physics={None if pl is None else float(pl.data)!r}, "
                        f"max |pred|={float(np.nanmax(np.abs(pred.data)))!r}"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(dl.data) * len(b)
                count += len(b)
            report.train_loss.append(total / max(count, 1))
            if len(self.data.splits.indices("val")):
                val = self.evaluate(params, "val", physics_loss=False)["data_loss"]
            else:
                val = report.train_loss[-1]
            report.val_loss.append(val)
            if val < best_val:
                best_val, best = val, params.snapshot()
                report.best_epoch = epoch
            log.debug("epoch %d train %.4e val %.4e", epoch, report.train_loss[-1], val)

        params.load(best)
        for split in ("train", "val", "test"):
            if not getattr(self.data.splits, split) or (split != "test" and cfg.channels == 1):
                continue
            out = self.evaluate(params, split)
            if split == "test":
                report.test_loss = out["data_loss"]
            if "physics_loss" in out:
                report.physics[split] = out["physics_loss"]
        report.wall_time = time.perf_counter() - start
        return params, report


def train(kind: str, dataset: Dataset, config: TrainConfig) -> tuple[nets.ModelParams, LossReport, Trainer]:
    """Train ``kind`` on ``dataset``; returns best-validation params, report and trainer."""
    if kind != config.model:
        config = TrainConfig(**{**config.__dict__, "model": kind})
    trainer = Trainer(dataset, config)
    params, report = trainer.train()
    return params, report, trainer


def evaluate(params, kind: str, trainer: Trainer, split: str, **kwargs) -> dict[str, float]:
    if kind != trainer.config.model:
        raise ConfigError(f"trainer was built for {trainer.config.model!r}, not {kind!r}")
    return trainer.evaluate(params, split, **kwargs)
