"""Simplified SegNet and SegNet-ConvLSTM surrogates.

Both models share one encoder-decoder trunk: seven 3x3 conv+ReLU layers in
stages of (2, 2, 3) separated by 2x2 max pools, mirrored by a decoder that
unpools with the stored encoder indices.  Plain SegNet maps the trunk output
through a 1x1 conv to ``steps * out_channels`` maps and reads them as a
sequence.  SegNet-ConvLSTM feeds the same trunk output to one peephole
ConvLSTM at every unroll step and decodes each hidden state with a shared 1x1
conv head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

SEGNET = "segnet"
SEGNET_CONVLSTM = "segnet-convlstm"
MODEL_KINDS = (SEGNET, SEGNET_CONVLSTM)

# (convs per stage, width index); three stages -> three pools
ENCODER_STAGES = ((2, 0), (2, 1), (3, 2))
GATES = ("i", "f", "c", "o")


@dataclass(frozen=True)
class ModelConfig:
    grid: int = 16
    steps: int = 8
    widths: tuple[int, int, int] = (16, 32, 64)
    hidden: int = 16
    kernel: int = 3
    dropout: float = 0.1
    out_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        pools = len(ENCODER_STAGES)
        if self.grid < 2**pools or self.grid % 2**pools:
            raise ConfigError(f"grid {self.grid} must be a positive multiple of {2**pools}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if len(self.widths) != pools or min(self.widths) < 1 or self.hidden < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("kernel size must be odd")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "widths": tuple(d["widths"])})


class ModelParams(dict):
    """Insertion-ordered mapping of parameter name to tensor."""

    def tensors(self) -> list[Tensor]:
        return list(self.values())

    def zero_grad(self) -> None:
        for p in self.values():
            p.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in self.items():
            v.data[...] = arrays[k]


def param_count(params) -> int:
    return int(sum(p.size for p in params.values()))


def param_breakdown(params) -> dict[str, int]:
    """Scalar count per layer (name prefix before the first dot)."""
    out: dict[str, int] = {}
    for name, p in params.items():
        layer = name.split(".")[0]
        out[layer] = out.get(layer, 0) + p.size
    return out


def convlstm_cell_size(in_channels: int, hidden: int, kernel: int, grid: int) -> int:
    """Closed-form scalar count of one peephole ConvLSTM cell."""
    conv = 4 * hidden * (in_channels + hidden) * kernel * kernel
    peephole = 3 * hidden * grid * grid
    return conv + peephole + 4 * hidden


# -- layer naming -------------------------------------------------------------
def _trunk_layers(config: ModelConfig) -> list[tuple[str, int, int]]:
    w = config.widths
    layers = []
    c_in = 1
    for s, (n, wi) in enumerate(ENCODER_STAGES, start=1):
        for j in range(1, n + 1):
            layers.append((f"enc{s}_{j}", c_in, w[wi]))
            c_in = w[wi]
    for s in reversed(range(1, len(ENCODER_STAGES) + 1)):
        n, wi = ENCODER_STAGES[s - 1]
        target = w[ENCODER_STAGES[s - 2][1]] if s > 1 else w[0]
        for j in range(1, n + 1):
            c_out = target if j == n else w[wi]
            layers.append((f"dec{s}_{j}", c_in, c_out))
            c_in = c_out
    return layers


def init_weights(config: ModelConfig, kind: str = SEGNET, seed: int | None = None) -> ModelParams:
    """He-uniform kernels (variance 2/fan_in), zero biases, forget-gate bias +1."""
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    k = config.kernel
    params = ModelParams()

    def kernel(name, c_out, c_in, size):
        bound = np.sqrt(6.0 / (c_in * size * size))
        params[name] = Tensor(rng.uniform(-bound, bound, (c_out, c_in, size, size)), requires_grad=True)

    for name, c_in, c_out in _trunk_layers(config):
        kernel(f"{name}.weight", c_out, c_in, k)
        params[f"{name}.bias"] = Tensor(np.zeros(c_out), requires_grad=True)

    w0, hid, c = config.widths[0], config.hidden, config.out_channels
    if kind == SEGNET:
        kernel("head.weight", config.steps * c, w0, 1)
        params["head.bias"] = Tensor(np.zeros(config.steps * c), requires_grad=True)
        return params

    for g in GATES:
        kernel(f"lstm.W_x{g}", hid, w0, k)
        kernel(f"lstm.W_h{g}", hid, hid, k)
    for g in ("i", "f", "o"):
        params[f"lstm.W_c{g}"] = Tensor(np.zeros((hid, config.grid, config.grid)), requires_grad=True)
    for g in GATES:
        params[f"lstm.b_{g}"] = Tensor(np.ones(hid) if g == "f" else np.zeros(hid), requires_grad=True)
    kernel("head.weight", c, hid, 1)
    params["head.bias"] = Tensor(np.zeros(c), requires_grad=True)
    return params


# -- trunk --------------------------------------------------------------------
def _conv_relu(params, name, x, pad):
    return T.relu(T.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], padding=pad))


def _check_input(config: ModelConfig, x) -> Tensor:
    x = T.as_tensor(x)
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (config.grid, config.grid):
        raise DimensionError(f"expected input (N, 1, {config.grid}, {config.grid}), got {x.shape}")
    return x


def _dropout_rng(config, train_mode, rng):
    if train_mode and config.dropout > 0 and rng is None:
        return np.random.default_rng(config.seed)
    return rng


def segnet_trunk(params, config: ModelConfig, x, train_mode: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    """Encoder-decoder features at full resolution, ``(N, widths[0], H, W)``."""
    x = _check_input(config, x)
    rng = _dropout_rng(config, train_mode, rng)
    pad = config.kernel // 2
    indices = []
    for s, (n, _) in enumerate(ENCODER_STAGES, start=1):
        for j in range(1, n + 1):
            x = _conv_relu(params, f"enc{s}_{j}", x, pad)
        x, imap = T.maxpool2x2_with_indices(x)
        indices.append(imap)
        x = T.dropout(x, config.dropout, rng, train_mode)
    for s in reversed(range(1, len(ENCODER_STAGES) + 1)):
        x = T.max_unpool2x2(x, indices[s - 1])
        for j in range(1, ENCODER_STAGES[s - 1][0] + 1):
            x = _conv_relu(params, f"dec{s}_{j}", x, pad)
    return x


def segnet_forward(params, config: ModelConfig, x, train_mode: bool = False,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Plain SegNet: ``(N, steps, out_channels, H, W)``."""
    feats = segnet_trunk(params, config, x, train_mode, rng)
    out = T.conv2d(feats, params["head.weight"], params["head.bias"])
    n = out.shape[0]
    return T.reshape(out, (n, config.steps, config.out_channels, config.grid, config.grid))


# -- ConvLSTM -----------------------------------------------------------------
@dataclass
class ConvLSTMCell:
    W_x: dict[str, Tensor]
    W_h: dict[str, Tensor]
    W_c: dict[str, Tensor]  # peephole maps for i, f, o
    b: dict[str, Tensor]
    padding: int = 1
    _stacked: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_params(cls, params, prefix: str = "lstm") -> "ConvLSTMCell":
        get = lambda n: params[f"{prefix}.{n}"]  # noqa: E731
        kx = get("W_xi").shape[-1]
        return cls(
            W_x={g: get(f"W_x{g}") for g in GATES},
            W_h={g: get(f"W_h{g}") for g in GATES},
            W_c={g: get(f"W_c{g}") for g in ("i", "f", "o")},
            b={g: get(f"b_{g}") for g in GATES},
            padding=kx // 2,
        )

    @property
    def hidden(self) -> int:
        return self.W_h["i"].shape[0]

    def stacked(self, which: str) -> Tensor:
        # one conv for all four gates; rebuilt per forward so it stays on the tape
        if which not in self._stacked:
            src = self.W_x if which == "x" else self.W_h
            self._stacked[which] = T.concat([src[g] for g in GATES], axis=0)
        return self._stacked[which]


def input_gates(cell: ConvLSTMCell, x: Tensor) -> Tensor:
    """Input-to-state convolutions for all four gates, ``(N, 4*hidden, H, W)``."""
    return T.conv2d(x, cell.stacked("x"), padding=cell.padding)


def convlstm_step(cell: ConvLSTMCell, x_t, h_prev, c_prev, x_gates: Tensor | None = None,
                  return_gates: bool = False):
    """One peephole ConvLSTM update; returns ``(h_t, c_t)``.

    ``x_gates`` may carry precomputed ``input_gates(cell, x_t)`` when the same
    input is fed at every step.
    """
    h_prev, c_prev = T.as_tensor(h_prev), T.as_tensor(c_prev)
    hid = cell.hidden
    if x_gates is None:
        x_t = T.as_tensor(x_t)
        if x_t.shape[2:] != h_prev.shape[2:]:
            raise DimensionError(f"input {x_t.shape} and state {h_prev.shape} differ spatially")
        x_gates = input_gates(cell, x_t)
    if h_prev.shape != c_prev.shape or h_prev.shape[1] != hid:
        raise DimensionError(f"hidden {h_prev.shape} / cell {c_prev.shape} states inconsistent")
    if cell.W_c["i"].shape != h_prev.shape[1:] or x_gates.shape[2:] != h_prev.shape[2:]:
        raise DimensionError(f"state {h_prev.shape} does not match cell grid {cell.W_c['i'].shape}")

    pre = T.add(x_gates, T.conv2d(h_prev, cell.stacked("h"), padding=cell.padding))

    def gate(g):
        return T.add(pre[:, GATES.index(g) * hid : (GATES.index(g) + 1) * hid],
                     T.reshape(cell.b[g], (hid, 1, 1)))

    i = T.sigmoid(T.add(gate("i"), T.mul(cell.W_c["i"], c_prev)))
    f = T.sigmoid(T.add(gate("f"), T.mul(cell.W_c["f"], c_prev)))
    cand = T.tanh(gate("c"))
    c = T.add(T.mul(f, c_prev), T.mul(i, cand))
    o = T.sigmoid(T.add(gate("o"), T.mul(cell.W_c["o"], c)))
    h = T.mul(o, T.tanh(c))
    if return_gates:
        return h, c, {"i": i, "f": f, "o": o, "candidate": cand}
    return h, c


def segnet_convlstm_forward(params, config: ModelConfig, x, train_mode: bool = False,
                            rng: np.random.Generator | None = None) -> Tensor:
    """SegNet trunk followed by one ConvLSTM unrolled ``steps`` times."""
    feats = segnet_trunk(params, config, x, train_mode, rng)
    cell = ConvLSTMCell.from_params(params)
    n = feats.shape[0]
    zeros = np.zeros((n, cell.hidden, config.grid, config.grid))
    h, c = T.Tensor(zeros), T.Tensor(zeros)
    x_gates = input_gates(cell, feats)
    frames = []
    for _ in range(config.steps):
        h, c = convlstm_step(cell, None, h, c, x_gates=x_gates)
        frames.append(T.conv2d(h, params["head.weight"], params["head.bias"]))
    return T.stack(frames, axis=1)


def forward(kind: str, params, config: ModelConfig, x, train_mode: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    if kind == SEGNET:
        return segnet_forward(params, config, x, train_mode, rng)
    if kind == SEGNET_CONVLSTM:
        return segnet_convlstm_forward(params, config, x, train_mode, rng)
    raise ConfigError(f"unknown model kind {kind!r}")
