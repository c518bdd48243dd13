"""Finite-difference gradient checks over every primitive and both full models."""

from __future__ import annotations

import numpy as np

from . import nets, physics
from . import tensor as T
from .gradcheck import GradCheckReport, grad_check
from .simulator import WellSpec
from .tensor import Tensor


def _leaf(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def primitive_cases(seed: int = 0):
    """Yield ``(name, closure, params)`` for each differentiable primitive."""
    rng = np.random.default_rng(seed)

    def weights(shape):
        return rng.uniform(-1.0, 1.0, shape)

    x = _leaf(rng, (2, 3, 6, 6))
    k = _leaf(rng, (4, 3, 3, 3))
    b = _leaf(rng, (4,))
    r = weights((2, 4, 6, 6))
    yield "conv2d", lambda: T.tsum(T.mul(T.conv2d(x, k, b, padding=1), r)), {"x": x, "kernel": k, "bias": b}

    xp = _leaf(rng, (2, 3, 8, 8))
    rp = weights((2, 3, 4, 4))
    yield "maxpool2x2", lambda: T.tsum(T.mul(T.maxpool2x2_with_indices(xp)[0], rp)), {"x": xp}

    xu = _leaf(rng, (2, 3, 8, 8))
    ru = weights((2, 3, 8, 8))

    def unpool_loss():
        pooled, idx = T.maxpool2x2_with_indices(xu)
        return T.tsum(T.mul(T.max_unpool2x2(T.tanh(pooled), idx), ru))

    yield "max_unpool2x2", unpool_loss, {"x": xu}

    for name, fn in (("sigmoid", T.sigmoid), ("tanh", T.tanh), ("relu", T.relu), ("square", T.square)):
        a = _leaf(rng, (3, 5))
        ra = weights((3, 5))
        yield name, (lambda fn=fn, a=a, ra=ra: T.tsum(T.mul(fn(a), ra))), {"x": a}

    a, c = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    d = _leaf(rng, (3, 4), 0.5, 1.5)
    yield "hadamard", lambda: T.tsum(T.square(T.hadamard(a, c))), {"a": a, "b": c}
    yield "add", lambda: T.tsum(T.square(T.add(a, c))), {"a": a, "b": c}
    yield "sub", lambda: T.tsum(T.square(T.sub(a, c))), {"a": a, "b": c}
    yield "div", lambda: T.tsum(T.div(a, d)), {"a": a, "b": d}
    yield "scale", lambda: T.tsum(T.square(T.scale(a, -2.5))), {"x": a}
    pw = _leaf(rng, (3, 4), 0.2, 1.0)
    yield "power", lambda: T.tsum(T.power(pw, 2.5)), {"x": pw}
    bias = _leaf(rng, (4,))
    yield "broadcast_add", lambda: T.tsum(T.square(T.add(a, bias))), {"a": a, "bias": bias}

    s = _leaf(rng, (2, 3, 4))
    rs = weights((2, 4, 3))
    yield "reshape_transpose", lambda: T.tsum(T.mul(T.transpose(T.reshape(s, (2, 4, 3)), (0, 1, 2)), rs)), {"x": s}
    yield "getitem_pad", lambda: T.tsum(T.square(T.pad(s[:, 1:, ::2], [(0, 0), (1, 0), (0, 2)]))), {"x": s}
    yield "concat_stack", (lambda: T.tsum(T.square(T.concat([s, T.stack([s[:, 0], s[:, 1]], axis=1)], axis=1)))), {"x": s}
    yield "mean", lambda: T.mean(T.square(s), axis=(0, 2)).sum(), {"x": s}

    xd = _leaf(rng, (4, 6))
    drng_seed = int(rng.integers(1 << 31))
    yield "dropout", (lambda: T.tsum(T.square(T.dropout(xd, 0.3, np.random.default_rng(drng_seed), True)))), {"x": xd}

    cfg = nets.ModelConfig(grid=8, steps=1, widths=(2, 2, 2), hidden=2, kernel=3, dropout=0.0)
    params = nets.init_weights(cfg, nets.SEGNET_CONVLSTM, seed)
    for name in list(params):
        if name.startswith("lstm."):
            params[name].data[...] = rng.uniform(-0.5, 0.5, params[name].shape)
    lstm = {k: v for k, v in params.items() if k.startswith("lstm.")}
    xt = _leaf(rng, (1, 2, 8, 8))
    h0 = _leaf(rng, (1, 2, 8, 8), -0.5, 0.5)
    c0 = _leaf(rng, (1, 2, 8, 8))
    rh = weights((1, 2, 8, 8))

    def cell_loss():
        fresh = nets.ConvLSTMCell.from_params(params)
        h, c = nets.convlstm_step(fresh, xt, h0, c0)
        return T.add(T.tsum(T.mul(h, rh)), T.tsum(T.square(c)))

    yield "convlstm_step", cell_loss, {**lstm, "x_t": xt, "h_prev": h0, "c_prev": c0}

    sat = _leaf(rng, (3, 5, 5), 0.1, 0.9)
    pres = _leaf(rng, (3, 5, 5), 0.0, 2.0)
    kperm = np.exp(rng.normal(0.0, 0.5, (5, 5)))
    wells = WellSpec(pvi=0.5)
    yield "physics_loss", (lambda: physics.physics_loss(physics.discrete_residual(kperm, sat, pres, wells, dt=0.25))), {
        "saturation": sat, "pressure": pres}


def model_cases(seed: int = 0, grid: int = 8, steps: int = 3, channels: int = 2):
    """Full-model closures at a tiny width so every parameter can be probed."""
    rng = np.random.default_rng(seed + 1)
    x = rng.standard_normal((2, 1, grid, grid))
    target = rng.uniform(0.0, 1.0, (2, steps, channels, grid, grid))
    for kind in nets.MODEL_KINDS:
        cfg = nets.ModelConfig(grid=grid, steps=steps, widths=(3, 3, 4), hidden=3, kernel=3,
                               dropout=0.1, out_channels=channels, seed=seed)
        params = nets.init_weights(cfg, kind, seed)
        if kind == nets.SEGNET_CONVLSTM:
            for name in ("lstm.W_ci", "lstm.W_cf", "lstm.W_co"):
                params[name].data[...] = rng.uniform(-0.5, 0.5, params[name].shape)
        # small positive biases keep most ReLUs away from their kink
        for name in params:
            if name.endswith(".bias") and not name.startswith("head"):
                params[name].data[...] = rng.uniform(0.05, 0.2, params[name].shape)

        def loss(kind=kind, params=params, cfg=cfg):
            out = nets.forward(kind, params, cfg, x, True, np.random.default_rng(seed))
            return T.mean(T.square(T.sub(out, target)))

        yield f"model:{kind}", loss, dict(params)


def gradcheck_suite(tolerance: float = 1e-4, seed: int = 0, models: bool = True) -> dict[str, GradCheckReport]:
    reports = {}
    for name, closure, params in primitive_cases(seed):
        reports[name] = grad_check(closure, params, tolerance)
    if models:
        for name, closure, params in model_cases(seed):
            reports[name] = grad_check(closure, params, tolerance)
    return reports
