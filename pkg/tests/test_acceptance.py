"""Acceptance suite: one PASS/FAIL line per criterion, collected in the terminal summary.

The desk-scale training criteria take tens of minutes on one core.  Run just
this file with ``pytest tests/test_acceptance.py -v``.  Artifacts (datasets,
UQ manifest, timing) go to ``$FLOWSURROGATE_OUT/acceptance`` or
``acceptance_artifacts/`` next to the tests directory.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from flowsurrogate import io, nets, physics, training, uq
from flowsurrogate.cli import main
from flowsurrogate.errors import HashMismatchError
from flowsurrogate.nets import SEGNET, SEGNET_CONVLSTM, ConvLSTMCell
from flowsurrogate.simulator import (
    PermField,
    WellSpec,
    generate_dataset,
    generate_permeability,
    run_simulation,
    sample_seeds,
)
from flowsurrogate.tensor import Tensor
from flowsurrogate.training import Splits, TrainConfig

from acceptance_log import record
from oracles import convlstm_scalar

SEEDS = (0, 1, 2)
DESK = dict(grid=16, steps=8, seed=1234)
UQ_SEED, UQ_N = 777, 100


@pytest.fixture(scope="session")
def artifacts():
    base = Path(os.environ[io.OUTPUT_DIR_ENV]) if io.OUTPUT_DIR_ENV in os.environ \
        else Path(__file__).resolve().parent.parent / "acceptance_artifacts"
    out = base / "acceptance" if io.OUTPUT_DIR_ENV in os.environ else base
    out.mkdir(parents=True, exist_ok=True)
    return out


@pytest.fixture(scope="session")
def desk_data(artifacts):
    ds = generate_dataset(400, **DESK)
    io.write_dataset(ds, artifacts / "desk.fsd")
    return ds


@pytest.fixture(scope="session")
def case1(desk_data):
    runs = {}
    for kind in (SEGNET, SEGNET_CONVLSTM):
        for seed in SEEDS:
            cfg = TrainConfig.desk_scale(model=kind, lr=1e-3, seed=seed)
            params, report, trainer = training.train(kind, desk_data, cfg)
            runs[kind, seed] = (params, report, trainer)
    return runs


# -- 1 ------------------------------------------------------------------------------------
def test_criterion_1_gradient_correctness(artifacts, capsys):
    start = time.perf_counter()
    code = main(["gradcheck", "--out", str(artifacts / "gradcheck")])
    elapsed = time.perf_counter() - start
    lines = capsys.readouterr().out.strip().splitlines()
    ok = code == 0 and elapsed < 120
    assert record(1, "gradient correctness", ok, f"{lines[-1]}, {elapsed:.1f} s (limit 120 s)")


# -- 2 ------------------------------------------------------------------------------------
def test_criterion_2_convlstm_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        c_in, hid = (int(v) for v in rng.integers(1, 4, 2))
        grid = int(rng.choice([3, 4, 6]))
        params = {}
        for g in nets.GATES:
            params[f"lstm.W_x{g}"] = Tensor(rng.uniform(-0.5, 0.5, (hid, c_in, 3, 3)))
            params[f"lstm.W_h{g}"] = Tensor(rng.uniform(-0.5, 0.5, (hid, hid, 3, 3)))
            params[f"lstm.b_{g}"] = Tensor(rng.uniform(-0.5, 0.5, hid))
        for g in ("i", "f", "o"):
            params[f"lstm.W_c{g}"] = Tensor(rng.uniform(-0.5, 0.5, (hid, grid, grid)))
        x = rng.normal(size=(1, c_in, grid, grid))
        h0, c0 = rng.normal(size=(2, 1, hid, grid, grid))
        h, c = nets.convlstm_step(ConvLSTMCell.from_params(params), x, h0, c0)
        ho, co = convlstm_scalar(x[0], h0[0], c0[0],
                                 {g: params[f"lstm.W_x{g}"].data for g in nets.GATES},
                                 {g: params[f"lstm.W_h{g}"].data for g in nets.GATES},
                                 {g: params[f"lstm.W_c{g}"].data for g in ("i", "f", "o")},
                                 {g: params[f"lstm.b_{g}"].data for g in nets.GATES})
        worst = max(worst, float(np.abs(h.data[0] - ho).max()), float(np.abs(c.data[0] - co).max()))
    assert record(2, "ConvLSTM scalar oracle", worst <= 1e-12, f"max abs diff {worst:.2e} over 100 cases")


# -- 3 ------------------------------------------------------------------------------------
def test_criterion_3_simulator_conservation():
    balance, s_lo, s_hi = 0.0, np.inf, -np.inf
    for seed in sample_seeds(3, 50):
        out = run_simulation(generate_permeability(16, 16, 4.0, 1.0, seed), steps=8)
        balance = max(balance, float(out.mass_balance.max()))
        s_lo, s_hi = min(s_lo, float(out.saturation.min())), max(s_hi, float(out.saturation.max()))
    sym = run_simulation(PermField(np.full((16, 16), 100.0)), steps=8).saturation
    asym = float(np.abs(sym - sym.transpose(0, 2, 1)).max())
    ok = balance <= 1e-10 and s_lo >= 0.0 and s_hi <= 1.0 and asym <= 1e-10
    assert record(3, "simulator conservation", ok,
                  f"mass balance {balance:.2e}, S in [{s_lo:.3g}, {s_hi:.3g}], diagonal asymmetry {asym:.2e}")


# -- 4 ------------------------------------------------------------------------------------
def test_criterion_4_physics_residual_oracle():
    steps, worst_exact, worst_ratio = 120, 0.0, np.inf
    wells = WellSpec(pvi=0.2)
    for i, seed in enumerate(sample_seeds(4, 20)):
        perm = generate_permeability(10, 10, 3.0, 1.0, seed)
        out = run_simulation(perm, wells=wells, steps=steps, pressure_updates=1)
        assert np.all(out.substeps == 1)
        exact = physics.discrete_residual(perm, out.saturation, out.pressure, wells, dt=1.0 / steps).aggregate
        order = np.random.default_rng(i).permutation(steps)
        shuffled = physics.discrete_residual(perm, out.saturation[order], out.pressure[order], wells,
                                             dt=1.0 / steps).aggregate
        worst_exact = max(worst_exact, exact)
        worst_ratio = min(worst_ratio, shuffled / max(exact, np.finfo(float).tiny))
    ok = worst_exact <= 1e-8 and worst_ratio >= 1e4
    assert record(4, "physics residual oracle", ok,
                  f"worst exact loss {worst_exact:.2e}, smallest shuffled/exact ratio {worst_ratio:.2e}")


# -- 5 ------------------------------------------------------------------------------------
def test_criterion_5_case1_ordering(case1, artifacts):
    mse = {k: np.median([case1[k, s][1].test_loss for s in SEEDS]) for k in (SEGNET, SEGNET_CONVLSTM)}
    wall = sum(r[1].wall_time for r in case1.values())
    ratio = mse[SEGNET_CONVLSTM] / mse[SEGNET]
    per_seed = {k: [round(case1[k, s][1].test_loss, 6) for s in SEEDS] for k in (SEGNET, SEGNET_CONVLSTM)}
    io.write_manifest(artifacts / "case1.manifest.json", "acceptance-case1",
                      {"dataset": DESK, "train": TrainConfig.desk_scale(lr=1e-3).to_dict()}, SEEDS, [],
                      wall, {"test_mse": per_seed, "median_ratio": ratio})
    ok = ratio < 1.0 and wall < 1800
    assert record(5, "case 1 ordering", ok,
                  f"median test MSE segnet {mse[SEGNET]:.3e}, segnet-convlstm {mse[SEGNET_CONVLSTM]:.3e}, "
                  f"ratio {ratio:.3f}, training time {wall / 60:.1f} min (limit 30)")


# -- 6 ------------------------------------------------------------------------------------
def test_criterion_6_physics_effect(desk_data, artifacts):
    reports = {}
    for lam in (0.0, 0.3):
        for seed in SEEDS:
            cfg = TrainConfig.desk_scale(model=SEGNET_CONVLSTM, lr=1e-3, seed=seed, lam=lam, channels=2)
            reports[lam, seed] = training.train(SEGNET_CONVLSTM, desk_data, cfg)[1]
    phys = {lam: np.median([reports[lam, s].physics["test"] for s in SEEDS]) for lam in (0.0, 0.3)}
    mse = {lam: np.median([reports[lam, s].test_loss for s in SEEDS]) for lam in (0.0, 0.3)}
    io.write_manifest(artifacts / "case2.manifest.json", "acceptance-case2", {"dataset": DESK}, SEEDS, [],
                      sum(r.wall_time for r in reports.values()),
                      {"test_physics": {str(k): [reports[k, s].physics["test"] for s in SEEDS] for k in phys},
                       "test_mse": {str(k): [reports[k, s].test_loss for s in SEEDS] for k in mse}})
    ok = phys[0.3] < phys[0.0] and mse[0.3] <= 2.0 * mse[0.0]
    assert record(6, "case 2 physics effect", ok,
                  f"median test physics {phys[0.0]:.3e} -> {phys[0.3]:.3e}, "
                  f"median test MSE {mse[0.0]:.3e} -> {mse[0.3]:.3e} ({mse[0.3] / mse[0.0]:.2f}x, limit 2x)")


# -- 7 ------------------------------------------------------------------------------------
def test_criterion_7_uq_pipeline(desk_data, case1, artifacts):
    gen = desk_data.header["generator"]
    seeds = sample_seeds(UQ_SEED, UQ_N)
    assert not set(seeds) & set(desk_data.header["seeds"])
    perms = [generate_permeability(DESK["grid"], DESK["grid"], gen["correlation_length"], gen["log_std"], s)
             for s in seeds]
    wells = training.wells_from_header(desk_data.header)
    sim = uq.mcs_run(uq.SIMULATOR, perms, steps=DESK["steps"], wells=wells,
                     pressure_updates=gen["pressure_updates"])
    t = DESK["steps"] // 2
    errors = {}
    for kind in (SEGNET, SEGNET_CONVLSTM):
        for seed in SEEDS:
            params, _, trainer = case1[kind, seed]
            predictor = uq.surrogate_predictor(kind, params, trainer.model_config, trainer.data.stats)
            sur = uq.mcs_run(uq.SURROGATE, perms, predictor=predictor)
            errors[kind, seed] = uq.compare_stats(sim, sur, t)["mean"]["rel_l2_t"]
    med = {k: float(np.median([errors[k, s] for s in SEEDS])) for k in (SEGNET, SEGNET_CONVLSTM)}
    maps = io.export_maps(sim.mean[t], artifacts / f"sim_mean_t{t:03d}.csv")
    maps += io.export_maps(sim.var[t], artifacts / f"sim_var_t{t:03d}.csv")
    manifest = io.write_manifest(
        artifacts / "uq.manifest.json", "acceptance-uq", {"n": UQ_N, "t": t, "dataset": DESK}, seeds, maps, 0.0,
        {"mean_rel_l2_t": {k: [errors[k, s] for s in SEEDS] for k in (SEGNET, SEGNET_CONVLSTM)},
         "median_mean_rel_l2_t": med})
    valid = sim.var.min() >= 0 and 0 <= sim.mean.min() and sim.mean.max() <= 1
    ok = bool(valid) and med[SEGNET_CONVLSTM] <= med[SEGNET] and "median_mean_rel_l2_t" in manifest
    assert record(7, "UQ pipeline", ok,
                  f"N={UQ_N}, var min {sim.var.min():.2e}, mean in [{sim.mean.min():.3f}, {sim.mean.max():.3f}], "
                  f"median mean-map rel L2 at t={t}: segnet {med[SEGNET]:.4f}, "
                  f"segnet-convlstm {med[SEGNET_CONVLSTM]:.4f}")


# -- 8 ------------------------------------------------------------------------------------
def test_criterion_8_determinism_and_io(tmp_path):
    files = []
    for rep in range(2):
        ds = generate_dataset(12, grid=8, steps=3, seed=8, pressure_updates=1)
        io.write_dataset(ds, tmp_path / f"d{rep}.fsd")
        cfg = TrainConfig(model=SEGNET_CONVLSTM, widths=(2, 2, 3), hidden=2, epochs=2, batch_size=4,
                          splits=Splits(8, 2, 2), lr=1e-3, lam=0.3, channels=2, seed=8)
        params, report, _ = training.train(SEGNET_CONVLSTM, ds, cfg)
        io.write_checkpoint(tmp_path / f"c{rep}.fsc", params, {"train_config": cfg.to_dict()})
        (tmp_path / f"r{rep}.json").write_text(report.to_json())
        files.append([tmp_path / f"{p}{rep}{ext}" for p, ext in (("d", ".fsd"), ("c", ".fsc"), ("r", ".json"))])
    identical = all(a.read_bytes() == b.read_bytes() for a, b in zip(*files))

    # the container stores float32; the round trip is exact on that representation
    back = io.read_dataset(tmp_path / "d0.fsd")
    exact = all(np.array_equal(getattr(back, f), getattr(ds, f).astype("<f4")) for f in io.FIELDS)
    io.write_dataset(back, tmp_path / "again.fsd")
    exact = exact and (tmp_path / "again.fsd").read_bytes() == (tmp_path / "d0.fsd").read_bytes()

    raw = bytearray((tmp_path / "d0.fsd").read_bytes())
    raw[len(raw) // 2 + 100] ^= 0x01
    (tmp_path / "bad.fsd").write_bytes(bytes(raw))
    try:
        io.read_dataset(tmp_path / "bad.fsd")
        detected = False
    except HashMismatchError:
        detected = True
    ok = identical and exact and detected
    assert record(8, "determinism and I/O", ok,
                  f"byte-identical reruns {identical}, bit-exact round trip {exact}, corruption detected {detected}")
