"""Acceptance suite: one printed pass/fail line per criterion.

The learned-reconstruction and classification criteria train real networks
at desk scale, so this module takes on the order of an hour on one core.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import pytest

from acceptance_log import record
from cannulacam import metrics
from cannulacam.datagen import ALL_DEPTHS, FIXED, gen_glyphs, generate_dataset, load_dataset
from cannulacam.linear_recon import SolverParams, calibrate, tikhonov_solve
from cannulacam.nn.engine import precision
from cannulacam.optics import NOISE_OFF, NoiseParams, OpticalConfig, angular_extent_deg, build_operator, forward
from cannulacam.pipelines import experiments as ex
from cannulacam.pipelines.training import TrainConfig
from cannulacam.rng import named_seed
from gradcheck import run_suite
from oracles import dense_normal_solve, ssim_direct

DESK = OpticalConfig()
REF = DESK.ref_index
N_TRAIN, N_TEST = 2000, 200
DEPTH_TRAIN, DEPTH_TEST = 1000, 200


# -- 1 -------------------------------------------------------------------------------

def test_c01_geometry():
    cases = [(6.5, 10.62, 0.05), (11.0, 17.86, 0.05), (0.26, 0.426, 0.01)]
    vals = [angular_extent_deg(s, 35.0) for s, _, _ in cases]
    ok = all(abs(v - e) <= t for v, (_, e, t) in zip(vals, cases))
    record(1, "geometry", ok, ", ".join(f"{s} cm -> {v:.3f} deg" for (s, _, _), v in zip(cases, vals)))
    assert ok


# -- 2 -------------------------------------------------------------------------------

def test_c02_superposition():
    t0 = time.perf_counter()
    cfg = OpticalConfig(scene_h=16, scene_w=16, sensor_h=20, sensor_w=20)
    rng = np.random.default_rng(2)
    worst = 0.0
    for d in range(len(cfg.depths_cm)):
        op = build_operator(cfg, d)
        for _ in range(20):
            x, y = rng.random((16, 16)), rng.random((16, 16))
            a, b = rng.random(2)
            worst = max(worst, float(np.max(np.abs(forward(op, a * x + b * y) - a * forward(op, x)
                                                   - b * forward(op, y)))))
    dt = time.perf_counter() - t0
    ok = worst < 1e-6 and dt < 10
    record(2, "forward superposition", ok, f"100 pairs, max violation {worst:.2e}, {dt:.1f} s")
    assert ok


# -- 3 -------------------------------------------------------------------------------

def run_c03(out_dir):
    op = build_operator(DESK, REF)
    cal = calibrate(lambda s: forward(op, s), DESK.scene_shape)
    path = out_dir / "probed.top1"
    cal.to_operator(REF, DESK.seed, DESK.digest()).save(path)
    return cal, op, path.read_bytes()


@pytest.fixture(scope="module")
def c03(tmp_path_factory):
    t0 = time.perf_counter()
    cal, op, blob = run_c03(tmp_path_factory.mktemp("c03"))
    return cal, op, blob, time.perf_counter() - t0


def test_c03_calibration(c03):
    cal, op, _, dt = c03
    err = float(np.max(np.abs(cal.matrix - op.matrix)))
    ok = err < 1e-6 and dt < 60
    record(3, "calibration oracle", ok, f"32x32 scene, max abs error {err:.2e}, {dt:.1f} s")
    assert ok


# -- 4 -------------------------------------------------------------------------------

def test_c04_tikhonov_round_trip(c03):
    t0 = time.perf_counter()
    cal = c03[0]
    scenes, _ = gen_glyphs(50, 10, DESK.scene_h, 404)
    op = build_operator(DESK, REF)
    params = SolverParams(lam=1e-3)
    maes, ssims = [], []
    for s in scenes:
        y = forward(op, s[0]).ravel()
        rec = tikhonov_solve(cal, y, params).clamped().reshape(DESK.scene_shape)
        maes.append(metrics.mae(rec, s[0]))
        ssims.append(metrics.ssim(rec, s[0]))
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(5):
        A, y = rng.random((64, 64)), rng.random(64)
        x = tikhonov_solve(A, y, SolverParams(lam=1e-3, cg_tol=1e-13, max_cg_iters=5000)).x
        worst = max(worst, float(np.max(np.abs(x - dense_normal_solve(A, y, 1e-3)))))
    dt = time.perf_counter() - t0
    m_mae, m_ssim = float(np.mean(maes)), float(np.mean(ssims))
    ok_rt = m_mae < 0.02 and m_ssim > 0.85
    ok_cg = worst < 1e-6
    ok = ok_rt and ok_cg and dt < 300
    record(4, "Tikhonov round trip", ok,
           f"lambda 1e-3 on 50 noiseless glyphs: MAE {m_mae:.4f} (need < 0.02), SSIM {m_ssim:.3f} (need > 0.85); "
           f"8x8 CG vs dense max error {worst:.1e}; {dt:.0f} s")
    assert ok_cg
    assert ok_rt


# -- 5 -------------------------------------------------------------------------------

def test_c05_gradient_suite():
    t0 = time.perf_counter()
    with precision(64):
        checks = run_suite(seed=5)
    dt = time.perf_counter() - t0
    layers = sorted({c.layer for c in checks})
    few = [l for l in layers if sum(c.layer == l for c in checks) < 5]
    bad = [c for c in checks if not c.ok]
    ok = not bad and not few and dt < 120
    worst = max(c.error for c in checks)
    record(5, "gradient suite", ok, f"{len(checks)} checks over {len(layers)} layer kinds, worst rel error "
                                    f"{worst:.1e}, {dt:.1f} s")
    assert ok, bad


# -- 6, 7, 9 share one dataset and one reconstructor ----------------------------------------

@dataclass
class ReconRun:
    data: object
    weights: object
    report: object
    weight_bytes: bytes
    report_bytes: bytes
    seconds: float
    losses: list


def run_c06(root) -> ReconRun:
    t0 = time.perf_counter()
    generate_dataset("GLYPHS", N_TRAIN + N_TEST, DESK, FIXED(REF), NoiseParams(), 6, root / "data",
                     test_fraction=N_TEST / (N_TRAIN + N_TEST), n_classes=10)
    data = load_dataset(root / "data")
    scenes, sensors = data.arrays(data.manifest.select("TRAIN"))
    res = ex.train_recon(scenes, sensors, TrainConfig(epochs=30, batch_size=16, lr=1e-3, seed=6))
    res.weights.save(root / "recon.nnw")
    rep = ex.eval_recon(res.weights, data, data.manifest.select("TEST"), ex.mean_train_image(data))
    rep.write(root / "recon.csv")
    return ReconRun(data, res.weights, rep, (root / "recon.nnw").read_bytes(), (root / "recon.csv").read_bytes(),
                    time.perf_counter() - t0, res.epoch_losses)


@pytest.fixture(scope="module")
def c06(tmp_path_factory):
    return run_c06(tmp_path_factory.mktemp("c06"))


def test_c06_desk_reconstruction(c06):
    agg = c06.report.aggregates
    s, m, beat = agg["mean_ssim"], agg["mean_mae"], agg["beats_baseline_fraction"]
    n_train = len(c06.data.manifest.select("TRAIN"))
    ok = s >= 0.60 and m <= 0.08 and beat >= 0.95 and c06.seconds <= 1800 and len(c06.losses) == 30
    record(6, "desk reconstruction", ok,
           f"{n_train} train / {int(agg['n'])} test, 30 epochs: SSIM {s:.3f} (>= 0.60), MAE {m:.4f} (<= 0.08), "
           f"beats train-mean baseline on {beat:.1%} (>= 95%), {c06.seconds / 60:.1f} min")
    assert ok


def test_c07_depth_of_focus(c06, tmp_path_factory):
    t0 = time.perf_counter()
    root = tmp_path_factory.mktemp("c07")
    # same scenes and split as criterion 6, recorded at every depth
    generate_dataset("GLYPHS", N_TRAIN + N_TEST, DESK, ALL_DEPTHS, NoiseParams(), 6, root,
                     test_fraction=N_TEST / (N_TRAIN + N_TEST), n_classes=10)
    data = load_dataset(root)
    res = ex.dof_sweep(c06.weights, ex.split_by_depth(data))
    dt = time.perf_counter() - t0
    ok = res.argmax == REF and dt <= 300
    curve = ", ".join(f"{d:g} cm {s:.3f}" for d, s in zip(res.depths_cm, res.mean_ssim))
    record(7, "depth-of-focus argmax", ok, f"SSIM by depth: {curve}; best {res.depths_cm[res.argmax]:g} cm "
                                           f"(trained {DESK.depths_cm[REF]:g} cm), {dt:.0f} s")
    assert ok


def test_c09_raw_domain_classification(c06):
    t0 = time.perf_counter()
    cfg = TrainConfig(epochs=35, batch_size=16, lr=1e-3, seed=9)
    raw = ex.train_eval_classify(c06.data, "RAW", cfg, (32, 32))
    rec = ex.train_eval_classify(c06.data, "RECON", cfg, (32, 32), c06.weights)
    dt = time.perf_counter() - t0
    diff = rec.accuracy - raw.accuracy
    ok = raw.accuracy >= 0.50 and dt <= 1800
    record(9, "raw-domain classification", ok,
           f"10 classes, 35 epochs: RAW {raw.accuracy:.3f} (>= 0.50), RECON {rec.accuracy:.3f}, "
           f"RECON - RAW {diff:+.3f}, {dt / 60:.1f} min")
    record("9b", "expected ordering RECON >= RAW (warning only)", diff >= 0,
           f"difference {diff:+.3f}", status=None if diff >= 0 else "WARN")
    if diff < 0:
        import warnings

        warnings.warn(f"RAW outperformed RECON by {-diff:.3f}; expected the reverse ordering")
    assert ok


# -- 8 -------------------------------------------------------------------------------

@dataclass
class DepthRun:
    run: object
    weight_bytes: bytes
    report_bytes: bytes
    seconds: float


def _depth_data(root):
    n = DEPTH_TRAIN + DEPTH_TEST
    generate_dataset("GLYPHS", n, DESK, ALL_DEPTHS, NoiseParams(), 8, root / "data",
                     test_fraction=DEPTH_TEST / n, n_classes=10)
    return load_dataset(root / "data")


def run_c08(root, data=None, shuffled=False) -> DepthRun:
    t0 = time.perf_counter()
    data = data or _depth_data(root)
    run = ex.train_eval_depth(data, TrainConfig(epochs=30, batch_size=16, lr=1e-3, seed=8), (32, 32),
                              shuffled_labels=shuffled)
    tag = "shuffled" if shuffled else "depth"
    run.train.weights.save(root / f"{tag}.nnw")
    rep = ex.classifier_report(run, data.manifest.select("TEST"))
    rep.write(root / f"{tag}.csv")
    return DepthRun(run, (root / f"{tag}.nnw").read_bytes(), (root / f"{tag}.csv").read_bytes(),
                    time.perf_counter() - t0)


@pytest.fixture(scope="module")
def c08(tmp_path_factory):
    root = tmp_path_factory.mktemp("c08")
    data = _depth_data(root)
    return data, run_c08(root, data), run_c08(root, data, shuffled=True)


def test_c08_depth_classification(c08):
    data, real, ctrl = c08
    n_tr, n_te = len(data.manifest.select("TRAIN")), len(data.manifest.select("TEST"))
    acc, chance = real.run.accuracy, ctrl.run.accuracy
    secs = real.seconds + ctrl.seconds
    ok_ctrl = abs(chance - 0.20) <= 0.05
    ok = acc >= 0.95 and ok_ctrl and secs <= 1200
    record(8, "depth classification", ok,
           f"{n_tr} train / {n_te} test raw sensor images: accuracy {acc:.3f} (>= 0.95), shuffled-label control "
           f"{chance:.3f} (0.20 +/- 0.05), {secs / 60:.1f} min")
    assert ok_ctrl
    assert acc >= 0.95


# -- 10 ------------------------------------------------------------------------------

def test_c10_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    a = rng.random((24, 24))
    self_one = metrics.ssim(a, a) == 1.0
    const = abs(metrics.ssim(np.zeros((16, 16)), np.ones((16, 16))) - 1e-4 / (1 + 1e-4)) < 1e-9
    hand = (metrics.mae(a, a) == 0.0 and metrics.mae(np.zeros(4), np.ones(4)) == 1.0
            and metrics.mae(np.array([0.0, 0.5]), np.array([0.5, 1.0])) == 0.5)
    worst = max(abs(metrics.ssim(x, y) - ssim_direct(x, y))
                for x, y in (rng.random((2, 16, 16)) for _ in range(20)))
    dt = time.perf_counter() - t0
    ok = self_one and const and hand and worst < 1e-9 and dt < 60
    record(10, "metric oracles", ok, f"self-SSIM exact {self_one}, constant closed form {const}, MAE cases {hand}, "
                                     f"direct-oracle max deviation {worst:.1e}")
    assert ok


# -- 11 ------------------------------------------------------------------------------

def test_c11_determinism(c03, c06, c08, tmp_path_factory):
    again3 = run_c03(tmp_path_factory.mktemp("c03b"))[2]
    again6 = run_c06(tmp_path_factory.mktemp("c06b"))
    root8 = tmp_path_factory.mktemp("c08b")
    again8 = run_c08(root8)
    same = {
        "3 operator": again3 == c03[2],
        "6 weights": again6.weight_bytes == c06.weight_bytes,
        "6 report": again6.report_bytes == c06.report_bytes,
        "8 weights": again8.weight_bytes == c08[1].weight_bytes,
        "8 report": again8.report_bytes == c08[1].report_bytes,
    }
    ok = all(same.values())
    record(11, "determinism", ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
    assert ok
