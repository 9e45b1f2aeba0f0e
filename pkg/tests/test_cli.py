import numpy as np
import pytest

from cannulacam import imageio
from cannulacam.cli import main
from cannulacam.config import ConfigError, RunConfig, read_kv
from cannulacam.nn.network import load_weights
from cannulacam.optics import load_operator
from cannulacam.pipelines.report import ExperimentReport

SMALL_CFG = "scene_h=16\nscene_w=16\nsensor_h=20\nsensor_w=20\nnet_h=16\nnet_w=16\n"
IDENT_CFG = "scene_h=16\nscene_w=16\nsensor_h=16\nsensor_w=16\nnet_h=16\nnet_w=16\nidentity_mode=true\nnoise=false\n"


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text("# desk check\n" + SMALL_CFG)
    return str(p)


@pytest.fixture
def ident(tmp_path):
    p = tmp_path / "ident.cfg"
    p.write_text(IDENT_CFG)
    return str(p)


# -- configuration ---------------------------------------------------------------------

def test_layering_precedence(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("epochs = 7  # file value\nlr=0.01\n")
    cfg = RunConfig.layered(p, {"epochs": "9", "seed": None})
    assert cfg["epochs"] == 9 and cfg["lr"] == 0.01 and cfg["seed"] == 1
    assert RunConfig.layered()["epochs"] == 30
    assert RunConfig.layered()["test_fraction"] == pytest.approx(1 / 11)


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("colour=red\n")
    with pytest.raises(ConfigError):
        RunConfig.layered(p)
    with pytest.raises(ConfigError):
        RunConfig.layered(None, {"bogus": 1})


def test_bad_line(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("just words\n")
    with pytest.raises(ConfigError):
        read_kv(p)


def test_unknown_config_key_exits_2(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("colour=red\n")
    assert main(["gen-data", "--config", str(p), "--kind", "glyphs", "--n", "5", "--out", str(tmp_path / "d")]) == 2


# -- gen-data ----------------------------------------------------------------------------

def test_gen_data_counts_and_echo(tmp_path, small):
    out = tmp_path / "d"
    assert main(["gen-data", "--config", small, "--kind", "glyphs", "--n", "220", "--gray", "--depths", "fixed:2",
                 "--seed", "1", "--out", str(out)]) == 0
    lines = (out / "manifest.csv").read_text().splitlines()[1:]
    assert len(lines) == 220 and sum(l.endswith(",TEST") for l in lines) == 20
    echo = read_kv(out / "run.cfg")
    assert echo["command"] == "gen-data" and echo["scene_h"] == "16" and echo["flag.seed"] == "1"
    assert (out / "run.log").exists()


def test_gen_data_is_byte_identical(tmp_path, small):
    args = ["gen-data", "--config", small, "--kind", "glyphs", "--n", "22", "--color", "--depths", "all",
            "--seed", "4", "--out"]
    assert main(args + [str(tmp_path / "a")]) == 0
    first = {p.relative_to(tmp_path / "a"): p.read_bytes() for p in (tmp_path / "a").rglob("*") if p.is_file()}
    assert main(args + [str(tmp_path / "a")]) == 0
    second = {p.relative_to(tmp_path / "a"): p.read_bytes() for p in (tmp_path / "a").rglob("*") if p.is_file()}
    assert first == second


def test_gen_data_flag_errors(tmp_path, capsys):
    assert main(["gen-data", "--kind", "squares", "--n", "100", "--square-px", "30", "--out", str(tmp_path)]) == 2
    assert "square" in capsys.readouterr().err
    assert main(["gen-data", "--kind", "glyphs", "--n", "5", "--depths", "some", "--out", str(tmp_path)]) == 2
    assert main(["gen-data", "--kind", "hexagons", "--n", "5", "--out", str(tmp_path)]) == 2
    assert main(["gen-data", "--kind", "idx", "--n", "5", "--idx", str(tmp_path / "none"),
                 "--out", str(tmp_path / "o")]) == 3


def test_gen_data_from_idx(tmp_path, small):
    import struct
    raw = bytes(range(0, 250, 2))[:4 * 16] * 3
    (tmp_path / "x.idx").write_bytes(struct.pack(">IIII", 0x803, 3, 8, 8) + raw[:192])
    assert main(["gen-data", "--config", small, "--kind", "idx", "--n", "3", "--idx", str(tmp_path / "x.idx"),
                 "--test-fraction", "0.34", "--out", str(tmp_path / "d")]) == 0
    bad = tmp_path / "bad.idx"
    bad.write_bytes(b"\x00\x00\x09\x03" + bytes(20))
    assert main(["gen-data", "--config", small, "--kind", "idx", "--n", "1", "--idx", str(bad),
                 "--out", str(tmp_path / "e")]) == 4


# -- calibrate / recon-linear --------------------------------------------------------------

def test_calibrate_identity_and_recon_linear(tmp_path, ident, capsys):
    op_path = tmp_path / "A.top1"
    assert main(["calibrate", "--config", ident, "--depth", "2", "--out", str(op_path)]) == 0
    assert np.array_equal(load_operator(op_path).matrix, np.eye(256))
    img = np.floor(np.random.default_rng(0).random((1, 16, 16)) * 255) / 255
    imageio.write_pnm(tmp_path / "y.pgm", img)
    assert main(["recon-linear", "--operator", str(op_path), "--lambda", "0", "--in", str(tmp_path / "y.pgm"),
                 "--truth", str(tmp_path / "y.pgm"), "--out", str(tmp_path / "rec.pgm")]) == 0
    out = capsys.readouterr().out
    assert "MAE 0.000000" in out and "SSIM 1.000000" in out
    assert np.array_equal(imageio.read_pnm(tmp_path / "rec.pgm"), img)


def test_recon_linear_errors(tmp_path, ident, capsys):
    op_path = tmp_path / "A.top1"
    main(["calibrate", "--config", ident, "--depth", "0", "--out", str(op_path)])
    imageio.write_pnm(tmp_path / "big.pgm", np.zeros((1, 20, 20)))
    assert main(["recon-linear", "--operator", str(op_path), "--in", str(tmp_path / "big.pgm"),
                 "--out", str(tmp_path / "r.pgm")]) == 2
    (tmp_path / "bad.top1").write_bytes(b"TOPX" + bytes(60))
    assert main(["recon-linear", "--operator", str(tmp_path / "bad.top1"), "--in", str(tmp_path / "big.pgm"),
                 "--out", str(tmp_path / "r.pgm")]) == 4
    assert "offset 0" in capsys.readouterr().err


# -- train / eval ----------------------------------------------------------------------------

@pytest.fixture
def trained(tmp_path, ident):
    data = tmp_path / "d"
    assert main(["gen-data", "--config", ident, "--kind", "glyphs", "--n", "44", "--seed", "1",
                 "--out", str(data)]) == 0
    w = tmp_path / "w" / "w.nnw"
    assert main(["train", "--config", ident, "--task", "recon", "--data", str(data), "--epochs", "2",
                 "--batch-size", "8", "--seed", "1", "--out", str(w)]) == 0
    return data, w


def test_train_eval_recon(tmp_path, ident, trained):
    data, w = trained
    log = (w.parent / "run.log").read_text()
    assert "recon epoch 1 loss" in log and "recon epoch 2 loss" in log
    assert read_kv(w.parent / "run.cfg")["epochs"] == "2"
    rep_path = tmp_path / "r" / "r.csv"
    assert main(["eval", "--config", ident, "--task", "recon", "--data", str(data), "--weights", str(w),
                 "--report", str(rep_path)]) == 0
    rep = ExperimentReport.read(rep_path)
    assert len(rep.values("ssim")) == 4 and len(rep.values("mae")) == 4
    assert "mean_ssim" in rep.aggregates and "weight_digest" in rep.provenance
    assert (rep_path.parent / "run.cfg").exists()


def test_eval_split_guard_and_missing_weights(tmp_path, ident, trained):
    data, w = trained
    args = ["eval", "--config", ident, "--task", "recon", "--data", str(data), "--report", str(tmp_path / "r.csv")]
    assert main(args + ["--weights", str(w), "--split", "train"]) == 5
    from cannulacam.nn.network import WeightStore
    ws = load_weights(w)
    part = WeightStore({k: v for k, v in ws.items() if not k.startswith("dec1")})
    part.save(tmp_path / "part.nnw")
    assert main(args + ["--weights", str(tmp_path / "part.nnw")]) == 4
    assert main(args + ["--weights", str(tmp_path / "missing.nnw")]) == 3


def test_training_is_reproducible(tmp_path, ident, trained):
    data, w = trained
    w2 = tmp_path / "w2" / "w.nnw"
    assert main(["train", "--config", ident, "--task", "recon", "--data", str(data), "--epochs", "2",
                 "--batch-size", "8", "--seed", "1", "--out", str(w2)]) == 0
    assert w.read_bytes() == w2.read_bytes()


def test_sweep_depth_and_classify(tmp_path, ident, trained):
    _, w = trained
    multi = tmp_path / "multi"
    assert main(["gen-data", "--config", ident, "--kind", "glyphs", "--n", "22", "--depths", "all",
                 "--out", str(multi)]) == 0
    assert main(["sweep-depth", "--weights", str(w), "--data-root", str(multi),
                 "--report", str(tmp_path / "dof.csv")]) == 0
    rep = ExperimentReport.read(tmp_path / "dof.csv")
    assert sum(k.endswith("_mean_ssim") for k in rep.aggregates) == 5
    assert "argmax_depth_cm" in rep.aggregates
    cls = tmp_path / "cls" / "c.csv"
    assert main(["classify", "--config", ident, "--data", str(multi), "--recon-weights", str(w), "--epochs", "1",
                 "--batch-size", "8", "--seed", "3", "--report", str(cls)]) == 0
    rep = ExperimentReport.read(cls)
    assert {"raw_accuracy", "recon_accuracy", "difference_recon_minus_raw"} <= set(rep.aggregates)
    assert rep.aggregates["difference_recon_minus_raw"] == pytest.approx(
        rep.aggregates["recon_accuracy"] - rep.aggregates["raw_accuracy"])
    assert main(["classify", "--config", ident, "--data", str(multi), "--domain", "recon",
                 "--report", str(cls)]) == 2


def test_depth_task_round_trip(tmp_path, ident):
    multi = tmp_path / "multi"
    main(["gen-data", "--config", ident, "--kind", "glyphs", "--n", "22", "--depths", "all", "--out", str(multi)])
    w = tmp_path / "wd" / "w.nnw"
    assert main(["train", "--config", ident, "--task", "depth", "--data", str(multi), "--epochs", "1",
                 "--out", str(w)]) == 0
    assert main(["eval", "--config", ident, "--task", "depth", "--data", str(multi), "--weights", str(w),
                 "--report", str(tmp_path / "e.csv")]) == 0
    rep = ExperimentReport.read(tmp_path / "e.csv")
    assert 0 <= rep.aggregates["accuracy"] <= 1
    assert sum(v for k, v in rep.aggregates.items() if k.startswith("confusion_")) == 10


def test_resolution_and_fov_commands(tmp_path, ident, trained):
    _, w = trained
    for s in (1, 2):
        assert main(["gen-data", "--config", ident, "--kind", "squares", "--square-px", str(s), "--field-px", "12",
                     "--n", "22", "--out", str(tmp_path / "res" / f"s{s}")]) == 0
    assert main(["resolution", "--config", ident, "--weights", str(w), "--data-root", str(tmp_path / "res"),
                 "--report", str(tmp_path / "res.csv")]) == 0
    assert "status" in ExperimentReport.read(tmp_path / "res.csv").aggregates
    assert main(["gen-data", "--config", ident, "--kind", "fov", "--n", "44", "--out", str(tmp_path / "fov")]) == 0
    assert main(["fov", "--config", ident, "--weights", str(w), "--data", str(tmp_path / "fov"),
                 "--report", str(tmp_path / "fov.csv")]) == 0
    agg = ExperimentReport.read(tmp_path / "fov.csv").aggregates
    assert any(k.endswith("_ssim") for k in agg)


def test_usage_errors():
    assert main([]) == 2
    assert main(["train", "--task", "recon"]) == 2
