"""Command-line entry point: ``cannulacam <command> [flags]``.

Exit codes: 0 success, 2 usage or bad values, 3 I/O, 4 file format or
missing weights, 5 split-guard violation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import imageio, metrics
from .config import ConfigError, RunConfig, write_kv
from .datagen import ALL_DEPTHS, FIXED, generate_dataset, load_dataset
from .linear_recon import CalibratedMatrix, SolverParams, calibrate, tikhonov_solve
from .nn.network import MissingWeightError, load_weights
from .optics import FormatError, build_operator, forward, load_operator
from .pipelines import experiments as ex
from .pipelines.nets import build_classifier_net, build_depth_net
from .pipelines.report import ExperimentReport, write_loss_curve
from .pipelines.training import TrainConfig, predict

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_GUARD = 0, 2, 3, 4, 5

KIND_FLAGS = {"glyphs": "GLYPHS", "squares": "SQUARES", "fov": "FOV_SQUARES", "idx": "IDX_IMPORT"}

log = logging.getLogger("cannulacam")


class UsageError(ValueError):
    pass


# -- run bookkeeping ---------------------------------------------------------------

class Run:
    """Owns ``run.cfg`` and ``run.log`` in a command's output directory."""

    def __init__(self, out_dir: Path, command: str, cfg: RunConfig, flags: dict):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        items = {"command": command}
        items.update({f"flag.{k}": v for k, v in sorted(flags.items()) if v is not None and k != "func"})
        items.update(cfg.echo())
        write_kv(self.dir / "run.cfg", items)
        self._log = open(self.dir / "run.log", "w")
        self.line(f"command {command}")

    def line(self, text: str) -> None:
        self._log.write(text + "\n")
        self._log.flush()
        log.info(text)

    def epoch_logger(self, tag: str):
        def on_epoch(epoch: int, loss: float) -> None:
            self.line(f"{tag} epoch {epoch} loss {loss!r}")
        return on_epoch

    def close(self) -> None:
        self._log.close()


def _cfg(args, **extra) -> RunConfig:
    overrides = {
        "epochs": getattr(args, "epochs", None), "lr": getattr(args, "lr", None),
        "seed": getattr(args, "seed", None), "batch_size": getattr(args, "batch_size", None),
        "workers": getattr(args, "workers", None),
    }
    overrides.update(extra)
    return RunConfig.layered(args.config, overrides)


def _train_cfg(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(cfg["epochs"], cfg["batch_size"], cfg["lr"], cfg["seed"], cfg["shuffle"])


def _parse_depths(text: str):
    if text == "all":
        return ALL_DEPTHS
    if text.startswith("fixed:"):
        try:
            return FIXED(int(text[6:]))
        except ValueError:
            pass
    raise UsageError(f"--depths must be 'all' or 'fixed:<i>', got {text!r}")


def _out_dir_of(path) -> Path:
    return Path(path).resolve().parent


# -- commands ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _cfg(args, channels=3 if args.color else None, test_fraction=args.test_fraction,
               n_classes=args.n_classes, square_px=args.square_px, field_px=args.field_px)
    policy = _parse_depths(args.depths)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    kind = KIND_FLAGS[args.kind]
    if kind == "IDX_IMPORT" and not args.idx:
        raise UsageError("--kind idx needs --idx FILE")
    if args.idx and not Path(args.idx).exists():
        raise FileNotFoundError(args.idx)
    optical = cfg.optical()
    out = Path(args.out)
    run = Run(out, "gen-data", cfg, vars(args))
    try:
        m = generate_dataset(kind, args.n, optical, policy, cfg.noise(), cfg["seed"], out,
                             test_fraction=cfg["test_fraction"], n_classes=cfg["n_classes"],
                             square_px=cfg["square_px"], field_px=cfg["field_px"], idx_path=args.idx,
                             idx_labels_path=args.idx_labels, workers=cfg["workers"])
    except FormatError:
        raise
    except ValueError as exc:
        raise UsageError(f"--kind {args.kind}: {exc}") from None
    run.line(f"samples {m.n_total} test {m.n_test}")
    run.close()
    print(f"wrote {m.n_total} samples ({m.n_test} TEST) to {out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _cfg(args)
    optical = cfg.optical()
    if not 0 <= args.depth < len(optical.depths_cm):
        raise UsageError(f"--depth {args.depth} outside [0, {len(optical.depths_cm) - 1}]")
    op = build_operator(optical, args.depth)
    run = Run(_out_dir_of(args.out), "calibrate", cfg, vars(args))
    cal = calibrate(lambda s: forward(op, s), optical.scene_shape, verify=args.verify)
    probed = cal.to_operator(args.depth, optical.seed, optical.digest())
    probed.save(args.out)
    err = float(np.max(np.abs(cal.matrix - op.matrix)))
    run.line(f"probed {cal.matrix.shape[1]} columns, max deviation from simulator {err!r}")
    run.close()
    print(f"operator {cal.matrix.shape[0]}x{cal.matrix.shape[1]} written to {args.out}")
    return EXIT_OK


def cmd_recon_linear(args) -> int:
    cfg = _cfg(args, **{"lambda": args.lam})
    op = load_operator(args.operator, args.scene_dims, args.sensor_dims)
    y = imageio.read_pnm(args.input)
    if y.shape[-2:] != op.sensor_shape:
        raise UsageError(f"--in image is {y.shape[-2]}x{y.shape[-1]}, operator expects "
                         f"{op.sensor_shape[0]}x{op.sensor_shape[1]}")
    run = Run(_out_dir_of(args.out), "recon-linear", cfg, vars(args))
    params = SolverParams(lam=cfg["lambda"], max_cg_iters=cfg["max_cg_iters"], cg_tol=cfg["cg_tol"])
    cm = CalibratedMatrix.from_operator(op)
    chans = []
    for c in range(y.shape[0]):
        res = tikhonov_solve(cm, y[c].ravel(), params)
        chans.append(res.clamped().reshape(op.scene_shape))
        run.line(f"channel {c} iterations {res.iterations} residual {res.residual!r} converged {res.converged}")
    rec = np.stack(chans)
    imageio.write_pnm(args.out, rec)
    print(f"wrote {args.out}")
    if args.truth:
        gt = imageio.read_pnm(args.truth)
        if gt.shape != rec.shape:
            raise UsageError(f"--truth image shape {gt.shape} differs from reconstruction {rec.shape}")
        mae, s = metrics.mae(rec, gt), metrics.ssim(rec, gt)
        run.line(f"mae {mae!r} ssim {s!r}")
        print(f"MAE {mae:.6f}")
        print(f"SSIM {s:.6f}")
    run.close()
    return EXIT_OK


def _net_hw(cfg: RunConfig) -> tuple[int, int]:
    return cfg["net_h"], cfg["net_w"]


def _write_report(rep: ExperimentReport, path, run: Run, **prov) -> None:
    rep.provenance.update({k: str(v) for k, v in prov.items()})
    rep.write(path)
    run.line(f"report {path}")


def cmd_train(args) -> int:
    cfg = _cfg(args)
    data = load_dataset(args.data)
    tc = _train_cfg(cfg)
    run = Run(_out_dir_of(args.out), "train", cfg, vars(args))
    on_epoch = run.epoch_logger(args.task)
    rows = data.manifest.select("TRAIN")
    if args.task == "recon":
        scenes, sensors = data.arrays(rows)
        res = ex.train_recon(scenes, sensors, tc, on_epoch)
    elif args.task == "depth":
        x, y = ex.depth_arrays(data, rows, _net_hw(cfg))
        spec = build_depth_net(*_net_hw(cfg), len(data.config.depths_cm), channels=x.shape[1])
        res = ex.train_network(spec, x, y, tc, on_epoch)
    else:
        domain = args.domain.upper()
        recon_w = load_weights(args.recon_weights) if args.recon_weights else None
        if domain == "RECON" and recon_w is None:
            raise UsageError("--domain recon needs --recon-weights")
        if any(r.label is None for r in rows):
            raise UsageError("classification needs labelled data")
        x = ex.classify_inputs(data, rows, domain, _net_hw(cfg), recon_w)
        y = np.array([r.label for r in rows])
        spec = build_classifier_net(*_net_hw(cfg), data.manifest.n_classes, channels=x.shape[1])
        res = ex.train_network(spec, x, y, tc, on_epoch)
    res.weights.save(args.out)
    write_loss_curve(_out_dir_of(args.out) / "losses.csv", res.epoch_losses)
    run.line(f"weights {args.out} digest {res.weights.digest()}")
    run.close()
    print(f"trained {args.task} for {tc.epochs} epochs, final loss {res.epoch_losses[-1]:.6f}")
    return EXIT_OK


def _eval_rows(data, split: str):
    rows = data.manifest.select(split.upper())
    ex.guard_test(rows)
    return rows


def cmd_eval(args) -> int:
    cfg = _cfg(args)
    data = load_dataset(args.data)
    weights = load_weights(args.weights)
    rows = _eval_rows(data, args.split)
    run = Run(_out_dir_of(args.report), "eval", cfg, vars(args))
    if args.task == "recon":
        baseline = ex.mean_train_image(data) if data.manifest.select("TRAIN") else None
        rep = ex.eval_recon(weights, data, rows, baseline)
    else:
        if args.task == "depth":
            x, y = ex.depth_arrays(data, rows, _net_hw(cfg))
            spec = build_depth_net(*_net_hw(cfg), len(data.config.depths_cm), channels=x.shape[1])
            k = len(data.config.depths_cm)
        else:
            domain = args.domain.upper()
            recon_w = load_weights(args.recon_weights) if args.recon_weights else None
            if domain == "RECON" and recon_w is None:
                raise UsageError("--domain recon needs --recon-weights")
            x = ex.classify_inputs(data, rows, domain, _net_hw(cfg), recon_w)
            y = np.array([r.label for r in rows])
            k = data.manifest.n_classes
            spec = build_classifier_net(*_net_hw(cfg), k, channels=x.shape[1])
        pred = predict(spec, weights, x).argmax(axis=1)
        runres = ex.ClassifierRun(metrics.accuracy(pred, y), metrics.confusion(pred, y, k), pred, y, None)
        rep = ex.classifier_report(runres, rows)
        rep.provenance.update({"weight_digest": weights.digest(), "dataset_digest": data.digest(),
                               "config_digest": f"{data.config.digest():016x}"})
    _write_report(rep, args.report, run)
    run.close()
    for k, v in rep.aggregates.items():
        if k.startswith("mean_") or k in ("accuracy", "beats_baseline_fraction"):
            print(f"{k} {v:.6f}")
    return EXIT_OK


def _datasets_under(root: Path):
    root = Path(root)
    if (root / "dataset.cfg").exists():
        return [load_dataset(root)]
    subs = sorted(p for p in root.iterdir() if (p / "dataset.cfg").exists())
    if not subs:
        raise FileNotFoundError(f"no dataset directories under {root}")
    return [load_dataset(p) for p in subs]


def cmd_sweep_depth(args) -> int:
    cfg = _cfg(args)
    weights = load_weights(args.weights)
    per_depth = {}
    for data in _datasets_under(args.data_root):
        for d, (dd, rows) in ex.split_by_depth(data, args.split.upper()).items():
            if d in per_depth:
                raise UsageError(f"depth index {d} appears in more than one dataset")
            ex.guard_test(rows)
            per_depth[d] = (dd, rows)
    run = Run(_out_dir_of(args.report), "sweep-depth", cfg, vars(args))
    res = ex.dof_sweep(weights, per_depth)
    _write_report(res.report, args.report, run)
    run.close()
    for d, s, m in zip(res.depths_cm, res.mean_ssim, res.mean_mae):
        print(f"depth {d:g} cm: SSIM {s:.4f} MAE {m:.4f}")
    print(f"best depth {res.depths_cm[res.argmax]:g} cm")
    return EXIT_OK


def cmd_resolution(args) -> int:
    cfg = _cfg(args)
    weights = load_weights(args.weights)
    by_size = {}
    for data in _datasets_under(args.data_root):
        size = int(data.meta.get("square_px", 0)) or _square_size(data)
        by_size[size] = (data, _eval_rows(data, args.split))
    run = Run(_out_dir_of(args.report), "resolution", cfg, vars(args))
    res = ex.resolution_experiment(weights, by_size, cfg["scene_cm"], cfg["distance_cm"], cfg["ssim_threshold"])
    rep = ExperimentReport()
    for size, s, m in zip(res.sizes_px, res.mean_ssim, res.mean_mae):
        rep.aggregates[f"size{size}_mean_ssim"] = s
        rep.aggregates[f"size{size}_mean_mae"] = m
    rep.aggregates["status"] = res.status
    if res.smallest_px is not None:
        rep.aggregates["smallest_px"] = res.smallest_px
        rep.aggregates["angle_deg"] = res.angle_deg
    _write_report(rep, args.report, run, weight_digest=weights.digest())
    run.close()
    print(res.status if res.smallest_px is None else
          f"smallest reliable square {res.smallest_px} px, {res.angle_deg:.3f} deg")
    return EXIT_OK


def _square_size(data) -> int:
    scene = data.image(data.rows[0].scene_path)
    return int(round(np.sqrt(np.count_nonzero(scene > 0.5))))


def cmd_fov(args) -> int:
    cfg = _cfg(args)
    weights = load_weights(args.weights)
    data = load_dataset(args.data)
    rows = _eval_rows(data, args.split)
    run = Run(_out_dir_of(args.report), "fov", cfg, vars(args))
    res = ex.fov_experiment(weights, data, rows, cfg["fov_scene_cm"], cfg["distance_cm"],
                            threshold=cfg["ssim_threshold"])
    rep = ExperimentReport()
    for b, (s, n) in enumerate(zip(res.bin_ssim, res.bin_counts)):
        rep.aggregates[f"bin{b}_outer_px"] = res.bin_edges_px[b + 1]
        rep.aggregates[f"bin{b}_count"] = n
        rep.aggregates[f"bin{b}_ssim"] = "empty" if s is None else s
    if res.fov_deg is None:
        rep.aggregates["status"] = "no radius passes threshold"
    else:
        rep.aggregates["radius_cm"] = res.radius_cm
        rep.aggregates["fov_deg"] = res.fov_deg
    _write_report(rep, args.report, run, weight_digest=weights.digest(), dataset_digest=data.digest())
    run.close()
    print("no radius passes threshold" if res.fov_deg is None else f"FOV {res.fov_deg:.2f} deg")
    return EXIT_OK


def cmd_classify(args) -> int:
    cfg = _cfg(args)
    data = load_dataset(args.data)
    tc = _train_cfg(cfg)
    domains = ["RAW", "RECON"] if args.domain == "both" else [args.domain.upper()]
    recon_w = load_weights(args.recon_weights) if args.recon_weights else None
    if "RECON" in domains and recon_w is None:
        raise UsageError("--domain recon needs --recon-weights")
    run = Run(_out_dir_of(args.report), "classify", cfg, vars(args))
    test_rows = data.manifest.select("TEST")
    rep = ExperimentReport()
    acc = {}
    for dom in domains:
        res = ex.train_eval_classify(data, dom, tc, _net_hw(cfg), recon_w, run.epoch_logger(dom.lower()))
        part = ex.classifier_report(res, test_rows, prefix=f"{dom.lower()}_")
        rep.rows.extend(part.rows)
        rep.aggregates.update(part.aggregates)
        rep.provenance[f"{dom.lower()}_weight_digest"] = res.train.weights.digest()
        acc[dom] = res.accuracy
        print(f"{dom} accuracy {res.accuracy:.4f}")
    if len(acc) == 2:
        diff = acc["RECON"] - acc["RAW"]
        rep.aggregates["difference_recon_minus_raw"] = diff
        print(f"difference RECON - RAW {diff:+.4f}")
        if diff < 0:
            print("WARNING: RAW outperformed RECON")
    _write_report(rep, args.report, run, dataset_digest=data.digest())
    run.close()
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def _dims(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cannulacam", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, train=False):
        sp.add_argument("--config", help="key=value file; flags override it")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        if train:
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--lr", type=float)
            sp.add_argument("--batch-size", type=int)

    g = sub.add_parser("gen-data", help="generate and render a dataset")
    common(g)
    g.add_argument("--kind", choices=sorted(KIND_FLAGS), required=True)
    g.add_argument("--n", type=int, required=True)
    col = g.add_mutually_exclusive_group()
    col.add_argument("--color", action="store_true")
    col.add_argument("--gray", action="store_true")
    g.add_argument("--depths", default="fixed:2")
    g.add_argument("--out", required=True)
    g.add_argument("--idx", help="IDX image file for --kind idx")
    g.add_argument("--idx-labels")
    g.add_argument("--test-fraction", type=float)
    g.add_argument("--n-classes", type=int)
    g.add_argument("--square-px", type=int)
    g.add_argument("--field-px", type=int)
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("calibrate", help="probe the simulator into an operator file")
    common(c)
    c.add_argument("--depth", type=int, required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--verify", action="store_true", help="also check superposition per column")
    c.set_defaults(func=cmd_calibrate)

    r = sub.add_parser("recon-linear", help="regularised inversion of one sensor image")
    common(r)
    r.add_argument("--operator", required=True)
    r.add_argument("--lambda", dest="lam", type=float)
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--truth", help="ground-truth scene; prints MAE and SSIM")
    r.add_argument("--scene-dims", type=_dims)
    r.add_argument("--sensor-dims", type=_dims)
    r.set_defaults(func=cmd_recon_linear)

    t = sub.add_parser("train", help="train a network")
    common(t, train=True)
    t.add_argument("--task", choices=["recon", "depth", "classify"], required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--domain", choices=["raw", "recon"], default="raw")
    t.add_argument("--recon-weights")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a network on the TEST split")
    common(e)
    e.add_argument("--task", choices=["recon", "depth", "classify"], required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--weights", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--domain", choices=["raw", "recon"], default="raw")
    e.add_argument("--recon-weights")
    e.add_argument("--split", choices=["test", "train"], default="test")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep-depth", help="depth-of-focus sweep of a reconstructor")
    common(s)
    s.add_argument("--weights", required=True)
    s.add_argument("--data-root", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--split", choices=["test", "train"], default="test")
    s.set_defaults(func=cmd_sweep_depth)

    rs = sub.add_parser("resolution", help="smallest reliably reconstructed square")
    common(rs)
    rs.add_argument("--weights", required=True)
    rs.add_argument("--data-root", required=True)
    rs.add_argument("--report", required=True)
    rs.add_argument("--split", choices=["test", "train"], default="test")
    rs.set_defaults(func=cmd_resolution)

    f = sub.add_parser("fov", help="reconstruction fidelity versus off-axis radius")
    common(f)
    f.add_argument("--weights", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--report", required=True)
    f.add_argument("--split", choices=["test", "train"], default="test")
    f.set_defaults(func=cmd_fov)

    k = sub.add_parser("classify", help="paired RAW and RECON classification")
    common(k, train=True)
    k.add_argument("--data", required=True)
    k.add_argument("--domain", choices=["raw", "recon", "both"], default="both")
    k.add_argument("--recon-weights")
    k.add_argument("--report", required=True)
    k.set_defaults(func=cmd_classify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ex.SplitGuardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GUARD
    except MissingWeightError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
