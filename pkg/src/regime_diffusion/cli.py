"""Command line: collect, train, eval-model, eval-tracking, diagnose.

Every command writes its resolved configuration next to its outputs, emits
CSV tables carrying the configuration hash plus a JSON summary, and exits
with status 0 only when all of its monitors pass.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset as D
from . import evaluation as E
from . import pipeline as PL
from . import plotting
from .baselines import MODEL_NAMES, ZeroPredictor, load_model
from .config import ConfigError, RunConfig, load_config
from .controller import lyapunov_value
from .diffusion import validation_batch, validation_loss
from .nncore import CheckpointError, ContractViolation

log = logging.getLogger("regime_diffusion")


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Output helpers


def write_csv(path: Path, rows: list[dict], config_hash: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0]) + ["config_hash"] if rows else ["config_hash"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "config_hash": config_hash})
    return path


def write_summary(path: Path, summary: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=float))
    return path


def _monitor(name: str, ok: bool, detail="") -> dict:
    return {"name": name, "passed": bool(ok), "detail": detail}


def _finish(out: Path, cfg: RunConfig, summary: dict, monitors: list[dict]) -> int:
    summary["config_hash"] = cfg.hash()
    summary["monitors"] = monitors
    summary["passed"] = all(m["passed"] for m in monitors)
    write_summary(out / "summary.json", summary)
    for m in monitors:
        log.info("monitor %-40s %s %s", m["name"], "PASS" if m["passed"] else "FAIL", m["detail"])
    return 0 if summary["passed"] else 1


# ---------------------------------------------------------------------------
# Configuration resolution


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    d, m = cfg.dataset, cfg.model
    if getattr(args, "duration", None) is not None:
        d.duration = args.duration
    if getattr(args, "payload", None):
        d.payloads = list(args.payload)
    for key in ("steps", "batch", "lr"):
        if getattr(args, key, None) is not None:
            setattr(m, key, getattr(args, key))
    if getattr(args, "trials", None) is not None:
        cfg.evaluation.trials = args.trials
    return cfg


def _data_dir(args, cfg: RunConfig) -> Path:
    return Path(args.data) if getattr(args, "data", None) else Path(cfg.out) / "dataset"


def _models_dir(args, cfg: RunConfig) -> Path:
    return Path(args.models_dir) if getattr(args, "models_dir", None) else Path(cfg.out) / "models"


def _load_splits(args, cfg: RunConfig) -> PL.Splits:
    path = _data_dir(args, cfg)
    if not (path / "manifest.json").exists():
        raise CommandError(f"no dataset at {path}; run 'collect' first")
    _, episodes = D.load_dataset(path)
    return PL.make_splits(episodes, cfg)


def _load_models(names, args, cfg: RunConfig) -> dict:
    models = {}
    for name in names:
        if name == "asmc":
            models[name] = PL.predictor_for("asmc")
            continue
        path = _models_dir(args, cfg) / f"{name}.ckpt"
        if not path.exists():
            raise CommandError(f"missing checkpoint for {name}: {path}")
        models[name] = load_model(path)
    return models


# ---------------------------------------------------------------------------
# Commands


def cmd_collect(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    cfg.write(out)
    path = _data_dir(args, cfg)
    t0 = time.perf_counter()
    episodes = PL.collect(cfg, full=args.full, progress=lambda p, s: log.info("collected payload %.1f seed %d", p, s))
    try:
        manifest = PL.save_collected(path, episodes, cfg, full=args.full)
    except OSError as exc:
        raise CommandError(f"could not write dataset to {exc.filename or path}: {exc.strerror}") from exc
    records = sum(len(ep) for ep in episodes)
    monitors = [
        _monitor("episodes finite", all(np.all(np.isfinite(ep.H)) for ep in episodes)),
        _monitor("record count", records == sum(e["rows"] for e in manifest["episodes"]), f"{records} records"),
    ]
    summary = {
        "command": "collect",
        "records": records,
        "episodes": len(episodes),
        "manifest_hash": D.manifest_hash(path),
        "regime_inventory": manifest["regime_inventory"],
        "seconds": time.perf_counter() - t0,
    }
    print(f"collected {len(episodes)} episodes, {records} records -> {path}")
    return _finish(out / "collect", cfg, summary, monitors)


def cmd_train(args, cfg: RunConfig) -> int:
    name = "diffusion-nocond" if args.no_regime else args.model
    if name not in PL.LEARNED_MODELS:
        raise CommandError(f"{name} is not a trainable model")
    out = Path(cfg.out)
    cfg.write(out)
    splits = _load_splits(args, cfg)
    t0 = time.perf_counter()
    model, tlog = PL.train(
        name, splits, cfg, progress=lambda s, r: log.info("%s step %d train %.5f val %.5f", name, s, r[1], r[2])
    )
    mdir = _models_dir(args, cfg)
    mdir.mkdir(parents=True, exist_ok=True)
    model.save(mdir / f"{name}.ckpt", {"config_hash": cfg.hash()})
    rows = [{"step": s, "train_loss": tr, "val_loss": va} for s, tr, va in tlog.rows]
    write_csv(mdir / f"{name}_loss.csv", rows, cfg.hash())
    if rows:
        plotting.loss_curve(tlog.rows, mdir / f"{name}_loss.png", title=name)
    reloaded = load_model(mdir / f"{name}.ckpt")
    val_now = _val_loss(model, splits, cfg)
    val_re = _val_loss(reloaded, splits, cfg)
    initial = _val_loss(PL.build_model(name, splits.normalizer, cfg), splits, cfg)
    monitors = [
        _monitor("validation loss decreased", val_now < initial, f"{initial:.5f} -> {val_now:.5f}"),
        _monitor("checkpoint reload reproduces validation loss", val_now == val_re),
    ]
    summary = {
        "command": "train",
        "model": name,
        "steps": cfg.model.steps,
        "initial_val_loss": initial,
        "final_val_loss": val_now,
        "seconds": time.perf_counter() - t0,
    }
    print(f"trained {name}: validation loss {initial:.5f} -> {val_now:.5f}")
    return _finish(out / "train" / name, cfg, summary, monitors)


def _val_loss(model, splits: PL.Splits, cfg: RunConfig) -> float:
    segs = splits.val or splits.train
    if hasattr(model, "draw_noise"):
        return validation_loss(model, segs, cfg.seed, cfg.model.val_size)
    return float(model.loss(validation_batch(segs, cfg.model.val_size, cfg.seed + 1)).data)


def cmd_eval_model(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    cfg.write(out)
    names = [n for n in (args.model or PL.LEARNED_MODELS) if n != "asmc"]
    models = _load_models(names, args, cfg)
    episodes = PL.evaluation_episodes(cfg)
    models_all = {**models, "oracle": E.OraclePredictor(), "zero": ZeroPredictor()}
    rows = PL.model_validation(models_all, episodes, cfg)
    edir = out / "eval_model"
    write_csv(edir / "rmse_trials.csv", rows, cfg.hash())
    table, summary_rows = {}, []
    for name in models_all:
        table[name] = {}
        for g in E.CHANNEL_GROUPS:
            vals = [r[g] for r in rows if r["model"] == name]
            q25, q75 = E.iqr(vals)
            table[name][g] = float(np.median(vals))
            summary_rows.append({"model": name, "group": g, "median": np.median(vals), "q25": q25, "q75": q75})
    write_csv(edir / "rmse_summary.csv", summary_rows, cfg.hash())
    plotting.group_rmse_bars({k: v for k, v in table.items() if k != "oracle"}, edir / "rmse_groups.png")
    _print_table("per-group RMSE (median over trials)", table)

    truth_std = []
    for ep in episodes:
        segs = D.segment([ep], cfg.dataset.S, 1, cfg.dataset.L)
        H = np.stack([s.H[0] for s in segs])
        truth_std.append(np.sqrt(np.mean(H**2, axis=0)))
    zero_rows = [r for r in rows if r["model"] == "zero"]
    zero_ok = all(
        abs(r[f"H{c + 1}"] - truth_std[r["trial"]][c]) <= 1e-9 * max(1.0, truth_std[r["trial"]][c])
        for r in zero_rows
        for c in range(8)
    )
    monitors = [
        _monitor("oracle RMSE is zero", all(r[g] == 0.0 for r in rows if r["model"] == "oracle" for g in E.CHANNEL_GROUPS)),
        _monitor("zero predictor RMSE equals target root-mean-square", zero_ok),
        _monitor("all RMSE finite", all(np.isfinite(r[g]) for r in rows for g in E.CHANNEL_GROUPS)),
    ]
    claims = _ordering_claims(rows, ["proposed", "diffusion-nocond", "mlp"])
    if "proposed" in table and "diffusion-nocond" in table:
        ratios = {g: table["proposed"][g] / table["diffusion-nocond"][g] for g in E.CHANNEL_GROUPS}
        claims["median_ratio_proposed_vs_nocond"] = {g: {"ratio": r, "below_0.9": r < 0.9} for g, r in ratios.items()}
    summary = {"command": "eval-model", "table": table, "ordering": claims, "episodes": len(episodes)}
    return _finish(edir, cfg, summary, monitors)


def _ordering_claims(rows, order) -> dict:
    present = [m for m in order if any(r["model"] == m for r in rows)]
    out = {}
    for g in E.CHANNEL_GROUPS:
        pairs = []
        for a, b in zip(present, present[1:]):
            va = [r[g] for r in rows if r["model"] == a]
            vb = [r[g] for r in rows if r["model"] == b]
            pairs.append({"better": a, "worse": b, "iqr_separated": E.iqr_separated(va, vb)})
        out[g] = pairs
    return out


def _print_table(title: str, table: dict) -> None:
    cols = list(next(iter(table.values())))
    print(title)
    print(f"{'model':<18}" + "".join(f"{c:>14}" for c in cols))
    for name, vals in table.items():
        print(f"{name:<18}" + "".join(f"{vals[c]:>14.4f}" for c in cols))


def cmd_eval_tracking(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    cfg.write(out)
    names = args.model or list(MODEL_NAMES)
    models = _load_models(names, args, cfg)
    gains = cfg.gains()
    tdir = out / "eval_tracking"
    results = PL.tracking(
        models, cfg, progress=lambda p, v, n, r: log.info("cell %.1f kg %.1f m/s %s: %.4f m", p, v, n, r.position_rmse().mean())
    )
    rows, cells, failures = [], {}, {}
    lyap_ok = True
    for ((payload, speed), name), res in results.items():
        cell = f"{payload:.1f}kg_{speed:.1f}mps"
        rmse = res.position_rmse()
        chan = res.channel_rmse()
        lyap = res.lyapunov(gains, 0.02, cfg.evaluation.lyapunov_tol)
        for b, seed in enumerate(res.seeds):
            frac = lyap[b]["fraction"]
            lyap_ok &= frac >= 0.99
            rows.append(
                {
                    "cell": cell,
                    "payload": payload,
                    "speed": speed,
                    "model": name,
                    "seed": seed,
                    "position_rmse": float(rmse[b]),
                    **{f"e{c + 1}_rmse": float(chan[b, c]) for c in range(8)},
                    "sigma_hat_final": float(res.log.sigma_hat[-1, b]),
                    "sigma_m": float(res.sigma_m()[b]),
                    "lyapunov_fraction": frac,
                    "diverged": seed in res.diverged,
                }
            )
        cells.setdefault(cell, {})[name] = float(rmse.mean())
        if res.diverged:
            failures[f"{cell}/{name}"] = res.diverged
        _write_ticks(tdir / f"ticks_{cell}_{name}.csv", res, gains, cfg.hash())
    write_csv(tdir / "trials.csv", rows, cfg.hash())
    write_csv(tdir / "table.csv", [{"cell": c, **v} for c, v in cells.items()], cfg.hash())
    plotting.tracking_grid(cells, tdir / "position_rmse.png")
    first_cell = next(iter(cells))
    some = {n: results[(k, n)] for (k, n) in results if f"{k[0]:.1f}kg_{k[1]:.1f}mps" == first_cell}
    any_res = next(iter(some.values()))
    plotting.trajectories(
        any_res.log.chi_ref[:, :2], {n: r.log.chi[:, 0, :2] for n, r in some.items()}, tdir / f"xy_{first_cell}.png"
    )
    plotting.traces(any_res.log.t, {n: r.log.sigma_hat[:, 0] for n, r in some.items()}, tdir / f"sigma_hat_{first_cell}.png", "sigma_hat")
    _print_table("mean position RMSE [m] per cell", {n: {c: cells[c][n] for c in cells} for n in names})
    monitors = [
        _monitor("no divergence", not failures, f"{len(failures)} runs diverged"),
        _monitor("Lyapunov decrease condition at >= 99% of ticks", lyap_ok),
    ]
    summary = {"command": "eval-tracking", "cells": cells, "failures": failures, "trials": cfg.evaluation.trials}
    return _finish(tdir, cfg, summary, monitors)


def _write_ticks(path: Path, res, gains, config_hash: str) -> None:
    """Per-tick log of the first trial: t, e, s, sigma_hat, tau, H_hat, H, V."""
    lg = res.log
    V = lyapunov_value(lg.s[:, 0], lg.sigma_hat[:, 0], float(res.sigma_m()[0]), gains)
    rows = []
    for i in range(len(lg.t)):
        r = {"t": float(lg.t[i])}
        for key in ("e", "s", "tau", "H_hat", "H"):
            r.update({f"{key}{c + 1}": float(getattr(lg, key)[i, 0, c]) for c in range(8)})
        r["sigma_hat"] = float(lg.sigma_hat[i, 0])
        r["V"] = float(V[i])
        r["gated"] = bool(lg.gated[i])
        rows.append(r)
    write_csv(path, rows, config_hash)


def cmd_diagnose(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    cfg.write(out)
    names = [n for n in (args.model or ["proposed", "diffusion-nocond", "mlp"]) if n != "asmc"]
    models = _load_models(names, args, cfg)
    splits = _load_splits(args, cfg)
    segs = splits.test[:: max(1, args.every)]
    if len(segs) < 3:
        raise ContractViolation("diagnostics need at least three test segments")
    ddir = out / "diagnose"
    labels = [s.label for s in segs]
    truth = np.stack([s.H for s in segs])
    pca_rows, hist_rows, stats, hists = [], [], {}, {}
    for name, model in models.items():
        rng = np.random.default_rng(cfg.seed)
        if hasattr(model, "sample"):
            pred = E.sample_windows(model, segs, rng)
        else:
            pred = np.repeat(E.predict_segments(model, segs, rng)[:, None], truth.shape[1], axis=1)
        flat = model.normalizer.apply("resid", pred).reshape(len(segs), -1)
        proj, _, ratio = E.pca(flat)
        sep = E.separation_ratio(proj, labels) if len(set(labels)) > 1 else None
        stats[name] = {"explained_variance": ratio.tolist(), "separation_ratio": sep}
        pca_rows += [{"pc1": p[0], "pc2": p[1], "regime": lab, "model": name} for p, lab in zip(proj, labels)]
        edges, counts = E.error_histogram(pred[:, 0] - truth[:, 0])
        hists[name] = (edges, counts)
        hist_rows += [
            {"model": name, "bin_lo": lo, "bin_hi": hi, "count": int(c)} for lo, hi, c in zip(edges[:-1], edges[1:], counts)
        ]
        plotting.pca_scatter(proj, labels, ddir / f"pca_{name}.png", title=name)
    write_csv(ddir / "pca.csv", pca_rows, cfg.hash())
    write_csv(ddir / "error_histograms.csv", hist_rows, cfg.hash())
    plotting.histograms(hists, ddir / "error_histograms.png")
    for name, st in stats.items():
        sep = "n/a" if st["separation_ratio"] is None else f"{st['separation_ratio']:.3f}"
        print(f"{name:<18} separation {sep}  explained {np.round(st['explained_variance'], 3)}")
    monitors = [_monitor("PCA finite", all(np.all(np.isfinite(r["pc1"])) for r in pca_rows))]
    summary = {"command": "diagnose", "models": stats, "segments": len(segs)}
    if len(set(labels)) < 2:
        log.warning("test split holds a single regime; separation ratios are undefined")
    elif "proposed" in stats and "diffusion-nocond" in stats:
        r = stats["proposed"]["separation_ratio"] / stats["diffusion-nocond"]["separation_ratio"]
        summary["separation_claim"] = {"ratio": r, "above_1.5": r > 1.5}
    return _finish(ddir, cfg, summary, monitors)


COMMANDS = {
    "collect": cmd_collect,
    "train": cmd_train,
    "eval-model": cmd_eval_model,
    "eval-tracking": cmd_eval_tracking,
    "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="regime-diffusion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", parents=[common], help="fly randomized references and record a dataset")
    p.add_argument("--duration", type=float, help="seconds per episode")
    p.add_argument("--payload", type=float, action="append", help="payload level in kg (repeatable)")
    p.add_argument("--full", action="store_true", help="full-length protocol (5 minutes per episode)")
    p.add_argument("--data", help="dataset directory (default OUT/dataset)")

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--model", choices=PL.LEARNED_MODELS, default="proposed")
    p.add_argument("--no-regime", action="store_true", help="train the unconditioned ablation")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--data")
    p.add_argument("--models-dir")

    for name, helptext in (
        ("eval-model", "per-channel residual RMSE on the held-out payload level"),
        ("eval-tracking", "closed-loop tracking over the payload x speed grid"),
        ("diagnose", "PCA embedding and error histograms of predicted residuals"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--model", choices=MODEL_NAMES, action="append", help="model to include (repeatable)")
        p.add_argument("--data")
        p.add_argument("--models-dir")
        if name == "eval-tracking":
            p.add_argument("--trials", type=int)
        if name == "diagnose":
            p.add_argument("--every", type=int, default=5, help="use every n-th test segment")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, CommandError, CheckpointError, D.DatasetError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
