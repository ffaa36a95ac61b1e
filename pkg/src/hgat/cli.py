"""Command-line entry point: ``hgat {simulate,train,evaluate,ablate,gradcheck,forecast}``.

Exit codes: 0 on success, 1 for user or configuration errors, 2 for internal
failures.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import statistics
import sys
import traceback
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .baselines import MODEL_KINDS, make_forecaster, model_config_for
from .config import RunConfig, load_config
from .dataset import Prepared, format_timestamp, load_frame, prepare
from .errors import UsageError, UserError
from .graph import load_graph_spec
from .model import ModelConfig
from .plantsim import simulate
from .training import (
    Checkpoint,
    TrainingAborted,
    atomic_write_text,
    data_fingerprint,
    dump_json,
    evaluate,
    fit,
    load_checkpoint,
    save_checkpoint,
    target_nodes,
)

log = logging.getLogger("hgat")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hgat", description="Heterogeneous graph attention forecasting of plant telemetry.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", type=Path, help="INI run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")
        if out:
            sp.add_argument("--out-dir", type=Path, help="output directory (overrides run.out_dir)")

    s = sub.add_parser("simulate", help="write synthetic telemetry CSV and graph spec")
    common(s)
    s.add_argument("--seed", type=int)
    s.add_argument("--coupling-gain", type=float)

    t = sub.add_parser("train", help="train one model and save its checkpoint")
    common(t)
    t.add_argument("--model", choices=MODEL_KINDS)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)

    e = sub.add_parser("evaluate", help="metrics, per-node table and forecast CSV for a split")
    common(e)
    e.add_argument("--checkpoint", type=Path, help="checkpoint written by train")
    e.add_argument("--model", choices=MODEL_KINDS, help="only for persistence (no checkpoint)")
    e.add_argument("--split", choices=("train", "val", "test"), default="test")

    a = sub.add_parser("ablate", help="train and compare several model kinds over seeds")
    common(a)
    a.add_argument("--kinds", help="comma separated model kinds")
    a.add_argument("--seeds", help="comma separated seeds")
    a.add_argument("--epochs", type=int)

    g = sub.add_parser("gradcheck", help="finite-difference check of every autodiff op")
    g.add_argument("--out-dir", type=Path)

    f = sub.add_parser("forecast", help="write forecasts of a checkpoint for a split")
    common(f)
    f.add_argument("--checkpoint", type=Path)
    f.add_argument("--model", choices=MODEL_KINDS)
    f.add_argument("--split", choices=("train", "val", "test"), default="test")
    return p


def main(argv: Optional[list[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        where = f" ({exc.filename})" if getattr(exc, "filename", None) else ""
        print(f"error: {exc.strerror or exc}{where}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return 2


# ---------------------------------------------------------------- helpers


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None), getattr(args, "set", []))
    if getattr(args, "out_dir", None) is not None:
        cfg.run.out_dir = str(args.out_dir.resolve())
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_prepared(cfg: RunConfig, scalers=None) -> Prepared:
    graph = load_graph_spec(cfg.data.graph)
    frame = load_frame(cfg.data.csv, graph, cfg.data.sampling_periods() or None)
    return prepare(frame, graph, cfg.data.w, cfg.data.h, cfg.data.fractions, cfg.data.center_diffs, scalers)


def _seeded(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, model=replace(cfg.model, seed=seed), train=replace(cfg.train, seed=seed))


def _effective_model_cfg(kind: str, base: ModelConfig) -> ModelConfig:
    if kind in ("persistence", "gru_signal"):
        return base
    return model_config_for(kind, base)


def _train_one(kind: str, cfg: RunConfig, prepared: Prepared, out: Optional[Path], progress=None):
    """Fit one forecaster; returns (forecaster, fit result or None, header)."""
    mcfg = _effective_model_cfg(kind, cfg.model)
    model = make_forecaster(kind, prepared, mcfg)
    header = {
        "kind": kind,
        "model": asdict(mcfg),
        "train": asdict(cfg.train),
        "data_fingerprint": data_fingerprint(prepared, cfg.data.fractions),
    }
    if not model.trainable:
        return model, None, header
    ckpt_path = out / "checkpoint.npz" if out else None

    def on_best(epoch, score):
        if ckpt_path is not None:
            save_checkpoint(ckpt_path, model.state_dict(), prepared.scalers,
                            dict(header, best_epoch=epoch, best_score=score))

    history = out / "history.csv" if out else None
    try:
        result = fit(model, prepared, cfg.train, history, on_best, progress)
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}; last good checkpoint kept", file=sys.stderr)
        raise
    header.update(best_epoch=result.best_epoch, best_score=result.best_score)
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, result.best_state, prepared.scalers, header)
    return model, result, header


def _restore(args, cfg: RunConfig):
    """Forecaster and prepared data for evaluate/forecast."""
    if args.checkpoint is None:
        if args.model != "persistence":
            raise UsageError("--checkpoint is required (only --model persistence runs without one)")
        prepared = _load_prepared(cfg)
        return make_forecaster("persistence", prepared), prepared, {"kind": "persistence"}
    ck: Checkpoint = load_checkpoint(args.checkpoint)
    prepared = _load_prepared(cfg, ck.scalers)
    fp = data_fingerprint(prepared, cfg.data.fractions)
    if fp != ck.fingerprint:
        raise UsageError(f"checkpoint fingerprint {ck.fingerprint} does not match data fingerprint {fp}")
    kind = ck.header["kind"]
    model = make_forecaster(kind, prepared, ModelConfig(**ck.header["model"]))
    model.load_state_dict(ck.state)
    return model, prepared, ck.header


def _forecast_rows(model, prepared: Prepared, split: str):
    ws = prepared.split(split)
    idx = np.arange(len(ws))
    pred = model.predict(ws, idx, prepared.scalers)
    truth = ws.truth_raw(idx)
    times = ws.forecast_times(idx)
    return ws, pred, truth, times


def _write_forecast_csv(path: Path, names, pred, truth, times) -> None:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["timestamp", "channel", "truth", "prediction", "horizon_step"])
    N, h, d = pred.shape
    for i in range(N):
        for k in range(h):
            ts = format_timestamp(times[i, k])
            for j in range(d):
                wr.writerow([ts, names[j], repr(float(truth[i, k, j])), repr(float(pred[i, k, j])), k + 1])
    atomic_write_text(path, buf.getvalue())


def _write_node_csv(path: Path, metrics: dict) -> None:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    cols = ("overall", "P", "Q", "U", "I")
    wr.writerow(["node", "metric", *cols])
    for metric in ("NRMSE", "NMAE"):
        for node, block in metrics[metric]["nodes"].items():
            wr.writerow([node, metric, *("" if block[c] is None else repr(block[c]) for c in cols)])
    atomic_write_text(path, buf.getvalue())


def _figures_enabled() -> bool:
    try:
        import matplotlib  # noqa: F401
    except ImportError:  # pragma: no cover
        return False
    return True


def _render_forecast(out: Path, split: str, prepared: Prepared, pred, truth, times) -> None:
    if not _figures_enabled():
        return
    from .plotting import plot_forecast

    plot_forecast(times[:, 0], truth[:, 0, :], pred[:, 0, :], prepared.target_names, out / f"forecast_{split}.png")


# --------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.simulate.seed = args.seed
    if args.coupling_gain is not None:
        cfg.simulate.coupling_gain = args.coupling_gain
    cfg.simulate.validate()
    out = _out_dir(cfg)
    res = simulate(cfg.simulate)
    csv_path, spec_path = res.write(out)
    cfg.data.csv, cfg.data.graph = str(csv_path.resolve()), str(spec_path.resolve())
    cfg.save(out / "config.ini")
    print(f"wrote {csv_path} ({len(res.timestamps)} rows, {len(res.columns)} channels) and {spec_path}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.model:
        cfg.run.kind = args.model
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.seed is not None:
        cfg = _seeded(cfg, args.seed)
    cfg.validate()
    out = _out_dir(cfg)
    cfg.save(out / "config.ini")
    prepared = _load_prepared(cfg)
    prepared.scalers.save(out / "scalers.txt")

    def progress(row):
        print(f"epoch {row['epoch']:3d}  train_loss {row['train_loss']:.6f}  val_nrmse {row['val_nrmse']:.6f}",
              flush=True)

    model, result, header = _train_one(cfg.run.kind, cfg, prepared, out, progress)
    metrics = evaluate(model, prepared, "val")
    metrics["model"] = cfg.run.kind
    if result is not None:
        metrics["training"] = {
            "best_epoch": result.best_epoch,
            "best_val_nrmse": result.best_score,
            "initial_val_nrmse": result.initial_val_nrmse,
            "initial_train_loss": result.initial_train_loss,
            "final_train_loss": result.final_train_loss,
            "epochs_run": len(result.history),
        }
        if _figures_enabled():
            from .plotting import plot_history

            plot_history(result.history, out / "history.png")
    atomic_write_text(out / "metrics_val.json", dump_json(metrics))
    print(f"{cfg.run.kind}: val NRMSE {metrics['NRMSE']['overall']:.6f}  NMAE {metrics['NMAE']['overall']:.6f}")
    if result is not None:
        print(f"best epoch {result.best_epoch}; checkpoint {out / 'checkpoint.npz'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    model, prepared, header = _restore(args, cfg)
    out = _out_dir(cfg)
    metrics = evaluate(model, prepared, args.split)
    metrics["model"] = header["kind"]
    ws, pred, truth, times = _forecast_rows(model, prepared, args.split)
    atomic_write_text(out / f"metrics_{args.split}.json", dump_json(metrics))
    _write_node_csv(out / f"nodes_{args.split}.csv", metrics)
    _write_forecast_csv(out / f"forecast_{args.split}.csv", prepared.target_names, pred, truth, times)
    _render_forecast(out, args.split, prepared, pred, truth, times)
    cfg.save(out / "config.ini")
    print(f"{header['kind']} on {args.split}: NRMSE {metrics['NRMSE']['overall']:.6f} "
          f"NMAE {metrics['NMAE']['overall']:.6f} (x100: {metrics['x100']['NRMSE']['overall']:.3f})")
    return 0


def cmd_forecast(args) -> int:
    cfg = _config(args)
    model, prepared, header = _restore(args, cfg)
    out = _out_dir(cfg)
    ws, pred, truth, times = _forecast_rows(model, prepared, args.split)
    path = out / f"forecast_{args.split}.csv"
    _write_forecast_csv(path, prepared.target_names, pred, truth, times)
    _render_forecast(out, args.split, prepared, pred, truth, times)
    print(f"wrote {path} ({pred.shape[0]} origins, h={pred.shape[1]}, {pred.shape[2]} channels)")
    return 0


ABLATION_COLUMNS = ("model", "n_seeds", "NRMSE_mean", "NRMSE_std", "NMAE_mean", "NMAE_std",
                    "P_NRMSE", "Q_NRMSE", "U_NRMSE", "I_NRMSE", "failures")


def run_ablation(cfg: RunConfig, kinds: list[str], seeds: list[int], out: Optional[Path] = None,
                 prepared: Optional[Prepared] = None) -> tuple[list[dict], list[dict]]:
    """Train and test every kind for every seed; failures are recorded, not raised."""
    prepared = prepared or _load_prepared(cfg)
    runs: list[dict] = []
    for kind in kinds:
        for seed in seeds:
            run_cfg = _seeded(cfg, seed)
            try:
                model, _, _ = _train_one(kind, run_cfg, prepared, None)
                m = evaluate(model, prepared, "test")
                runs.append({"model": kind, "seed": seed, "ok": True,
                             "NRMSE": m["NRMSE"]["overall"], "NMAE": m["NMAE"]["overall"],
                             **{f"{f}_NRMSE": m["NRMSE"][f] for f in "PQUI"}})
            except Exception as exc:  # noqa: BLE001
                log.error("%s seed %s failed: %s", kind, seed, exc)
                runs.append({"model": kind, "seed": seed, "ok": False, "error": str(exc)})
            if kind == "persistence":
                break  # deterministic: one evaluation stands for all seeds
    table = summarize_runs(runs, kinds)
    if out is not None:
        _write_ablation(out, runs, table)
    return runs, table


def summarize_runs(runs: list[dict], kinds: list[str]) -> list[dict]:
    table = []
    for kind in kinds:
        ok = [r for r in runs if r["model"] == kind and r["ok"]]
        row = {"model": kind, "n_seeds": len(ok),
               "failures": sum(1 for r in runs if r["model"] == kind and not r["ok"])}
        for metric in ("NRMSE", "NMAE"):
            vals = [100.0 * r[metric] for r in ok]
            row[f"{metric}_mean"] = statistics.fmean(vals) if vals else None
            row[f"{metric}_std"] = statistics.stdev(vals) if len(vals) > 1 else None
            row[f"{metric}_median"] = statistics.median(vals) if vals else None
        for f in "PQUI":
            vals = [100.0 * r[f"{f}_NRMSE"] for r in ok if r[f"{f}_NRMSE"] is not None]
            row[f"{f}_NRMSE"] = statistics.fmean(vals) if vals else None
        table.append(row)
    return table


def render_table(table: list[dict]) -> str:
    def fmt(v):
        if v is None:
            return "-"
        return f"{v:.3f}" if isinstance(v, float) else str(v)

    lines = ["values x100; mean +- std over seeds",
             f"{'model':<12} {'seeds':>5} {'NRMSE':>16} {'NMAE':>16} {'P':>7} {'Q':>7} {'U':>7} {'I':>7}"]
    for r in table:
        nr = f"{fmt(r['NRMSE_mean'])} +- {fmt(r['NRMSE_std'])}"
        na = f"{fmt(r['NMAE_mean'])} +- {fmt(r['NMAE_std'])}"
        lines.append(f"{r['model']:<12} {r['n_seeds']:>5} {nr:>16} {na:>16} "
                     + " ".join(f"{fmt(r[f + '_NRMSE']):>7}" for f in "PQUI"))
    return "\n".join(lines) + "\n"


def _write_ablation(out: Path, runs: list[dict], table: list[dict]) -> None:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=list(ABLATION_COLUMNS), extrasaction="ignore", lineterminator="\n")
    wr.writeheader()
    for row in table:
        wr.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    atomic_write_text(out / "ablation.csv", buf.getvalue())
    buf = io.StringIO()
    fields = ["model", "seed", "ok", "NRMSE", "NMAE", "P_NRMSE", "Q_NRMSE", "U_NRMSE", "I_NRMSE", "error"]
    wr = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
    wr.writeheader()
    for r in runs:
        wr.writerow(r)
    atomic_write_text(out / "ablation_runs.csv", buf.getvalue())
    atomic_write_text(out / "ablation.txt", render_table(table))
    if _figures_enabled() and any(r["n_seeds"] for r in table):
        from .plotting import plot_ablation

        plot_ablation([r for r in table if r["n_seeds"]], out / "ablation.png")


def cmd_ablate(args) -> int:
    cfg = _config(args)
    if args.kinds:
        cfg.ablate.kinds = args.kinds
    if args.seeds:
        cfg.ablate.seeds = args.seeds
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    kinds = cfg.ablate.kind_list()
    for k in kinds:
        if k not in MODEL_KINDS:
            raise UsageError(f"unknown model kind {k!r}; choose from {', '.join(MODEL_KINDS)}")
    seeds = cfg.ablate.seed_list()
    if not seeds:
        raise UsageError("at least one seed is required")
    cfg.validate()
    out = _out_dir(cfg)
    cfg.save(out / "config.ini")
    _, table = run_ablation(cfg, kinds, seeds, out)
    print(render_table(table), end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    results, elapsed = run_all()
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<18} max_rel_error={r.max_rel_error:.3e} "
             f"(tol {r.tolerance:g})" for r in results]
    lines.append(f"{sum(r.passed for r in results)}/{len(results)} passed in {elapsed:.1f} s")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out_dir is not None:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_text(args.out_dir / "gradcheck.txt", text)
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "forecast": cmd_forecast,
}


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
