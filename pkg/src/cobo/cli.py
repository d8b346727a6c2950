"""Command line entry point: ``cobo run | ablate | analyze | bound``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import analysis, io, loop, seqvae, surrogate
from .config import ConfigError, RunConfig, apply_overrides, config_from_dict, config_to_dict, load_config

log = logging.getLogger("cobo")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

# (name, ablation overrides) -- the 2x2x2 regularizer grid with recoordination on, then recoordination off/on
ABLATION_VARIANTS: list[tuple[str, dict]] = [
    (f"lip{int(lip)}_z{int(z)}_w{int(w)}", {"use_lip": lip, "use_z": z, "use_weighting": w, "use_recoord": True})
    for lip in (True, False) for z in (True, False) for w in (True, False)
] + [
    ("full_norecoord", {"use_lip": True, "use_z": True, "use_weighting": True, "use_recoord": False}),
    ("full_recoord", {"use_lip": True, "use_z": True, "use_weighting": True, "use_recoord": True}),
]


def _setup_logging() -> None:
    level = os.environ.get("COBO_LOG_LEVEL", "info").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def _load(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.config:
        return load_config(args.config, overrides)
    return config_from_dict({}, overrides)


# --- run ------------------------------------------------------------------------

def execute_run(cfg: RunConfig, out: Path) -> loop.RunHistory:
    """One BO run writing history, traces, summary and per-retrain snapshots under ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    snaps = out / "snapshots"

    def snapshot(state: loop.BoState) -> None:
        write_snapshot(snaps / f"retrain_{state.retrain_count:03d}", state)

    try:
        history = loop.run_bo(cfg, on_retrain=snapshot)
    except Exception as exc:
        partial = getattr(exc, "history", None)
        if partial is not None:
            write_run_outputs(out, cfg, partial, complete=False)
        raise
    write_run_outputs(out, cfg, history)
    return history


def write_run_outputs(out: Path, cfg: RunConfig, h: loop.RunHistory, complete: bool = True) -> None:
    io.write_csv(out / "history.csv", h.rows, io.HISTORY_COLUMNS)
    io.write_csv(out / "loss_trace.csv", h.loss_trace, io.LOSS_TRACE_COLUMNS)
    io.write_csv(out / "correlation_trace.csv", h.correlation, io.CORRELATION_COLUMNS)
    io.write_json(out / "summary.json", {
        "schema_version": io.SCHEMA_VERSION,
        "complete": complete,
        "config": config_to_dict(cfg),
        "oracle_calls": len(h.rows),
        "best_x": h.best_x,
        "best_y": h.best_y,
        "best_raw": h.best_raw,
        "stopped_early": h.stopped_early,
        "events": h.events,
        "final_loss": h.loss_trace[-1] if h.loss_trace else None,
    })


def write_snapshot(path: Path, state: loop.BoState) -> None:
    path.mkdir(parents=True, exist_ok=True)
    seqvae.save_vae(state.vae, path / "vae.json")
    surrogate.save_gp(state.gp, path / "gp.json")
    d = state.data
    rows = [{"index": i, "x": " ".join(map(str, d.x[i])), "y": d.y[i], "y_raw": d.raw[i],
             **{f"z{j}": d.z[i, j] for j in range(d.latent_dim)}} for i in range(len(d))]
    io.write_csv(path / "dataset.csv", rows, ["index", "x", "y", "y_raw"] + [f"z{j}" for j in range(d.latent_dim)])
    io.write_json(path / "meta.json", {
        "schema_version": io.SCHEMA_VERSION,
        "retrain": state.retrain_count,
        "oracle_calls": state.oracle_calls,
        "top_k": state.cfg.top_k,
        "latent_dim": d.latent_dim,
        "tr_center": state.tr.center.tolist(),
        "tr_length": state.tr.length,
    })


def cmd_run(args) -> int:
    cfg = _load(args)
    execute_run(cfg, Path(args.out))
    log.info("run finished; outputs in %s", args.out)
    return EXIT_OK


# --- ablate ---------------------------------------------------------------------

def cmd_ablate(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    rows = []
    columns = ["variant", "seed", "use_lip", "use_z", "use_weighting", "use_recoord", "best_y", "best_raw",
               "oracle_calls"]
    try:
        for seed in seeds:
            for name, flags in ABLATION_VARIANTS:
                vcfg = replace(cfg, seed=seed, ablation=replace(cfg.ablation, **flags))
                h = loop.run_bo(vcfg)
                rows.append({"variant": name, "seed": seed, **flags, "best_y": h.best_y, "best_raw": h.best_raw,
                             "oracle_calls": len(h.rows)})
                log.info("ablation %s seed %d: best %.6g", name, seed, h.best_y)
    finally:
        io.write_csv(out / "ablation.csv", rows, columns)
        io.write_json(out / "ablation.json", {"schema_version": io.SCHEMA_VERSION, "config": config_to_dict(cfg),
                                              "seeds": seeds, "variants": [n for n, _ in ABLATION_VARIANTS],
                                              "complete": len(rows) == len(seeds) * len(ABLATION_VARIANTS)})
    return EXIT_OK


# --- analyze --------------------------------------------------------------------

def analyze_run(run_dir: Path, out: Path, max_pairs: int = 100_000) -> list[str]:
    """Correlation, latent-distance and PCA tables for every snapshot of ``run_dir``; returns written files."""
    snaps = sorted(p for p in (run_dir / "snapshots").glob("retrain_*") if (p / "dataset.csv").is_file())
    if not snaps:
        raise FileNotFoundError(f"no snapshots under {run_dir / 'snapshots'}")
    out.mkdir(parents=True, exist_ok=True)
    corr_rows, zdist_rows, written = [], [], []
    for snap in snaps:
        meta = io.read_json(snap / "meta.json")
        table = io.read_csv(snap / "dataset.csv")
        y = np.array([float(r["y"]) for r in table])
        z = np.array([[float(r[f"z{j}"]) for j in range(meta["latent_dim"])] for r in table])
        idx = loop.topk_indices(y, meta["top_k"])
        zk, yk = z[idx], y[idx]
        tag = {"retrain": meta["retrain"], "oracle_calls": meta["oracle_calls"]}
        if len(yk) >= 3:
            st = analysis.pairwise_stats(zk, yk, max_pairs, np.random.default_rng([meta["retrain"], 2]))
            corr_rows.append({**tag, **st.row()})
            zdist_rows.append({**tag, **analysis.zdist_summary(zk)})
            pca = analysis.pca2d(zk)
            name = f"pca_{meta['retrain']:03d}.csv"
            io.write_csv(out / name, [{"rank": i, "pc1": p[0], "pc2": p[1], "y": yk[i]}
                                      for i, p in enumerate(pca.points)], ["rank", "pc1", "pc2", "y"])
            written.append(name)
    io.write_csv(out / "correlation.csv", corr_rows, ["retrain", "oracle_calls", "mu_dz", "var_dz", "mu_dy",
                                                      "var_dy", "pearson", "n_pairs"])
    io.write_csv(out / "zdist.csv", zdist_rows, ["retrain", "oracle_calls", "p10", "q1", "median", "q3", "p90"])
    written = ["correlation.csv", "zdist.csv"] + written
    (out / "plots.py").write_text(plot_script(written))
    return written + ["plots.py"]


def plot_script(files: list[str]) -> str:
    pcas = [f for f in files if f.startswith("pca_")]
    return f'''"""Figures from the analysis tables in this directory (requires matplotlib)."""
import csv
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

HERE = Path(__file__).resolve().parent
PCA_FILES = {pcas!r}


def read(name):
    with open(HERE / name, newline="") as fh:
        return list(csv.DictReader(fh))


def col(rows, key):
    return [float(r[key]) if r[key] not in ("", "nan") else float("nan") for r in rows]


corr = read("correlation.csv")
fig, ax = plt.subplots(figsize=(5, 3.5))
ax.plot(col(corr, "oracle_calls"), col(corr, "pearson"), marker="o")
ax.set_xlabel("oracle calls")
ax.set_ylabel("Pearson corr(latent dist, objective dist)")
fig.tight_layout()
fig.savefig(HERE / "correlation.png", dpi=150)

zd = read("zdist.csv")
fig, ax = plt.subplots(figsize=(5, 3.5))
x = col(zd, "oracle_calls")
ax.fill_between(x, col(zd, "p10"), col(zd, "p90"), alpha=0.2)
ax.fill_between(x, col(zd, "q1"), col(zd, "q3"), alpha=0.4)
ax.plot(x, col(zd, "median"))
ax.set_xlabel("oracle calls")
ax.set_ylabel("pairwise latent distance")
fig.tight_layout()
fig.savefig(HERE / "zdist.png", dpi=150)

for name in PCA_FILES:
    rows = read(name)
    fig, ax = plt.subplots(figsize=(4, 4))
    sc = ax.scatter(col(rows, "pc1"), col(rows, "pc2"), c=col(rows, "y"), cmap="viridis", s=18)
    fig.colorbar(sc, ax=ax, label="objective")
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    fig.tight_layout()
    fig.savefig(HERE / name.replace(".csv", ".png"), dpi=150)
'''


def cmd_analyze(args) -> int:
    run_dir = Path(args.run_dir)
    out = Path(args.out) if args.out else run_dir / "analysis"
    try:
        files = analyze_run(run_dir, out)
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    log.info("wrote %s", ", ".join(files))
    return EXIT_OK


# --- bound ----------------------------------------------------------------------

def bound_config(args) -> analysis.BoundConfig:
    data: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        data = yaml.safe_load(path.read_text()) or {}
    data = apply_overrides(data, list(args.set or []))
    if args.seed is not None:
        data["seed"] = args.seed
    if "families" in data and data["families"] is None:
        data["families"] = []
    allowed = set(analysis.BoundConfig.__dataclass_fields__)
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown config key: {key}")
    for fam in data.get("families", []):
        if fam not in analysis.FAMILIES:
            raise ConfigError(f"families: unknown family {fam!r}")
    return analysis.BoundConfig(**data)


def cmd_bound(args) -> int:
    cfg = bound_config(args)
    report = analysis.bound_experiment(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_csv(out / "bound_report.csv", report.rows, ["family", "trial", "L", "mu_dz", "var_dz", "mu_dy", "var_dy",
                                                         "pearson", "n_pairs", "bound", "satisfied"])
    for fam, s in report.by_family().items():
        print(f"{fam}: {s['satisfied']}/{s['trials']} satisfied, max |pearson - bound| = {s['max_gap']:.4f}")
    print(f"{'PASS' if report.passed else 'FAIL'}: {sum(r['satisfied'] for r in report.rows)}/{len(report.rows)} "
          f"trials satisfy the bound (eps={cfg.eps})")
    return EXIT_OK if report.passed else EXIT_CONFIG


# --- entry ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cobo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override (repeatable)")

    common(sub.add_parser("run", help="one optimization run"), "runs/latest")
    p = sub.add_parser("ablate", help="regularizer and recoordination ablation grid")
    common(p, "runs/ablation")
    p.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds starting at the config seed")
    p = sub.add_parser("analyze", help="correlation / latent-distance / PCA tables from a run's snapshots")
    p.add_argument("run_dir")
    p.add_argument("--out", help="output directory (default RUN_DIR/analysis)")
    common(sub.add_parser("bound", help="Monte Carlo check of the correlation lower bound"), "runs/bound")
    return parser


COMMANDS = {"run": cmd_run, "ablate": cmd_ablate, "analyze": cmd_analyze, "bound": cmd_bound}


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        log.error("interrupted; partial outputs flushed")
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 2
        log.error("runtime failure: %s: %s", type(exc).__name__, exc)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
