"""Command-line entry point: gen-data, train, eval, sweep, verify.

Exit codes: 0 success, 1 runtime or data failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import data as datamod
from .attack import AttackConfig
from .config import SECTIONS, RunConfig, load_config
from .evaluation import EvaluationError, check_theorem_bounds, evaluate, export_projection
from .nn import CheckpointError, load_checkpoint
from .training import ConfigError, TrainingDivergence, train

logger = logging.getLogger("arprl")

SWEEP_FIELDS = ["alpha", "beta", "seed", "test_acc", "robust_acc", "infer_acc", "gap", "advantage"]
METRICS = SWEEP_FIELDS[3:]


# ---- helpers -----------------------------------------------------------------------

def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        if section not in SECTIONS:
            raise ConfigError(f"unknown section {section!r} in --set {item!r}")
        cfg.set(section, name, value)
    cfg.validate()
    return cfg


def _float_list(text: str, flag: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{flag}: expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise ConfigError(f"{flag}: empty list")
    return vals


def load_data(path: str | None, cfg: RunConfig) -> datamod.Dataset:
    """Cache files load as-is; CSV files go through the tabular schema; no path generates."""
    d = cfg.data
    if not path:
        if d.kind == "circles":
            return datamod.gen_circles(d.n, d.seed)
        raise ConfigError("tabular runs need --data or data.path")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"data file not found: {p}")
    with p.open(encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
    if first == datamod.DATA_HEADER:
        return datamod.load_dataset(p)
    cats = datamod.infer_categorical(p, d.delimiter, exclude=(d.label, d.attribute))
    schema = datamod.TabularSchema(d.label, d.attribute, cats, d.delimiter)
    return datamod.load_tabular(p, schema, seed=d.seed)


def derive_seed(base: int, alpha: float, beta: float, index: int) -> int:
    ss = np.random.SeedSequence([base, int(round(alpha * 1e6)), int(round(beta * 1e6)), index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_rows(path: Path, fields: list[str], rows: list[dict]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in fields])


# ---- commands ------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cfg = RunConfig()
    cfg.data.kind, cfg.data.seed = args.kind, args.seed
    cfg.data.n = args.n if args.n is not None else (5000 if args.kind == "circles" else 10000)
    cfg.validate()
    cfg.write(out.with_name(out.name + ".resolved.ini"))
    if args.kind == "circles":
        ds = datamod.gen_circles(cfg.data.n, cfg.data.seed)
    else:
        raw = out.with_suffix(".csv")
        datamod.write_csv(datamod.gen_adult_like(cfg.data.n, cfg.data.seed), raw)
        ds = datamod.load_tabular(raw, datamod.adult_schema(cfg.data.attribute), seed=cfg.data.seed)
    datamod.save_dataset(ds, out)
    print(f"wrote {len(ds.x)} rows x {ds.dim} features to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "resolved.ini")
    ds = load_data(args.data or cfg.data.path, cfg)
    _, log = train(ds, cfg.train, kind=cfg.model.kind or None, out_dir=out)
    from .plotting import plot_training_log
    plot_training_log(log, out / "train_log.png")
    last = log[-1]
    print(f"trained {len(log)} epochs: L1={last['L1']:.4f} L2={last['L2']:.4f} L3={last['L3']:.4f}; "
          f"checkpoint {out / 'final.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    if args.attack_eps is not None:
        try:
            cfg.attack = AttackConfig(args.attack_eps, cfg.attack.steps, cfg.attack.step_fraction,
                                      cfg.attack.objective)
        except ValueError as e:
            raise ConfigError(f"--attack-eps: {e}") from e
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    cfg.write(report.with_name(report.stem + ".resolved.ini"))
    bundle = load_checkpoint(args.checkpoint)
    ds = load_data(args.data or cfg.data.path, cfg)
    seed = int(bundle.config.get("seed", cfg.eval.seed)) if bundle.config else cfg.eval.seed
    ev = evaluate(bundle, ds, cfg.attack, seed=seed)
    m = ev.metrics
    _write_rows(report, list(m.row()), [m.row()])
    print(m.text())
    if not args.no_bounds and ds.num_attr_values == 2 and ds.num_classes == 2:
        rep = check_theorem_bounds(bundle, ds, cfg.attack, ev, critic_steps=cfg.eval.critic_steps, seed=seed)
        rows = rep.rows()
        _write_rows(report.with_name(report.stem + "_bounds.csv"), list(rows[0]), rows)
        print(rep.text())
    proj, _ = export_projection(bundle, ds, report.with_name(report.stem + "_projection.csv"))
    from .plotting import plot_projection
    table = np.loadtxt(proj, delimiter=",", skiprows=1, ndmin=2)
    plot_projection(table[:, :2], table[:, 2].astype(int), table[:, 3].astype(int),
                    proj.with_suffix(".png"), title=f"alpha={m.alpha:g} beta={m.beta:g}")
    return 0


def _sweep_point(job):
    cfg, alpha, beta, seed, data_path = job
    tc = dataclasses.replace(cfg.train, alpha=alpha, beta=beta, seed=seed)
    ds = load_data(data_path, cfg)
    bundle, _ = train(ds, tc, kind=cfg.model.kind or None)
    m = evaluate(bundle, ds, cfg.attack, seed=seed).metrics
    return {"alpha": alpha, "beta": beta, "seed": seed, "test_acc": m.test_acc, "robust_acc": m.robust_acc,
            "infer_acc": m.infer_acc, "gap": m.gap, "advantage": m.advantage}


def sweep_points(alphas: list[float], betas: list[float], grid: bool) -> list[tuple[float, float]]:
    if grid:
        pts = [(a, b) for a in alphas for b in betas]
    elif len(alphas) == len(betas):
        pts = list(zip(alphas, betas))
    elif len(betas) == 1:
        pts = [(a, betas[0]) for a in alphas]
    elif len(alphas) == 1:
        pts = [(alphas[0], b) for b in betas]
    else:
        raise ConfigError("--alphas and --betas need equal lengths (paired) or one single value; use --grid "
                          "for the cartesian product")
    for a, b in pts:
        if a < 0 or b < 0 or a + b > 1 + 1e-12:
            raise ConfigError(f"invalid point alpha={a:g} beta={b:g}: need non-negative weights with sum <= 1")
    return sorted(set(pts))


def summarize(rows: list[dict]) -> list[dict]:
    out = []
    for a, b in sorted({(r["alpha"], r["beta"]) for r in rows}):
        pts = [r for r in rows if r["alpha"] == a and r["beta"] == b]
        row = {"alpha": a, "beta": b, "n": len(pts)}
        for k in METRICS:
            vals = np.array([r[k] for r in pts], dtype=np.float64)
            row[f"{k}_mean"] = float(np.mean(vals))
            row[f"{k}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out.append(row)
    return out


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    pts = sweep_points(_float_list(args.alphas, "--alphas"), _float_list(args.betas, "--betas"), args.grid)
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cfg.write(out.with_name(out.stem + ".resolved.ini"))
    data_path = args.data or cfg.data.path
    load_data(data_path, cfg)  # fail fast on bad data before spawning work
    jobs = [(cfg, a, b, derive_seed(cfg.train.seed, a, b, i), data_path)
            for a, b in pts for i in range(args.seeds)]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    rows.sort(key=lambda r: (r["alpha"], r["beta"], r["seed"]))
    _write_rows(out, SWEEP_FIELDS, rows)
    summary = summarize(rows)
    _write_rows(out.with_name(out.stem + "_summary.csv"), list(summary[0]), summary)
    from .plotting import plot_tradeoff
    plot_tradeoff(rows, out.with_suffix(".png"))
    for s in summary:
        print(f"alpha={s['alpha']:g} beta={s['beta']:g} test={s['test_acc_mean']:.4f} "
              f"robust={s['robust_acc_mean']:.4f} infer={s['infer_acc_mean']:.4f} (n={s['n']})")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_suite
    results = run_suite(args.suite, seed=args.seed)
    lines = [r.line() for r in results]
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    text = "\n".join(lines)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0 if failed == 0 else 1


# ---- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="arprl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="run configuration file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")

    g = sub.add_parser("gen-data", help="generate a dataset cache file")
    g.add_argument("--kind", choices=["circles", "tabular"], default="circles")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, help="points per class (circles) or rows (tabular)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a representation learner")
    with_config(t)
    t.add_argument("--data", help="dataset cache or CSV file")
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    with_config(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset cache or CSV file")
    e.add_argument("--attack-eps", type=float)
    e.add_argument("--report", required=True, help="metrics CSV path; bounds and projection files go beside it")
    e.add_argument("--no-bounds", action="store_true", help="skip the bound estimates")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train and evaluate an (alpha, beta) schedule")
    with_config(s)
    s.add_argument("--data", help="dataset cache or CSV file")
    s.add_argument("--alphas", required=True)
    s.add_argument("--betas", required=True)
    s.add_argument("--grid", action="store_true", help="cartesian product instead of pairing")
    s.add_argument("--seeds", type=int, default=1, help="number of seeds per point")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", help="run the oracle suites")
    v.add_argument("--suite", choices=["gradients", "mi-oracles", "bounds-discrete", "all"], default="all")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"arprl: configuration error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, datamod.DataError, CheckpointError, EvaluationError,
            TrainingDivergence, FloatingPointError, OSError) as e:
        print(f"arprl: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
