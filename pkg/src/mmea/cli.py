"""Command-line entry point: data generation, training, fine-tuning and reports.

Exit codes: 0 success, 2 configuration or input error, 3 divergence,
4 verification failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import toy
from .adapters import METHOD_ALIASES, METHODS, AdapterConfig, DivergenceError, attach_adapters, baseline_variant, count_parameters
from .analysis import angular_deviation, overhead_benchmark, verify_equivariance
from .data import ATOMIC_NUMBERS, ExtXYZError, average_num_neighbors, compute_e0, read_extxyz, split_dataset, write_extxyz
from .model import ModelConfig, Potential, init_params
from .params import CheckpointError
from .stats import DegenerateDataError, paired_t_test, read_column_file, read_long_table, relative_improvement
from .trainer import FitResult, PotentialObjective, TrainConfig, evaluate, fit, write_history, write_json

log = logging.getLogger("mmea")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_VERIFY = 0, 2, 3, 4
SECTIONS = {"model": ModelConfig, "train": TrainConfig, "adapter": AdapterConfig}
DATA_KEYS = {"train", "valid", "n_train", "split_seed"}
TOP_KEYS = set(SECTIONS) | {"data", "method", "base_checkpoint", "seed", "out"}


class ConfigError(ValueError):
    """Invalid run configuration; the message starts with the field path."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _section(name: str, cls, raw) -> object:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    fields = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in fields:
            raise ConfigError(f"{name}.{key}: unknown field")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        first = msg.split()[0] if msg else ""
        path = f"{name}.{first}" if first in fields else name
        raise ConfigError(f"{path}: {msg}") from None


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be an object")
    for key in raw:
        if key not in TOP_KEYS:
            raise ConfigError(f"{key}: unknown field")
    return raw


def resolve(raw: dict, args, default_method: str) -> dict:
    """Merge CLI overrides into the raw config and validate every section."""
    cfg = {k: raw.get(k) for k in TOP_KEYS}
    cfg["seed"] = args.seed if args.seed is not None else (raw.get("seed") or 0)
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed: must be an integer")
    cfg["out"] = args.out or raw.get("out")
    if not cfg["out"]:
        raise ConfigError("out: output directory required (--out)")
    method = args.method or raw.get("method") or default_method
    method = METHOD_ALIASES.get(method, method)
    if method not in METHODS:
        raise ConfigError(f"method: unknown method {method!r}; choose from {list(METHODS)}")
    cfg["method"] = method

    data = dict(raw.get("data") or {})
    for key in data:
        if key not in DATA_KEYS:
            raise ConfigError(f"data.{key}: unknown field")
    if getattr(args, "data", None):
        data["train"] = args.data
    if getattr(args, "valid", None):
        data["valid"] = args.valid
    if not data.get("train"):
        raise ConfigError("data.train: training data path required")
    data.setdefault("valid", None)
    data.setdefault("n_train", None)
    data.setdefault("split_seed", cfg["seed"])
    cfg["data"] = data

    train = dict(raw.get("train") or {})
    train["seed"] = cfg["seed"]
    if getattr(args, "epochs", None) is not None:
        train["max_epochs"] = args.epochs
    cfg["train"] = _section("train", TrainConfig, train)

    adapter = dict(raw.get("adapter") or {})
    if args.rank is not None:
        adapter["rank"] = args.rank
    if args.phi is not None:
        adapter["phi"] = args.phi
    cfg["adapter"] = _section("adapter", AdapterConfig, adapter)
    cfg["model"] = raw.get("model")
    if getattr(args, "base", None):
        cfg["base_checkpoint"] = args.base
    return cfg


def _dump_config(cfg: dict, model: ModelConfig) -> dict:
    out = dict(cfg)
    out["model"] = model.to_dict()
    out["train"] = cfg["train"].to_dict()
    out["adapter"] = cfg["adapter"].to_dict()
    return out


def _load_frames(path):
    try:
        return read_extxyz(path)
    except OSError as exc:
        raise ConfigError(f"data: cannot read {path}: {exc}") from None
    except ExtXYZError as exc:
        raise ConfigError(f"data: {path}: {exc}") from None


def _splits(data: dict):
    frames = _load_frames(data["train"])
    if data["valid"]:
        return frames, _load_frames(data["valid"])
    n_train = data["n_train"] or max(1, int(0.9 * len(frames)))
    try:
        return split_dataset(frames, n_train, data["split_seed"])
    except ValueError as exc:
        raise ConfigError(f"data.n_train: {exc}") from None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_toy(args) -> int:
    if args.n_frames < 1:
        raise ConfigError("n_frames: must be >= 1")
    frames = toy.sample(args.n_frames, args.seed, args.distribution)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(write_extxyz(frames))
    print(f"wrote {len(frames)} frames (distribution {args.distribution}) to {out}")
    return EXIT_OK


def _run_fit(potential: Potential, cfg: dict, train, valid, model: ModelConfig) -> int:
    from .plotting import plot_history, plot_parity

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", _dump_config(cfg, model))
    objective = PotentialObjective(potential, cfg["train"])
    t0 = time.perf_counter()

    def progress(row):
        log.info("epoch %d train %.6g valid %.6g lr %.3g", row["epoch"], row["train_loss"], row["valid_loss"], row["lr"])

    result: FitResult = fit(objective, potential.store, train, valid, cfg["train"], on_epoch=progress)
    log.info("fit finished in %.1f s", time.perf_counter() - t0)
    write_history(out / "history.csv", result.history)
    best = Potential(model, dataclasses.replace(potential.plan, store=result.best))
    last = Potential(model, dataclasses.replace(potential.plan, store=result.last))
    best.save(out / "best.ckpt")
    last.save(out / "last.ckpt")
    metrics = {
        "method": potential.plan.method,
        "params": count_parameters(best.plan),
        "valid": evaluate(best, valid),
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history) - 1,
        "diverged": result.diverged,
        "message": result.message,
    }
    write_json(out / "metrics.json", metrics)
    plot_history(result.history, out / "history.png", title=potential.plan.method)
    labeled = [f for f in valid if f.labeled]
    if labeled:
        ef = best.energy_and_forces(labeled)
        plot_parity(np.concatenate([f.forces for f in labeled]), ef.forces, out / "parity_forces.png")
    print(json.dumps(metrics["valid"], sort_keys=True))
    if result.diverged:
        log.error("training diverged: %s", result.message)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_train(args) -> int:
    raw = load_config(args.config)
    cfg = resolve(raw, args, "scratch")
    if cfg["method"] not in ("scratch", "full"):
        raise ConfigError("method: train supports only scratch or full; use finetune for adapters")
    train, valid = _splits(cfg["data"])
    mraw = dict(cfg["model"] or {})
    if "elements" not in mraw:
        mraw["elements"] = sorted({s for f in train for s in f.symbols}, key=ATOMIC_NUMBERS.get)
    if "avg_num_neighbors" not in mraw:
        mraw["avg_num_neighbors"] = average_num_neighbors(train, mraw.get("r_cut", ModelConfig.r_cut))
    model = _section("model", ModelConfig, mraw)
    store = init_params(model, cfg["seed"])
    potential = Potential(model, baseline_variant("full", store, model))
    potential.plan.method = cfg["method"]
    potential.set_e0(compute_e0(train, model.elements).e0)
    return _run_fit(potential, cfg, train, valid, model)


def finetune_plan(method: str, base: Potential, adapter: AdapterConfig, seed: int, train=None):
    model = base.config
    if method == "mmea":
        return attach_adapters(base.store, model, adapter, seed=seed)
    if method == "scratch":
        store = init_params(model, seed)
        store["buffer/e0"] = base.store["buffer/e0"].copy()
        if train:
            store["buffer/e0"] = np.array([compute_e0(train, model.elements).e0[s] for s in model.elements])
        return baseline_variant("scratch", store, model)
    return baseline_variant(method, base.store, model, rank=adapter.rank, seed=seed,
                            attach_points=adapter.attach_points)


def cmd_finetune(args) -> int:
    raw = load_config(args.config)
    cfg = resolve(raw, args, "mmea")
    if not cfg.get("base_checkpoint"):
        raise ConfigError("base_checkpoint: finetune needs a base checkpoint (--base)")
    base = _load_potential(cfg["base_checkpoint"])
    if base.plan.method not in ("full", "scratch"):
        raise ConfigError("base_checkpoint: base must be a backbone checkpoint without adapters")
    if cfg["model"]:
        log.warning("model section ignored: the architecture comes from the base checkpoint")
    train, valid = _splits(cfg["data"])
    try:
        plan = finetune_plan(cfg["method"], base, cfg["adapter"], cfg["seed"], train)
    except ValueError as exc:
        raise ConfigError(f"adapter.attach_points: {exc}") from None
    return _run_fit(Potential(base.config, plan), cfg, train, valid, base.config)


def _load_potential(path) -> Potential:
    try:
        return Potential.load(path)
    except OSError as exc:
        raise ConfigError(f"checkpoint: cannot read {path}: {exc}") from None
    except (CheckpointError, KeyError, TypeError) as exc:
        raise ConfigError(f"checkpoint: {path}: {exc}") from None


def _emit(report: dict, text: str, args, name: str) -> None:
    """Print the report as text (or JSON with --json); mirror both under --out."""
    payload = json.dumps(report, indent=2, sort_keys=True) + "\n"
    sys.stdout.write(payload if getattr(args, "json", False) else text + "\n")
    if getattr(args, "out", None):
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.json").write_text(payload)
        (out / f"{name}.txt").write_text(text + "\n")


def _table(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells)


def cmd_eval(args) -> int:
    pot = _load_potential(args.checkpoint)
    frames = _load_frames(args.dataset)
    m = evaluate(pot, frames)
    if m["n_skipped"]:
        log.warning("skipped %d unlabeled frames", m["n_skipped"])
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"  # noqa: E731
    text = _table(
        ["E_MAE", "E_RMSE", "F_MAE", "F_RMSE", "frames", "skipped"],
        [[fmt(m["E_MAE"]), fmt(m["E_RMSE"]), fmt(m["F_MAE"]), fmt(m["F_RMSE"]), m["n_frames"], m["n_skipped"]]],
    )
    _emit(m, text, args, "metrics")
    return EXIT_OK


def cmd_verify(args) -> int:
    pot = _load_potential(args.checkpoint)
    rep = verify_equivariance(pot, args.trials, args.seed)
    for w in rep.warnings:
        log.warning(w)
    text = _table(
        ["trials", "E_rel_drift", "F_drift", "layer_drift", "passed"],
        [[rep.trials, f"{rep.energy_rel_drift:.3e}", f"{rep.force_drift:.3e}",
          ",".join(f"{x:.3e}" for x in rep.layer_drift), rep.passed]],
    )
    _emit(rep.to_dict(), text, args, "verify")
    return EXIT_OK if rep.passed else EXIT_VERIFY


def cmd_stats(args) -> int:
    if args.ttest:
        a, b = (read_column_file(p) for p in args.ttest)
        metrics = [m for m in a if m in b]
        if not metrics:
            raise ConfigError("stats.ttest: files share no metric columns")
        report, rows = {}, []
        for m in metrics:
            r = paired_t_test(a[m], b[m])
            report[m] = dataclasses.asdict(r)
            rows.append([m, f"{r.t:.3f}", f"{r.p:.4f}", r.df])
        _emit(report, _table(["metric", "t", "p", "df"], rows), args, "ttest")
    elif args.improve:
        table = read_long_table(args.improve)
        res = relative_improvement(table, args.baseline, args.method)
        report = {k: dataclasses.asdict(v) for k, v in res.items()}
        rows = [[k, f"{v.percent:.2f}", v.rows_used, ",".join(v.excluded) or "-"] for k, v in res.items()]
        _emit(report, _table(["metric", "improvement_%", "rows", "excluded"], rows), args, "improve")
    else:
        ca, cb, data = args.deviation
        devs = angular_deviation(_load_potential(ca), _load_potential(cb), _load_frames(data))
        report = {"layers": [dataclasses.asdict(d) for d in devs]}
        rows = [[d.layer, f"{d.mean_deg:.4f}", f"{d.median_deg:.4f}", d.count, d.skipped] for d in devs]
        _emit(report, _table(["layer", "mean_deg", "median_deg", "count", "skipped"], rows), args, "deviation")
    return EXIT_OK


def cmd_count_params(args) -> int:
    if args.checkpoint:
        base = _load_potential(args.checkpoint)
        model, store = base.config, base.store
    else:
        raw = load_config(args.config)
        model = _section("model", ModelConfig, raw.get("model") or {"channels": 16, "elements": ["H", "C", "O"]})
        store = init_params(model, args.seed or 0)
    methods = [METHOD_ALIASES.get(args.method, args.method)] if args.method else list(METHODS)
    adapter = AdapterConfig(rank=args.rank or 16, phi=args.phi or "residual")
    report, rows = {}, []
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"method: unknown method {m!r}")
        c = count_parameters(finetune_plan(m, Potential(model, store), adapter, args.seed or 0))
        report[m] = c
        rows.append([m, c["trainable"], c["total"], f"{c['percent']:.2f}"])
    _emit(report, _table(["method", "trainable", "total", "percent"], rows), args, "params")
    return EXIT_OK


def cmd_bench_overhead(args) -> int:
    from .plotting import plot_overhead

    if args.checkpoint:
        pot = _load_potential(args.checkpoint)
    else:
        pot = Potential.create(ModelConfig(elements=["H", "C", "O"], channels=16), args.seed or 0)
    res = overhead_benchmark(pot, args.ranks, args.repetitions, args.nodes, seed=args.seed or 0,
                             enabled=not args.disabled, phi=args.phi or "residual")
    rows = [[r, f"{1e3 * m:.3f}", f"{1e3 * a:.3f}", f"{1e3 * b:.3f}"]
            for r, m, a, b in zip(res.ranks, res.median_s, res.q1_s, res.q3_s)]
    fit_txt = (f"slope {res.fit.slope:.3e} s/rank, R^2 {res.fit.r2:.4f}"
               if res.fit.slope is not None else res.fit.note)
    _emit(res.to_dict(), _table(["rank", "median_ms", "q1_ms", "q3_ms"], rows) + "\n" + fit_txt, args, "overhead")
    if args.out:
        out = Path(args.out)
        with open(out / "overhead.csv", "w") as f:
            f.write("rank,median_s,q1_s,q3_s\n")
            for r, m, a, b in zip(res.ranks, res.median_s, res.q1_s, res.q3_s):
                f.write(f"{r},{m!r},{a!r},{b!r}\n")
        plot_overhead(res.ranks, res.median_s, res.q1_s, res.q3_s, res.fit, out / "overhead.png")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmea", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-toy", help="write labeled frames of the analytic toy molecule")
    g.add_argument("--out", required=True, help="output extxyz path")
    g.add_argument("--n-frames", type=int, default=500)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--distribution", choices=sorted(toy.DISTRIBUTIONS), default="A")
    g.set_defaults(func=cmd_gen_toy)

    for name, func, helptext in (
        ("train", cmd_train, "train a backbone (scratch or full)"),
        ("finetune", cmd_finetune, "fine-tune a base checkpoint"),
    ):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--config", help="JSON run config")
        t.add_argument("--seed", type=int)
        t.add_argument("--out", help="run directory")
        t.add_argument("--method", help=f"one of {', '.join(METHODS)}")
        t.add_argument("--rank", type=int)
        t.add_argument("--phi", choices=["residual", "exp"])
        t.add_argument("--data", help="training extxyz (overrides data.train)")
        t.add_argument("--valid", help="validation extxyz (overrides data.valid)")
        t.add_argument("--epochs", type=int, help="overrides train.max_epochs")
        if name == "finetune":
            t.add_argument("--base", help="base checkpoint (overrides base_checkpoint)")
        t.set_defaults(func=func)

    e = sub.add_parser("eval", help="energy/force errors of a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--out")
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="numerical rotation-equivariance check")
    v.add_argument("checkpoint")
    v.add_argument("--trials", type=int, default=50)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out")
    v.add_argument("--json", action="store_true")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("stats", help="t-tests, relative improvement, feature angles")
    mode = s.add_mutually_exclusive_group(required=True)
    mode.add_argument("--ttest", nargs=2, metavar=("A_CSV", "B_CSV"))
    mode.add_argument("--improve", metavar="TABLE_CSV")
    mode.add_argument("--deviation", nargs=3, metavar=("CKPT_A", "CKPT_B", "DATA"))
    s.add_argument("--baseline", default="ELoRA")
    s.add_argument("--method", default="MMEA")
    s.add_argument("--out")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_stats)

    c = sub.add_parser("count-params", help="trainable-parameter budget per method")
    c.add_argument("checkpoint", nargs="?")
    c.add_argument("--config")
    c.add_argument("--method")
    c.add_argument("--rank", type=int)
    c.add_argument("--phi", choices=["residual", "exp"])
    c.add_argument("--seed", type=int)
    c.add_argument("--out")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_count_params)

    b = sub.add_parser("bench-overhead", help="adapter pass time versus rank")
    b.add_argument("checkpoint", nargs="?")
    b.add_argument("--ranks", type=int, nargs="+", default=[16, 32, 64, 128])
    b.add_argument("--repetitions", type=int, default=20)
    b.add_argument("--nodes", type=int, default=20000)
    b.add_argument("--disabled", action="store_true", help="time the pass-through path instead")
    b.add_argument("--phi", choices=["residual", "exp"])
    b.add_argument("--seed", type=int)
    b.add_argument("--out")
    b.add_argument("--json", action="store_true")
    b.set_defaults(func=cmd_bench_overhead)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (ExtXYZError, CheckpointError, DegenerateDataError) as exc:
        log.error("input error: %s", exc)
        return EXIT_CONFIG
    except DivergenceError as exc:
        log.error("divergence: %s", exc)
        return EXIT_DIVERGED
    except OSError as exc:
        log.error("input error: %s", exc)
        return EXIT_CONFIG


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
