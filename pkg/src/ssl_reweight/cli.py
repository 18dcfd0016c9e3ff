"""Command-line entry point: ``gen-data``, ``run``, ``oracle`` and ``sweep``.

Configs are flat ``key=value`` text files (``#`` starts a comment). Every
``run`` writes a manifest holding the fully resolved config, so
``ssl-reweight run --config <dir>/manifest.txt`` reproduces the run.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, network
from .data import KINDS, dataset_from_csv, dataset_to_csv, make_dataset
from .influence import ConvergenceError, IhvpMode, make_probe, retraining_oracle
from .trainer import TrainConfig, TrainingError, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

MODES = ("per-example", "fixed", "supervised", "single")
METRICS_HEADER = ["iter", "val_loss", "val_err", "test_err", "lambda_mean", "lambda_min", "lambda_max"]
GRID = 100
PAD = 0.2

# keys that describe the data and the run rather than the trainer
RUN_DEFAULTS = {
    "mode": "per-example",
    "data": "",
    "kind": "moons",
    "n": 1240,
    "noise": 0.1,
    "margin": 1.0,
    "data_seed": -1,  # -1: same as seed
    "n_labeled": 10,
    "n_validation": 30,
    "n_unlabeled": 1000,
    "weights_stride": 1,
}
TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}

# settings used for the synthetic comparison experiments (see README)
PRESETS = {
    "synthetic": {
        "lambda_step": 0.1,
        "batch_unlabeled": 1000,
        "warmup_iters": 300,
        "warmup_supervised": True,
    },
}


class UsageError(Exception):
    pass


class NumericError(Exception):
    pass


# ---------------------------------------------------------------- config


def parse_kv(text: str, source: str = "config") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(key: str, value, default):
    if not isinstance(value, str):
        return value
    if isinstance(default, bool):
        return _parse_bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def _defaults() -> dict:
    d = {name: f.default for name, f in TRAIN_FIELDS.items()}
    d.update(RUN_DEFAULTS)
    return d


def resolve(raw: dict) -> tuple[dict, list[str]]:
    """Typed settings plus a list of ``key: reason`` problems (unknown keys, bad values)."""
    defaults = _defaults()
    settings = dict(defaults)
    errs = []
    preset = raw.get("preset")
    if preset:
        if preset not in PRESETS:
            errs.append(f"preset: unknown preset {preset!r}; expected one of {', '.join(PRESETS)}")
        else:
            settings.update(PRESETS[preset])
    for key, value in raw.items():
        if key == "preset":
            continue
        if key not in defaults:
            errs.append(f"{key}: unknown key")
            continue
        try:
            settings[key] = _coerce(key, value, defaults[key])
        except ValueError as exc:
            errs.append(f"{key}: {exc}")
    if settings["mode"] not in MODES:
        errs.append(f"mode: must be one of {', '.join(MODES)}")
    if settings["kind"] not in KINDS:
        errs.append(f"kind: must be one of {', '.join(KINDS)}")
    if settings["weights_stride"] < 1:
        errs.append("weights_stride: must be >= 1")
    for key in ("noise", "margin"):
        if settings[key] < 0:
            errs.append(f"{key}: must be >= 0")
    if settings["data_seed"] < 0:
        settings["data_seed"] = settings["seed"]
    return settings, errs


def train_config(settings: dict) -> TrainConfig:
    cfg = TrainConfig(**{k: settings[k] for k in TRAIN_FIELDS})
    mode = settings["mode"]
    if mode == "fixed":
        cfg = cfg.replace(lambda_step=0.0)
    elif mode == "supervised":
        cfg = cfg.replace(lambda_step=0.0, lambda_init=0.0)
    elif mode == "single":
        cfg = cfg.replace(single_lambda_mode=True)
    return cfg


def load_data(settings: dict):
    if settings["data"]:
        try:
            text = Path(settings["data"]).read_text()
        except OSError as exc:
            raise OSError(f"cannot read dataset {settings['data']}: {exc}") from exc
        try:
            return dataset_from_csv(text)
        except ValueError as exc:
            raise UsageError(f"data: {exc}") from exc
    try:
        return make_dataset(settings["kind"], n=settings["n"], noise=settings["noise"],
                            margin=settings["margin"], seed=settings["data_seed"],
                            n_labeled=settings["n_labeled"], n_validation=settings["n_validation"],
                            n_unlabeled=settings["n_unlabeled"])
    except ValueError as exc:
        raise UsageError(f"n: {exc}") from exc


def manifest_text(settings: dict, out: Path) -> str:
    lines = [f"# ssl-reweight {__version__}", f"# output directory: {out.resolve()}",
             f"version={__version__}"]
    lines += [f"{k}={_fmt_setting(settings[k])}" for k in sorted(settings)]
    return "\n".join(lines) + "\n"


def _fmt_setting(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------- output


def atomic_write(path: Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def g9(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return format(float(v), ".9g")


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([g9(v) for v in row])
    return buf.getvalue()


def boundary_grid(points: np.ndarray) -> np.ndarray:
    lo, hi = points.min(axis=0), points.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    lo, hi = lo - PAD * span, hi + PAD * span
    gx, gy = np.meshgrid(np.linspace(lo[0], hi[0], GRID), np.linspace(lo[1], hi[1], GRID))
    return np.column_stack([gx.ravel(), gy.ravel()])


def boundary_rows(it, params, grid):
    probs = network.predict_proba(params, grid)
    cls = probs.argmax(axis=1)
    conf = probs[np.arange(len(cls)), cls]
    for (x0, x1), c, p in zip(grid, cls, conf):
        yield (it, float(x0), float(x1), int(c), float(p))


# ---------------------------------------------------------------- commands


def execute_run(settings: dict, out: Path) -> dict:
    """Train once and write all artifacts into ``out``. Returns a final-row summary."""
    cfg = train_config(settings)
    data = load_data(settings)
    errs = cfg.validate(data)
    if errs:
        raise UsageError("invalid config:\n  " + "\n  ".join(errs))
    atomic_write(out / "manifest.txt", manifest_text(settings, out))

    grid = boundary_grid(data.all_points())
    mid = cfg.outer_iters // 2
    boundary_at = {0, mid, cfg.outer_iters}
    stride = settings["weights_stride"]
    weight_rows, boundary = [], []
    ids = np.arange(len(data.unlabeled))

    def callback(it, params, weights):
        if it % stride == 0 or it == cfg.outer_iters:
            weight_rows.extend(zip([it] * len(ids), ids, weights.values.tolist()))
        if it in boundary_at:
            boundary.extend(boundary_rows(it, params, grid))

    try:
        result = train(cfg, data, callback)
    except TrainingError as exc:
        snap = out / "snapshot.npz"
        arrays = {f"a{i}": a for i, a in enumerate(exc.snapshot.arrays())} if exc.snapshot else {}
        buf = io.BytesIO()
        np.savez(buf, iteration=exc.iteration, **arrays)
        fd, tmp = tempfile.mkstemp(dir=out, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, snap)
        raise NumericError(f"{exc}; snapshot written to {snap}") from exc

    metrics = [(r.iter, r.val_loss, r.val_err, r.test_err, r.lambda_mean, r.lambda_min, r.lambda_max)
               for r in result.log]
    atomic_write(out / "metrics.csv", csv_text(METRICS_HEADER, metrics))
    atomic_write(out / "weights.csv", csv_text(["iter", "example_id", "lambda"], weight_rows))
    atomic_write(out / "boundary.csv", csv_text(["iter", "x0", "x1", "pred_class", "pred_prob"], boundary))
    last = result.log[-1] if result.log else None
    return {"mode": settings["mode"], "seed": settings["seed"],
            "test_err": last.test_err if last else float("nan"),
            "val_loss": last.val_loss if last else float("nan"),
            "wall_clock": result.wall_clock}


def _run_job(job):
    settings, out = job
    try:
        return execute_run(settings, Path(out)), None
    except (UsageError, NumericError, OSError) as exc:
        return None, (type(exc).__name__, str(exc))


def run_many(jobs, workers):
    if len(jobs) == 1 or workers == 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


def _raise_first(results):
    for _, err in results:
        if err is None:
            continue
        kind, msg = err
        if kind == "UsageError":
            raise UsageError(msg)
        if kind == "NumericError":
            raise NumericError(msg)
        raise OSError(msg)


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"seeds: {exc}") from exc
    if not seeds:
        raise UsageError("seeds: empty list")
    return seeds


def gather_settings(args) -> dict:
    raw = {}
    if args.config:
        try:
            raw.update(parse_kv(Path(args.config).read_text(), args.config))
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    raw.pop("version", None)
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    for flag, key in (("preset", "preset"), ("mode", "mode"), ("eta", "lambda_step"),
                      ("ihvp_mode", "ihvp_mode"), ("kind", "kind"), ("data", "data"),
                      ("outer_iters", "outer_iters"), ("seed", "seed")):
        val = getattr(args, flag, None)
        if val is not None:
            raw[key] = str(val)
    settings, errs = resolve(raw)
    # keys that failed to parse keep their defaults, so validation still sees sane values
    errs += [e for e in train_config(settings).validate() if e.split(":")[0] not in
             {x.split(":")[0] for x in errs}]
    if errs:
        raise UsageError("invalid config:\n  " + "\n  ".join(errs))
    return settings


def cmd_run(args) -> int:
    settings = gather_settings(args)
    out = Path(args.out)
    if args.seeds:
        data_seed_fixed = "data_seed" in (args.set_keys or set())
        jobs = []
        for s in _seed_list(args.seeds):
            st = dict(settings, seed=s)
            if not data_seed_fixed:
                st["data_seed"] = s
            jobs.append((st, str(out / f"seed_{s}")))
        results = run_many(jobs, args.jobs)
        _raise_first(results)
        for summary, _ in results:
            print(f"seed {summary['seed']}: final test_err {g9(summary['test_err'])}")
        return EXIT_OK
    summary = execute_run(settings, out)
    print(f"final test_err {g9(summary['test_err'])} val_loss {g9(summary['val_loss'])} -> {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    settings = gather_settings(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise UsageError(f"modes: unknown mode(s) {', '.join(bad)}; expected {', '.join(MODES)}")
    out = Path(args.out)
    jobs = []
    for mode in modes:
        for s in _seed_list(args.seeds):
            jobs.append((dict(settings, mode=mode, seed=s, data_seed=s), str(out / mode / f"seed_{s}")))
    results = run_many(jobs, args.jobs)
    _raise_first(results)
    rows = [(r["mode"], r["seed"], r["test_err"], r["val_loss"]) for r, _ in results]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "seed", "test_err", "val_loss"])
    w.writerows([m, s, g9(e), g9(v)] for m, s, e, v in rows)
    atomic_write(out / "summary.csv", buf.getvalue())
    for mode in modes:
        errs = [e for m, _, e, _ in rows if m == mode]
        print(f"{mode}: mean test accuracy {g9(1.0 - np.mean(errs))} over {len(errs)} seeds")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    if args.kind not in KINDS:
        raise UsageError(f"kind: unknown generator {args.kind!r}; expected one of {', '.join(KINDS)}")
    try:
        data = make_dataset(args.kind, n=args.n, noise=args.noise, margin=args.margin, seed=args.seed,
                            n_labeled=args.labeled, n_validation=args.val, n_unlabeled=args.unlabeled)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    settings = {"kind": args.kind, "n": args.n, "noise": args.noise, "margin": args.margin,
                "data_seed": args.seed, "n_labeled": args.labeled, "n_validation": args.val,
                "n_unlabeled": args.unlabeled}
    try:
        atomic_write(out, dataset_to_csv(data))
        atomic_write(out.with_name(out.name + ".manifest"), manifest_text(settings, out.parent))
    except OSError as exc:
        # an unwritable destination is a usage problem for this command
        raise UsageError(f"cannot write {out}: {exc}") from exc
    print(f"wrote {sum(data.sizes().values())} rows to {out}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    raw = {}
    if args.config:
        try:
            raw.update(parse_kv(Path(args.config).read_text(), args.config))
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    raw.pop("version", None)
    if args.kind is not None:
        raw["kind"] = args.kind
    if args.data is not None:
        raw["data"] = args.data
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    settings, errs = resolve({k: v for k, v in raw.items() if k in _defaults()})
    if errs:
        raise UsageError("invalid config:\n  " + "\n  ".join(errs))
    if not 1 <= args.examples <= settings["n_unlabeled"]:
        raise UsageError(f"examples: must lie in [1, {settings['n_unlabeled']}]")
    if not 1e-4 <= args.epsilon <= 1e-1:
        raise UsageError("epsilon: must lie in [1e-4, 1e-1]")
    try:
        mode = IhvpMode.parse(args.ihvp_mode)
    except ValueError as exc:
        raise UsageError(f"ihvp_mode: {exc}") from exc
    if args.damping <= 0:
        raise UsageError("damping: must be > 0")
    data = load_data(settings)
    try:
        probe = make_probe(data, args.examples, hidden=args.hidden, damping=args.damping,
                           seed=settings["seed"])
        scores = probe.influence(mode).scores
        oracle = np.array([retraining_oracle(probe, u, args.epsilon) for u in range(args.examples)])
    except ConvergenceError as exc:
        raise NumericError(str(exc)) from exc
    rows = [(u, s, o) for u, (s, o) in enumerate(zip(scores, oracle))]
    atomic_write(Path(args.out), csv_text(["example_id", "influence_score", "oracle_score"], rows))
    pearson = float(np.corrcoef(scores, oracle)[0, 1]) if len(scores) > 1 else float("nan")
    sign = float(np.mean(np.sign(scores) == np.sign(oracle)))
    print(f"pearson={g9(pearson)} sign_agreement={g9(sign)} examples={len(scores)}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


class _SetAction(argparse.Action):
    def __call__(self, parser, ns, values, option_string=None):
        items = getattr(ns, self.dest) or []
        items.append(values)
        setattr(ns, self.dest, items)
        ns.set_keys = set(getattr(ns, "set_keys", None) or ()) | {values.split("=", 1)[0].strip()}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssl-reweight", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--config", help="key=value config file (a run manifest works too)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--set", action=_SetAction, metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--preset", help=f"named settings: {', '.join(PRESETS)}")
        sp.add_argument("--eta", type=float, help="per-example weight step size (lambda_step)")
        sp.add_argument("--ihvp-mode", dest="ihvp_mode", help="exact | identity | neumann[:K[:SCALE]]")
        sp.add_argument("--kind", help=f"dataset generator: {', '.join(KINDS)}")
        sp.add_argument("--data", help="dataset CSV (overrides the generator)")
        sp.add_argument("--outer-iters", dest="outer_iters", type=int)
        sp.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="concurrent runs")
        sp.set_defaults(set_keys=None)

    sp = sub.add_parser("run", help="train once (or once per seed) and write metrics")
    run_flags(sp)
    sp.add_argument("--mode", help=f"one of {', '.join(MODES)}")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--seed", type=int)
    g.add_argument("--seeds", help="comma-separated seeds; one sibling directory per seed")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="every mode x seed, run concurrently, with a summary table")
    run_flags(sp)
    sp.add_argument("--seeds", default="0,1,2,3,4")
    sp.add_argument("--modes", default=",".join(MODES))
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("gen-data", help="write a split synthetic dataset as CSV")
    sp.add_argument("--kind", default="moons")
    sp.add_argument("--n", type=int, default=1240)
    sp.add_argument("--noise", type=float, default=0.1)
    sp.add_argument("--margin", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--labeled", type=int, default=10)
    sp.add_argument("--val", type=int, default=30)
    sp.add_argument("--unlabeled", type=int, default=1000)
    sp.add_argument("--out", required=True, help="CSV path")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("oracle", help="compare influence scores with the retraining oracle")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True, help="CSV path")
    sp.add_argument("--kind")
    sp.add_argument("--data")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--examples", type=int, default=50)
    sp.add_argument("--epsilon", type=float, default=1e-2)
    sp.add_argument("--damping", type=float, default=1e-2)
    sp.add_argument("--hidden", type=int, default=100)
    sp.add_argument("--ihvp-mode", dest="ihvp_mode", default="exact")
    sp.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
